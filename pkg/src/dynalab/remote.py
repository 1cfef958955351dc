"""Chat-completion client that lets an external LLM act as the policy."""

from __future__ import annotations

import logging
import os
import random
import time
from dataclasses import dataclass

import httpx

from .responses import Response, parse_response

log = logging.getLogger(__name__)


class EndpointError(RuntimeError):
    """The endpoint could not produce a completion within the retry budget."""


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    model: str = "default"
    auth_header: str = "Authorization"
    # value read from this environment variable, if set, overrides auth_value
    auth_env: str | None = None
    auth_value: str | None = None
    attempts: int = 3
    timeout: float = 60.0
    temperature: float = 1.0
    max_tokens: int = 1024
    backoff: float = 0.0

    @classmethod
    def from_dict(cls, data: dict) -> "EndpointConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def headers(self) -> dict[str, str]:
        value = os.environ.get(self.auth_env) if self.auth_env else None
        value = value or self.auth_value
        return {self.auth_header: value} if value else {}


def request_body(config: EndpointConfig, prompt: str) -> dict:
    return {
        "model": config.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": config.temperature,
        "max_tokens": config.max_tokens,
    }


def complete(config: EndpointConfig, prompt: str, client: httpx.Client | None = None) -> str:
    """POST one user message and return ``choices[0].message.content``.

    Transport failures, timeouts and 429/5xx answers are retried; anything
    else fails immediately.
    """
    own_client = client is None
    client = client or httpx.Client(timeout=config.timeout)
    last_error: Exception | None = None
    try:
        for attempt in range(1, config.attempts + 1):
            try:
                resp = client.post(
                    config.url,
                    json=request_body(config, prompt),
                    headers=config.headers(),
                    timeout=config.timeout,
                )
            except httpx.TransportError as exc:
                last_error = exc
                log.warning("attempt %d/%d failed: %s", attempt, config.attempts, exc)
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_error = EndpointError(f"HTTP {resp.status_code}")
                    log.warning("attempt %d/%d got HTTP %d", attempt, config.attempts, resp.status_code)
                elif resp.status_code >= 400:
                    raise EndpointError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise EndpointError(f"malformed completion payload: {exc}") from None
            if config.backoff and attempt < config.attempts:
                time.sleep(config.backoff * 2 ** (attempt - 1))
    finally:
        if own_client:
            client.close()
    raise EndpointError(f"no completion after {config.attempts} attempts: {last_error}")


def act_remote(endpoint_config: EndpointConfig, observation, client: httpx.Client | None = None) -> Response:
    # ParseError propagates as-is: malformed text is never retried
    return parse_response(complete(endpoint_config, observation.text, client))


class RemotePolicy:
    def __init__(self, config: EndpointConfig, client: httpx.Client | None = None):
        self.config = config
        self.client = client

    def act(self, observation, rng: random.Random | None = None) -> Response:
        return act_remote(self.config, observation, self.client)

    def refine(self, context, rng: random.Random | None = None) -> Response:
        return parse_response(complete(self.config, context.composed_prompt, self.client))

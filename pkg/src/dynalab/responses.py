"""Structured agent responses: ``<think>``, ``<plan>`` and ``<action>`` tags."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .env import Action

_THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL)
_PLAN_RE = re.compile(r"<plan>(.*?)</plan>", re.DOTALL)
_ACTION_RE = re.compile(r"<action>(.*?)</action>", re.DOTALL)


class ParseError(ValueError):
    """The response text violates the plan/action tag contract."""

    def __init__(self, message: str, text: str = ""):
        super().__init__(message)
        self.text = text


@dataclass(frozen=True)
class Response:
    think: str
    plan: tuple[Action, ...]
    action: Action
    raw_text: str
    logprob: float | None = None
    consistent: bool = True
    meta: dict = field(default_factory=dict, compare=False, repr=False)


def format_response(think: str, plan, action: Action) -> str:
    plan_text = ", ".join(a.value for a in plan)
    return f"<think>{think}</think>\n\n<plan>{plan_text}</plan>\n<action>{action.value}</action>"


def make_response(think: str, plan, action: Action | None = None, logprob: float | None = None) -> Response:
    plan = tuple(plan)
    if not plan:
        raise ValueError("plan must contain at least one action")
    action = plan[0] if action is None else action
    return Response(
        think=think,
        plan=plan,
        action=action,
        raw_text=format_response(think, plan, action),
        logprob=logprob,
        consistent=plan[0] == action,
    )


def parse_response(text: str) -> Response:
    """Parse raw model text; the ``<action>`` tag wins when it disagrees with the plan."""
    think_match = _THINK_RE.search(text)
    think = think_match.group(1).strip() if think_match else ""
    # tag examples inside the reasoning must not shadow the final answer
    tail = _THINK_RE.sub("", text)
    plans = _PLAN_RE.findall(tail)
    actions = _ACTION_RE.findall(tail)
    if not plans or not plans[-1].strip():
        raise ParseError("missing or empty <plan> tag", text)
    if not actions or not actions[-1].strip():
        raise ParseError("missing or empty <action> tag", text)
    try:
        plan = tuple(Action.parse(tok) for tok in plans[-1].split(",") if tok.strip())
        action = Action.parse(actions[-1])
    except ValueError as exc:
        raise ParseError(str(exc), text) from None
    if not plan:
        raise ParseError("plan has no actions", text)
    return Response(
        think=think,
        plan=plan,
        action=action,
        raw_text=text,
        consistent=plan[0] == action,
    )

"""Episode records, the plain rollout loop, and JSON Lines persistence."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

from .env import SokobanState, TaskInstance, parse_grid, render_text, step
from .policy import build_observation
from .responses import ParseError, Response, parse_response

log = logging.getLogger(__name__)


@dataclass
class TrajectoryRecord:
    task_id: str
    turn_index: int
    observation_key: str
    response: Response | None
    reward: float
    done: bool
    success: bool
    kind: str = "plain"
    state: SokobanState | None = field(default=None, repr=False, compare=False)
    raw_text: str = ""
    # behaviour-policy logprob at rollout time; None for scripted or remote policies
    logprob: float | None = None

    @property
    def action(self):
        return None if self.response is None else self.response.action

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "turn": self.turn_index,
            "kind": self.kind,
            "observation": render_text(self.state) if self.state is not None else None,
            "observation_key": self.observation_key,
            "response": self.raw_text,
            "action": None if self.action is None else self.action.value,
            "reward": self.reward,
            "done": self.done,
            "success": self.success,
            "logprob": self.logprob,
        }

    @classmethod
    def from_json(cls, data: dict) -> "TrajectoryRecord":
        try:
            response = replace(parse_response(data["response"]), logprob=data.get("logprob"))
        except ParseError:
            response = None
        state = parse_grid(data["observation"], step_count=data["turn"]) if data.get("observation") else None
        return cls(
            task_id=data["task_id"],
            turn_index=data["turn"],
            observation_key=data["observation_key"],
            response=response,
            reward=data["reward"],
            done=data["done"],
            success=data["success"],
            kind=data.get("kind", "plain"),
            state=state,
            raw_text=data["response"],
            logprob=data.get("logprob"),
        )


@dataclass
class Episode:
    task_id: str
    records: list[TrajectoryRecord]
    success: bool
    final_state: SokobanState | None = None

    @property
    def states(self) -> list[SokobanState]:
        """s_0 .. s_T, including the state reached by the last action."""
        return [r.state for r in self.records] + [self.final_state]

    @property
    def total_return(self) -> float:
        return episode_return(self.records)

    def __len__(self) -> int:
        return len(self.records)


def episode_return(records: Iterable[TrajectoryRecord]) -> float:
    return sum(r.reward for r in records)


def run_episode(
    instance: TaskInstance,
    policy,
    rng: random.Random,
    h: int = 0,
    kind: str = "plain",
) -> Episode:
    """Roll ``policy`` until success or the step cap.

    A response that fails to parse becomes a stay-in-place move costing the
    usual step penalty.
    """
    state = instance.initial_state
    history: list[tuple[SokobanState, str]] = []
    records: list[TrajectoryRecord] = []
    while True:
        obs = build_observation(instance, history, h, current=state)
        try:
            response = policy.act(obs, rng)
            raw = response.raw_text
        except ParseError as exc:
            log.debug("unparseable response on %s turn %d: %s", instance.task_id, len(records), exc)
            response, raw = None, getattr(exc, "text", "")
        outcome = step(state, None if response is None else response.action, instance.t_max)
        records.append(
            TrajectoryRecord(
                task_id=instance.task_id,
                turn_index=len(records),
                observation_key=obs.key,
                response=response,
                reward=outcome.reward,
                done=outcome.done,
                success=outcome.success,
                kind=kind,
                state=state,
                raw_text=raw,
                logprob=None if response is None else response.logprob,
            )
        )
        if h:
            history.append((state, raw))
        state = outcome.next_state
        if outcome.done:
            return Episode(instance.task_id, records, outcome.success, state)


def write_jsonl(path: str | Path, rows: Iterable[dict], append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a" if append else "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)

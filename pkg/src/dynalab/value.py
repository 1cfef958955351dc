"""Leaf-value estimation: Monte-Carlo discounted success rates and a BFS-backed oracle."""

from __future__ import annotations

import json
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .env import SokobanState, TaskInstance, state_key
from .oracle import bfs_solve
from .trajectory import run_episode

DEFAULT_GAMMA = 0.95
DEFAULT_PRIOR = 0.1


@dataclass
class ValueTable:
    gamma: float
    t_max: int
    prior: float = DEFAULT_PRIOR
    entries: dict[str, tuple[float, int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    def __contains__(self, state: SokobanState) -> bool:
        return state_key(state) in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> dict:
        return {
            "gamma": self.gamma,
            "t_max": self.t_max,
            "prior": self.prior,
            "entries": {k: {"value": v, "visit_count": n} for k, (v, n) in sorted(self.entries.items())},
        }

    @classmethod
    def from_json(cls, data: dict) -> "ValueTable":
        entries = {k: (e["value"], e["visit_count"]) for k, e in data["entries"].items()}
        return cls(data["gamma"], data["t_max"], data.get("prior", DEFAULT_PRIOR), entries)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ValueTable":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def mc_fit(
    policy,
    instances: Iterable[TaskInstance],
    n_rollouts: int,
    repeats: int = 1,
    gamma: float = DEFAULT_GAMMA,
    t_max: int | None = None,
    seed: int = 0,
    prior: float = DEFAULT_PRIOR,
) -> ValueTable:
    """V(s) = gamma**(t_max - t) * (successful rollouts through s) / (rollouts through s).

    ``t`` is the earliest step index at which ``s`` was seen in any rollout.
    A rollout passing through ``s`` several times counts once.
    """
    if n_rollouts < 1 or repeats < 1:
        raise ValueError("n_rollouts and repeats must be >= 1")
    instances = list(instances)
    horizon = t_max if t_max is not None else max(i.t_max for i in instances)
    through: dict[str, int] = defaultdict(int)
    successes: dict[str, int] = defaultdict(int)
    first_t: dict[str, int] = {}
    for inst in instances:
        for k in range(n_rollouts * repeats):
            rng = random.Random(f"mc:{seed}:{inst.task_id}:{k}")
            episode = run_episode(inst, policy, rng)
            seen: set[str] = set()
            for t, s in enumerate(episode.states):
                key = state_key(s)
                if key in seen:
                    continue
                seen.add(key)
                first_t[key] = min(first_t.get(key, t), t)
                through[key] += 1
                successes[key] += episode.success
    entries = {
        key: (gamma ** max(horizon - first_t[key], 0) * successes[key] / through[key], through[key])
        for key in through
    }
    return ValueTable(gamma, horizon, prior, entries)


def value_lookup(table: ValueTable, state: SokobanState, t: int) -> float:
    entry = table.entries.get(state_key(state))
    if entry is not None:
        return entry[0]
    return table.gamma ** max(table.t_max - t, 0) * table.prior


def oracle_value(state: SokobanState, t: int, gamma: float = DEFAULT_GAMMA, t_max: int = 20) -> float:
    result = bfs_solve(state)
    if result.solvable and result.optimal_length <= t_max - t:
        return gamma ** (t_max - t)
    return 0.0


def lookup_fn(table: ValueTable):
    return lambda state, t: value_lookup(table, state, t)


def oracle_value_fn(gamma: float, t_max: int):
    return lambda state, t: oracle_value(state, t, gamma, t_max)

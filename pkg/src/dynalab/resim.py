"""Search-tree-to-trace data generation.

At every real step a set of short rollouts is sampled from the current state,
deduplicated and valued; the best branch plus a few others are narrated into
one reasoning trace whose final plan/action is then executed.  Every
coordinate in the narration comes from the real successor states, so the
trace is faithful by construction.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .env import (
    Action,
    SokobanState,
    TaskInstance,
    describe_neighbors,
    describe_positions,
    is_deadlocked,
    state_key,
    step,
)
from .policy import DEFAULT_HISTORY, Observation, build_observation
from .responses import ParseError, format_response, parse_response
from .trajectory import Episode, TrajectoryRecord

ValueFn = Callable[[SokobanState, int], float]


class EmptyTreeError(ValueError):
    pass


@dataclass(frozen=True)
class Branch:
    actions: tuple[Action, ...]
    states: tuple[SokobanState, ...]
    start: SokobanState
    leaf_value: float = 0.0
    terminal: bool = False
    success: bool = False

    @property
    def final_state(self) -> SokobanState:
        return self.states[-1] if self.states else self.start

    def with_value(self, value: float) -> "Branch":
        return Branch(self.actions, self.states, self.start, value, self.terminal, self.success)


@dataclass(frozen=True)
class SimTrace:
    text: str
    chosen_plan: tuple[Action, ...]
    chosen_action: Action
    branch_count: int
    branches: tuple[Branch, ...] = field(default=(), repr=False, compare=False)


@dataclass(frozen=True)
class SFTRecord:
    observation: Observation
    target_text: str
    task_id: str
    turn_index: int
    split: str = "train"

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "turn": self.turn_index,
            "observation": self.observation.text,
            "target": self.target_text,
            "split": self.split,
        }


def _observe(state: SokobanState, t_max: int) -> Observation:
    inst = TaskInstance("branch", state, t_max)
    return build_observation(inst, (), 0)


def expand(
    state: SokobanState,
    policy,
    b: int,
    d: int,
    seed,
    t_max: int,
) -> list[Branch]:
    """``b`` independent rollouts of at most ``d`` steps from ``state``."""
    if b < 1 or d < 1:
        raise ValueError("b and d must be >= 1")
    branches = []
    for i in range(b):
        rng = random.Random(f"expand:{seed}:{i}")
        actions: list[Action] = []
        states: list[SokobanState] = []
        current, done, success = state, state.solved, state.solved
        while len(actions) < d and not done:
            try:
                action = policy.act(_observe(current, t_max), rng).action
            except ParseError:
                break
            outcome = step(current, action, t_max)
            actions.append(action)
            states.append(outcome.next_state)
            current, done, success = outcome.next_state, outcome.done, outcome.success
        branches.append(Branch(tuple(actions), tuple(states), state, terminal=done, success=success))
    return branches


def prefixes(branches: Sequence[Branch]) -> list[Branch]:
    """Every non-empty prefix of every branch, each as a branch of its own.

    A rollout that passes through a promising state and then wanders off would
    otherwise be judged by its leaf alone.
    """
    out = []
    for br in branches:
        for j in range(1, len(br.actions) + 1):
            last = j == len(br.actions)
            solved = br.states[j - 1].solved
            out.append(
                Branch(
                    br.actions[:j],
                    br.states[:j],
                    br.start,
                    terminal=(br.terminal and last) or solved,
                    success=(br.success and last) or solved,
                )
            )
    return out


def dedupe(branches: Sequence[Branch]) -> list[Branch]:
    seen = set()
    out = []
    for br in branches:
        key = (br.actions, state_key(br.final_state))
        if key not in seen:
            seen.add(key)
            out.append(br)
    return out


def value_leaves(branches: Sequence[Branch], value_fn: ValueFn, t: int = 0) -> list[Branch]:
    """Terminal success scores 1, terminal failure or a corner deadlock 0, else ``value_fn``."""
    out = []
    for br in branches:
        final = br.final_state
        if br.success:
            v = 1.0
        elif br.terminal or is_deadlocked(final):
            v = 0.0
        else:
            v = float(value_fn(final, t + len(br.actions)))
        out.append(br.with_value(v))
    return out


def _rank(br: Branch) -> tuple:
    # shorter first among equal values: a success reached sooner never hides behind no-op prefixes
    return (-br.leaf_value, len(br.actions), tuple(a.index for a in br.actions))


def select(branches: Sequence[Branch], b_train: int, seed) -> tuple[Branch, list[Branch]]:
    if not branches:
        raise EmptyTreeError("no branches to select from")
    if b_train < 1:
        raise ValueError("b_train must be >= 1")
    best_i = min(range(len(branches)), key=lambda i: _rank(branches[i]))
    rest = [br for i, br in enumerate(branches) if i != best_i]
    k = min(b_train - 1, len(rest))
    others = random.Random(f"select:{seed}").sample(rest, k) if k else []
    return branches[best_i], others


# --- narration ------------------------------------------------------------

def round_percent(value: float, granularity: int = 5) -> int:
    return int(granularity * round(value * 100 / granularity))


def _arrow(actions: Sequence[Action]) -> str:
    return " -> ".join(a.value for a in actions)


def _narrate_move(before: SokobanState, action: Action, after: SokobanState, t_max: int) -> str:
    if after.player == before.player:
        what = f'"{action.value}" is blocked, so the player stays at {after.player}'
    else:
        moved = sorted(before.boxes - after.boxes)
        if moved:
            (src,) = moved
            (dst,) = sorted(after.boxes - before.boxes)
            onto = "onto the target at" if dst in after.targets else "to"
            what = f'"{action.value}" moves the player to {after.player} and pushes the box from {src} {onto} {dst}'
        else:
            what = f'"{action.value}" moves the player to {after.player}'
    sentence = f"- {what}. Now {describe_positions(after)[len('Currently, '):]}"
    if after.solved:
        sentence += " All boxes are on targets, so the puzzle is solved."
    elif is_deadlocked(after):
        sentence += " A box is stuck in a corner, so the puzzle can no longer be solved."
    elif after.step_count >= t_max:
        sentence += " The step limit is reached."
    return sentence


def narrate_branch(index: int, branch: Branch, t_max: int, granularity: int = 5) -> str:
    lines = [f"Maybe we can try plan {index}: {_arrow(branch.actions)}."]
    before = branch.start
    for action, after in zip(branch.actions, branch.states):
        lines.append(_narrate_move(before, action, after, t_max))
        before = after
    lines.append(describe_neighbors(branch.final_state))
    pct = round_percent(branch.leaf_value, granularity)
    lines.append(f"Discounted success rate if continued further: around {pct}%.")
    return "\n".join(lines)


def aggregate(
    state: SokobanState,
    best: Branch,
    others: Sequence[Branch],
    template_config: dict | None = None,
) -> SimTrace:
    """Narrate the selected branches into one trace; the best branch comes last."""
    cfg = {"t_max": 20, "percent_granularity": 5, **(template_config or {})}
    if not best.actions:
        raise EmptyTreeError("best branch has no actions")
    ordered = list(others) + [best]
    blocks = [
        narrate_branch(i, br, cfg["t_max"], cfg["percent_granularity"])
        for i, br in enumerate(ordered, 1)
    ]
    opening = (
        f"{describe_positions(state)} "
        f"Let me simulate {len(ordered)} possible plan{'s' if len(ordered) > 1 else ''}."
    )
    k = len(ordered)
    pct = round_percent(best.leaf_value, cfg["percent_granularity"])
    closing = (
        f'Based on these simulations, "{best.actions[0].value}" is the best action for the current step. '
        f"This is because plan {k} ({_arrow(best.actions)}) achieves a discounted success rate of "
        f"around {pct}% in {len(best.actions)} steps."
    )
    think = "\n\n".join([opening, *blocks, closing])
    text = format_response(think, best.actions, best.actions[0])
    return SimTrace(text, best.actions, best.actions[0], len(ordered), tuple(ordered))


# --- episode driver -------------------------------------------------------

@dataclass
class ResimStep:
    record: SFTRecord
    trace: SimTrace
    deduped: int


def resim_episode(
    instance: TaskInstance,
    policy,
    value_fn: ValueFn,
    b: int = 16,
    d: int = 5,
    b_train: int = 2,
    seed=0,
    h: int = DEFAULT_HISTORY,
    percent_granularity: int = 5,
    use_prefixes: bool = True,
) -> tuple[list[SFTRecord], Episode, list[ResimStep]]:
    """Run the search-aggregate-execute loop until success or the step cap.

    With ``use_prefixes`` every prefix of a sampled rollout competes as a
    candidate plan alongside the full rollouts.
    """
    state = instance.initial_state
    history: list[tuple[SokobanState, str]] = []
    sft: list[SFTRecord] = []
    steps: list[ResimStep] = []
    records: list[TrajectoryRecord] = []
    cfg = {"t_max": instance.t_max, "percent_granularity": percent_granularity}
    t = 0
    while True:
        obs = build_observation(instance, history, h, current=state)
        branches = expand(state, policy, b, d, f"{seed}:{instance.task_id}:{t}", instance.t_max)
        branches = dedupe(prefixes(branches) if use_prefixes else branches)
        branches = [br for br in branches if br.actions] or branches
        valued = value_leaves(branches, value_fn, t)
        best, others = select(valued, b_train, f"{seed}:{instance.task_id}:{t}")
        trace = aggregate(state, best, others, cfg)
        rec = SFTRecord(obs, trace.text, instance.task_id, t, instance.split)
        sft.append(rec)
        steps.append(ResimStep(rec, trace, len(valued)))
        outcome = step(state, trace.chosen_action, instance.t_max)
        records.append(
            TrajectoryRecord(
                task_id=instance.task_id,
                turn_index=t,
                observation_key=obs.key,
                response=parse_response(trace.text),
                reward=outcome.reward,
                done=outcome.done,
                success=outcome.success,
                kind="resim",
                state=state,
                raw_text=trace.text,
            )
        )
        if h:
            history.append((state, trace.text))
        state = outcome.next_state
        t += 1
        if outcome.done:
            return sft, Episode(instance.task_id, records, outcome.success, state), steps

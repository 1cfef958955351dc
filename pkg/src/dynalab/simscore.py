"""Simulation scoring: how well a response's imagined future matches reality.

The chosen branch is pulled out of a response, its actions are replayed from
the true state, and the final imagined state is compared with the real one.
Correctness (up to 0.3) rewards matching coordinates; progress (up to 0.7)
rewards what the plan really achieved.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .env import Action, Position, SokobanEnv, SokobanState, box_distance, is_deadlocked, step
from .responses import ParseError, parse_response

log = logging.getLogger(__name__)

CORRECTNESS_CAP = 0.3
PROGRESS_CAP = 0.7


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class ImaginedState:
    """Coordinates a response claims for one moment; ``None`` means not mentioned."""

    player: Position | None = None
    boxes: tuple[Position, ...] | None = None
    unsolved_targets: tuple[Position, ...] | None = None
    # (position, kind) pairs from neighbour sentences; kind is wall, floor, box, box on target or target
    cells: tuple[tuple[Position, str], ...] = ()


@dataclass(frozen=True)
class ExtractedSimulation:
    actions: tuple[Action, ...]
    imagined_states: tuple[ImaginedState, ...] = ()
    discounted_success_rate: float | None = None

    def __post_init__(self) -> None:
        if len(self.imagined_states) > len(self.actions) + 1:
            raise ValueError("more imagined states than actions + 1")

    @property
    def final(self) -> ImaginedState | None:
        return self.imagined_states[-1] if self.imagined_states else None


# --- templated extraction -------------------------------------------------

_COORD = r"\(\d+, \d+\)"
_COORD_RE = re.compile(r"\((\d+), (\d+)\)")
_LIST = rf"(none|{_COORD}(?:, {_COORD})*)"
_POSITIONS_RE = re.compile(
    rf"the player is at ({_COORD}); boxes are at {_LIST}; unsolved targets are at {_LIST}\."
)
_NEIGHBOR_RE = re.compile(rf"a (wall|floor|box on target|box|target) (?:above|below|left of|right of) the player at ({_COORD})")
_PLAN_HEAD_RE = re.compile(r"^Maybe we can try plan (\d+): (.*)\.$", re.MULTILINE)
_CHOSEN_RE = re.compile(r"This is because plan (\d+) \(")
_RATE_RE = re.compile(r"around (\d+(?:\.\d+)?)%")


def _coords(text: str) -> tuple[Position, ...]:
    return tuple(Position(int(r), int(c)) for r, c in _COORD_RE.findall(text))


def _parse_state_sentence(m: re.Match) -> ImaginedState:
    return ImaginedState(
        player=_coords(m.group(1))[0],
        boxes=_coords(m.group(2)),
        unsolved_targets=_coords(m.group(3)),
    )


def parse_description(text: str) -> ImaginedState:
    """Loose reader for a single state description (last position sentence wins)."""
    matches = list(_POSITIONS_RE.finditer(text))
    base = _parse_state_sentence(matches[-1]) if matches else ImaginedState()
    if base.player is None:
        m = re.search(rf"player is at ({_COORD})", text)
        if m:
            base = ImaginedState(player=_coords(m.group(1))[0])
    cells = tuple((_coords(pos)[0], kind) for kind, pos in _NEIGHBOR_RE.findall(text))
    return ImaginedState(base.player, base.boxes, base.unsolved_targets, cells)


def _parse_block(block: str, opening: ImaginedState | None) -> ExtractedSimulation:
    head = _PLAN_HEAD_RE.search(block)
    actions = tuple(Action.parse(a) for a in head.group(2).split(" -> "))
    states = [opening] if opening is not None else []
    step_lines = [line for line in block.splitlines() if line.startswith("- ")]
    for line in step_lines:
        m = _POSITIONS_RE.search(line)
        if m:
            states.append(_parse_state_sentence(m))
    neighbors = tuple((_coords(pos)[0], kind) for kind, pos in _NEIGHBOR_RE.findall(block))
    if states and neighbors:
        last = states[-1]
        states[-1] = ImaginedState(last.player, last.boxes, last.unsolved_targets, neighbors)
    rate = _RATE_RE.search(block.split("Discounted success rate", 1)[-1]) if "Discounted success rate" in block else None
    return ExtractedSimulation(actions, tuple(states), float(rate.group(1)) / 100 if rate else None)


def extract_templated(text: str) -> ExtractedSimulation:
    """Deterministic parser for the narrated traces produced in this package."""
    try:
        response = parse_response(text)
    except ParseError:
        response = None
    think = response.think if response is not None else text
    heads = list(_PLAN_HEAD_RE.finditer(think))
    if not heads:
        if response is None:
            raise ExtractionError("no plan blocks and no <plan> tag")
        return ExtractedSimulation(response.plan)
    blocks = {}
    for i, h in enumerate(heads):
        end = heads[i + 1].start() if i + 1 < len(heads) else len(think)
        blocks[int(h.group(1))] = think[h.start():end]
    chosen = _CHOSEN_RE.search(think)
    if chosen and int(chosen.group(1)) in blocks:
        block = blocks[int(chosen.group(1))]
    else:
        block = blocks[max(blocks)]
    opening_m = _POSITIONS_RE.search(think[: heads[0].start()])
    opening = _parse_state_sentence(opening_m) if opening_m else None
    try:
        return _parse_block(block, opening)
    except ValueError as exc:
        raise ExtractionError(f"malformed plan block: {exc}") from None


class RemoteExtractor:
    """Delegates extraction of free-form text to a chat endpoint returning the branch JSON."""

    PROMPT = (
        "Read the agent response below and find the complete branch (action sequence) that led to its "
        "chosen action. Reply with a JSON object inside <json> </json> tags of the form "
        '{{"extracted_final_chosen_branch": {{"actions": [...], "last_observation": "...", '
        '"discounted_success_rate": number or -1}}}}. The last_observation field describes the imagined '
        "player, box, target and wall coordinates after the final action of that branch.\n\n"
        "# Input response\n{response}"
    )

    def __init__(self, config, client=None):
        self.config = config
        self.client = client

    def __call__(self, text: str) -> ExtractedSimulation:
        from .remote import complete

        reply = complete(self.config, self.PROMPT.format(response=text), self.client)
        m = re.search(r"<json>(.*?)</json>", reply, re.DOTALL)
        try:
            data = json.loads(m.group(1) if m else reply)
            branch = data["extracted_final_chosen_branch"]
            actions = tuple(Action.parse(a) for a in branch["actions"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ExtractionError(f"unusable extractor reply: {exc}") from None
        last = branch.get("last_observation") or ""
        rate = branch.get("discounted_success_rate")
        rate = None if rate is None or rate < 0 else rate / 100
        states = (parse_description(last),) if last else ()
        return ExtractedSimulation(actions, states, rate)


def extract_simulation(response_text: str, extractor: Callable[[str], ExtractedSimulation] | None = None):
    """Templated parser by default; pass ``extractor`` (e.g. a RemoteExtractor) for free-form text."""
    return (extractor or extract_templated)(response_text)


# --- ground truth and rubric ----------------------------------------------

def ground_truth_rollforward(state: SokobanState | SokobanEnv, actions: Sequence[Action]) -> list[SokobanState]:
    """True states after each action; replay stops once the puzzle is solved.

    Given a live environment the replay runs on it and the environment is
    restored afterwards.
    """
    env = state if isinstance(state, SokobanEnv) else None
    current = env.state if env is not None else state
    snap = env.snapshot() if env is not None else None
    out = []
    try:
        for action in actions:
            if current.solved:
                break
            current = step(current, action, current.step_count + 2).next_state
            out.append(current)
    finally:
        if env is not None:
            env.restore(snap)
    return out


def _truth_kind(truth: SokobanState, pos: Position) -> str:
    return truth.cell(pos)


def correctness_flags(imagined: ImaginedState, truth: SokobanState) -> list[str]:
    flags = []
    if imagined.player is not None and imagined.player == truth.player:
        flags.append("player")
    unsolved = truth.targets - truth.boxes
    checks = []
    for b in imagined.boxes or ():
        checks.append(b in truth.boxes)
    for t in imagined.unsolved_targets or ():
        checks.append(t in unsolved)
    for pos, kind in imagined.cells:
        if kind in ("box", "box on target", "target"):
            checks.append(_truth_kind(truth, pos) == kind)
    if any(checks):
        flags.append("some_boxes_targets")
    if checks and all(checks):
        flags.append("all_boxes_targets")
    layout = [_truth_kind(truth, pos) == kind for pos, kind in imagined.cells if kind in ("wall", "floor")]
    if layout and all(layout):
        flags.append("walls_floors")
    return flags


_CORRECTNESS_POINTS = {"player": 0.1, "some_boxes_targets": 0.05, "all_boxes_targets": 0.1, "walls_floors": 0.05}


def score_correctness(imagined: ImaginedState | None, truth_final: SokobanState) -> float:
    if imagined is None:
        return 0.0
    total = sum(_CORRECTNESS_POINTS[f] for f in correctness_flags(imagined, truth_final))
    return min(round(total, 10), CORRECTNESS_CAP)


def progress_flags(start: SokobanState, truth_final: SokobanState) -> list[str]:
    if is_deadlocked(truth_final) and not truth_final.solved:
        return ["deadlocked"]
    flags = []
    if truth_final.solved:
        flags.append("solved")
    delta = box_distance(start) - box_distance(truth_final)
    if delta >= 2:
        flags.append("major_progress")
    elif delta == 1:
        flags.append("minor_progress")
    return flags


_PROGRESS_POINTS = {"solved": 0.7, "major_progress": 0.5, "minor_progress": 0.2, "deadlocked": 0.0}


def score_progress(start: SokobanState, truth_final: SokobanState) -> float:
    total = sum(_PROGRESS_POINTS[f] for f in progress_flags(start, truth_final))
    return min(round(total, 10), PROGRESS_CAP)


@dataclass(frozen=True)
class SimScoreReport:
    correctness: float
    progress: float
    total: float
    rubric_flags: tuple[str, ...] = ()
    task_id: str = ""
    turn: int = 0

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "turn": self.turn,
            "correctness": self.correctness,
            "progress": self.progress,
            "total": self.total,
            "flags": list(self.rubric_flags),
        }


def score_turn(state: SokobanState, response_text: str, extractor=None, task_id: str = "", turn: int = 0) -> SimScoreReport:
    try:
        sim = extract_simulation(response_text, extractor)
    except ExtractionError as exc:
        log.debug("extraction failed on %s turn %d: %s", task_id, turn, exc)
        return SimScoreReport(0.0, 0.0, 0.0, ("extraction_failed",), task_id, turn)
    truth = ground_truth_rollforward(state, sim.actions)
    final = truth[-1] if truth else state
    c_flags = correctness_flags(sim.final, final) if sim.final is not None else []
    p_flags = progress_flags(state, final)
    c = score_correctness(sim.final, final)
    p = score_progress(state, final)
    return SimScoreReport(c, p, c + p, tuple(c_flags + p_flags), task_id, turn)


@dataclass
class TrajectoryScore:
    task_id: str
    success: bool
    turns: list[SimScoreReport] = field(default_factory=list)

    @property
    def score(self) -> float:
        return float(np.mean([t.total for t in self.turns])) if self.turns else 0.0


def trajectory_sim_score(records, extractor=None) -> TrajectoryScore:
    """Mean per-turn total over a trajectory whose records carry states and raw text."""
    records = list(records)
    if not records:
        raise ValueError("empty trajectory")
    turns = [
        score_turn(r.state, r.raw_text, extractor, r.task_id, r.turn_index) for r in records
    ]
    return TrajectoryScore(records[0].task_id, bool(records[-1].success), turns)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average-tie ranks."""
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("need two equal-length sequences of length >= 2")
    rx, ry = rankdata(x), rankdata(y)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        raise ValueError("rank correlation is undefined for a constant sequence")
    return float(np.corrcoef(rx, ry)[0, 1])


# --- outputs --------------------------------------------------------------

def summarize(method: str, scores: Iterable[TrajectoryScore]) -> dict:
    scores = list(scores)
    success = [float(s.success) for s in scores]
    sim = [s.score for s in scores]
    try:
        rho = spearman(success, sim)
    except ValueError:
        rho = None
    return {
        "method": method,
        "success_rate": float(np.mean(success)) if scores else 0.0,
        "mean_sim_score": float(np.mean(sim)) if scores else 0.0,
        "spearman": rho,
    }


def write_summary_csv(path: str | Path, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "success_rate", "mean_sim_score", "spearman"], lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})

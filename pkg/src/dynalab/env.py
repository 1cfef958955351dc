"""Deterministic Sokoban MDP: state, push mechanics, text rendering, generation."""

from __future__ import annotations

import random
import re
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from typing import Iterable, NamedTuple

STEP_REWARD = -0.1
SUCCESS_REWARD = 10.0
FAILURE_REWARD = 0.0

DEFAULT_T_MAX = {(6, 6): 20, (8, 8): 30}


class Position(NamedTuple):
    row: int
    col: int

    def __str__(self) -> str:
        return f"({self.row}, {self.col})"


class Action(str, Enum):
    UP = "up"
    DOWN = "down"
    LEFT = "left"
    RIGHT = "right"

    @property
    def index(self) -> int:
        return _ACTION_INDEX[self]

    @property
    def delta(self) -> tuple[int, int]:
        return _DELTAS[self]

    def __lt__(self, other: "Action") -> bool:
        if not isinstance(other, Action):
            return NotImplemented
        return self.index < other.index

    @classmethod
    def parse(cls, name: str) -> "Action":
        try:
            return cls(name.strip().strip('"').strip("'").lower())
        except ValueError:
            raise ValueError(f"unknown action {name!r}") from None


ACTIONS: tuple[Action, ...] = (Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT)
_ACTION_INDEX = {a: i for i, a in enumerate(ACTIONS)}
_DELTAS = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
}
_DIRECTION_WORDS = {
    Action.UP: "above",
    Action.DOWN: "below",
    Action.LEFT: "left of",
    Action.RIGHT: "right of",
}


class GenerationError(ValueError):
    """Raised when instance parameters cannot produce a valid room."""


@dataclass(frozen=True)
class SokobanState:
    width: int
    height: int
    walls: frozenset[Position]
    player: Position
    boxes: frozenset[Position]
    targets: frozenset[Position]
    step_count: int = 0

    def __post_init__(self) -> None:
        if self.player in self.walls or self.player in self.boxes:
            raise ValueError(f"player at {self.player} overlaps a wall or box")
        if self.boxes & self.walls:
            raise ValueError("box placed on a wall")
        if len(self.boxes) != len(self.targets):
            raise ValueError("number of boxes and targets differ")
        for r in range(self.height):
            for c in range(self.width):
                border = r in (0, self.height - 1) or c in (0, self.width - 1)
                if border and (r, c) not in self.walls:
                    raise ValueError(f"border cell ({r}, {c}) is not a wall")

    @property
    def solved(self) -> bool:
        return self.boxes == self.targets

    def cell(self, pos: tuple[int, int]) -> str:
        """Name of what occupies ``pos``: wall, box, box on target, target, floor."""
        if pos in self.walls:
            return "wall"
        if pos in self.boxes:
            return "box on target" if pos in self.targets else "box"
        if pos in self.targets:
            return "target"
        return "floor"


@dataclass(frozen=True)
class StepOutcome:
    next_state: SokobanState
    reward: float
    done: bool
    success: bool


@dataclass(frozen=True)
class TaskInstance:
    task_id: str
    initial_state: SokobanState
    t_max: int
    split: str = "train"
    seed: int | None = None


def _advance(state: SokobanState, player: Position, boxes: frozenset[Position]) -> SokobanState:
    # push mechanics preserve every invariant, so skip __post_init__ on the hot path
    nxt = object.__new__(SokobanState)
    for name in ("width", "height", "walls", "targets"):
        object.__setattr__(nxt, name, getattr(state, name))
    object.__setattr__(nxt, "player", player)
    object.__setattr__(nxt, "boxes", boxes)
    object.__setattr__(nxt, "step_count", state.step_count + 1)
    return nxt


def step(state: SokobanState, action: Action | None, t_max: int) -> StepOutcome:
    """One transition; ``action=None`` is a stay-in-place no-op (unparseable response)."""
    dr, dc = action.delta if action is not None else (0, 0)
    pr, pc = state.player
    target = Position(pr + dr, pc + dc)
    boxes = state.boxes
    player = state.player
    if action is not None and target not in state.walls:
        if target in boxes:
            beyond = Position(target.row + dr, target.col + dc)
            if beyond not in state.walls and beyond not in boxes:
                boxes = (boxes - {target}) | {beyond}
                player = target
        else:
            player = target
    nxt = _advance(state, player, boxes)
    if nxt.solved:
        return StepOutcome(nxt, SUCCESS_REWARD, True, True)
    if nxt.step_count >= t_max:
        return StepOutcome(nxt, FAILURE_REWARD, True, False)
    return StepOutcome(nxt, STEP_REWARD, False, False)


def snapshot(state: SokobanState) -> SokobanState:
    return replace(state)


def restore(snap: SokobanState) -> SokobanState:
    return replace(snap)


class SokobanEnv:
    """Mutable wrapper holding the live state of one episode."""

    def __init__(self, instance: TaskInstance):
        self.instance = instance
        self.t_max = instance.t_max
        self.state = instance.initial_state
        self.done = False
        self.success = False

    def step(self, action: Action) -> StepOutcome:
        if self.done:
            raise RuntimeError("episode already finished")
        outcome = step(self.state, action, self.t_max)
        self.state = outcome.next_state
        self.done = outcome.done
        self.success = outcome.success
        return outcome

    def snapshot(self) -> tuple[SokobanState, bool, bool]:
        return snapshot(self.state), self.done, self.success

    def restore(self, snap: tuple[SokobanState, bool, bool]) -> None:
        state, self.done, self.success = snap
        self.state = restore(state)


def is_deadlocked(state: SokobanState) -> bool:
    """Corner check: an off-target box with walls on two orthogonal sides."""
    walls = state.walls
    for r, c in state.boxes - state.targets:
        vertical = (r - 1, c) in walls or (r + 1, c) in walls
        horizontal = (r, c - 1) in walls or (r, c + 1) in walls
        if vertical and horizontal:
            return True
    return False


# --- rendering -------------------------------------------------------------

def _glyph(state: SokobanState, pos: Position) -> str:
    if pos in state.walls:
        return "#"
    on_target = pos in state.targets
    if pos == state.player:
        return "S" if on_target else "P"
    if pos in state.boxes:
        return "√" if on_target else "X"
    return "O" if on_target else "_"


def render_grid(state: SokobanState) -> str:
    return _render_grid(state.width, state.height, state.walls, state.player, state.boxes, state.targets)


@lru_cache(maxsize=200_000)
def _render_grid(width, height, walls, player, boxes, targets) -> str:
    state = SokobanState(width, height, walls, player, boxes, targets)
    lines = ["    " + "    ".join(f"Col {c}" for c in range(state.width))]
    for r in range(state.height):
        glyphs = [_glyph(state, Position(r, c)) for c in range(state.width)]
        lines.append(f"Row {r}    " + "     ".join(glyphs) + "    ")
    return "\n".join(lines)


def _positions(cells: Iterable[Position]) -> str:
    return ", ".join(str(p) for p in sorted(cells))


def describe_positions(state: SokobanState) -> str:
    unsolved = state.targets - state.boxes
    boxes = _positions(state.boxes) if state.boxes else "none"
    targets = _positions(unsolved) if unsolved else "none"
    return (
        f"Currently, the player is at {state.player}; boxes are at {boxes}; "
        f"unsolved targets are at {targets}."
    )


def describe_neighbors(state: SokobanState) -> str:
    parts = []
    for action in ACTIONS:
        dr, dc = action.delta
        pos = Position(state.player.row + dr, state.player.col + dc)
        parts.append(f"a {state.cell(pos)} {_DIRECTION_WORDS[action]} the player at {pos}")
    return "Next to the player, there is " + ", ".join(parts) + "."


def render_text(state: SokobanState) -> str:
    return _render_text(state.width, state.height, state.walls, state.player, state.boxes, state.targets)


@lru_cache(maxsize=200_000)
def _render_text(width, height, walls, player, boxes, targets) -> str:
    state = SokobanState(width, height, walls, player, boxes, targets)
    return "\n".join(
        [render_grid(state), "", describe_positions(state), describe_neighbors(state)]
    )


def state_key(state: SokobanState) -> str:
    """Grid-only key; identical layouts at different step counts share it."""
    return render_grid(state)


_ROW_RE = re.compile(r"^Row (\d+)    (.*)$")


def parse_grid(text: str, step_count: int = 0) -> SokobanState:
    """Inverse of :func:`render_grid`; trailing description lines are ignored."""
    rows: dict[int, list[str]] = {}
    for line in text.splitlines():
        m = _ROW_RE.match(line)
        if m:
            rows[int(m.group(1))] = m.group(2).split()
    if not rows:
        raise ValueError("no grid rows found")
    height = max(rows) + 1
    width = len(rows[0])
    walls, boxes, targets = set(), set(), set()
    player = None
    for r in range(height):
        if len(rows.get(r, ())) != width:
            raise ValueError(f"row {r} is missing or ragged")
        for c, g in enumerate(rows[r]):
            pos = Position(r, c)
            if g == "#":
                walls.add(pos)
            elif g in ("P", "S"):
                player = pos
            elif g in ("X", "√"):
                boxes.add(pos)
            if g in ("O", "S", "√"):
                targets.add(pos)
            if g not in "#_PSX√O":
                raise ValueError(f"unknown glyph {g!r} at {pos}")
    if player is None:
        raise ValueError("grid has no player")
    return SokobanState(
        width=width,
        height=height,
        walls=frozenset(walls),
        player=player,
        boxes=frozenset(boxes),
        targets=frozenset(targets),
        step_count=step_count,
    )


# --- generation ------------------------------------------------------------

def box_distance(state: SokobanState) -> int:
    """Sum over boxes of the Manhattan distance to the nearest target."""
    return sum(
        min(abs(b.row - t.row) + abs(b.col - t.col) for t in state.targets)
        for b in state.boxes
    )


def default_t_max(width: int, height: int) -> int:
    return DEFAULT_T_MAX.get((width, height), 2 * (width + height) + 6)


def _connected(cells: set[Position]) -> bool:
    if not cells:
        return False
    start = next(iter(cells))
    seen = {start}
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        for dr, dc in _DELTAS.values():
            n = Position(r + dr, c + dc)
            if n in cells and n not in seen:
                seen.add(n)
                queue.append(n)
    return len(seen) == len(cells)


def _carve_room(rng: random.Random, width: int, height: int) -> tuple[frozenset[Position], list[Position]]:
    border = {
        Position(r, c)
        for r in range(height)
        for c in range(width)
        if r in (0, height - 1) or c in (0, width - 1)
    }
    floor = {
        Position(r, c) for r in range(1, height - 1) for c in range(1, width - 1)
    }
    n_inner_walls = rng.randint(0, len(floor) // 5)
    candidates = sorted(floor)
    rng.shuffle(candidates)
    inner = set()
    for pos in candidates[:n_inner_walls]:
        if _connected(floor - inner - {pos}):
            inner.add(pos)
    return frozenset(border | inner), sorted(floor - inner)


def _reverse_moves(rng: random.Random, state: SokobanState, n_pulls: int, max_moves: int) -> SokobanState:
    """Random walk under pull rules until ``n_pulls`` box pulls or ``max_moves`` moves.

    Every move is undone by a legal forward move, so the result stays solvable
    and its optimal plan is no longer than the number of moves made.
    """
    player, boxes = state.player, set(state.boxes)
    pulls = moves = 0
    for _ in range(50 * n_pulls):
        if pulls >= n_pulls or moves >= max_moves:
            break
        action = rng.choice(ACTIONS)
        dr, dc = action.delta
        dest = Position(player.row + dr, player.col + dc)
        if dest in state.walls or dest in boxes:
            continue
        behind = Position(player.row - dr, player.col - dc)
        if behind in boxes and rng.random() < 0.8:
            boxes.remove(behind)
            boxes.add(player)
            pulls += 1
        player = dest
        moves += 1
    return replace(state, player=player, boxes=frozenset(boxes))


def generate_instance(
    seed: int,
    width: int,
    height: int,
    n_boxes: int,
    t_max: int | None = None,
    split: str = "train",
    task_id: str | None = None,
) -> TaskInstance:
    """Solvable instance by reverse play from a solved configuration."""
    if width < 4 or height < 4:
        raise GenerationError("width and height must be at least 4")
    if n_boxes < 1:
        raise GenerationError("need at least one box")
    if (width - 2) * (height - 2) < n_boxes + 2:
        raise GenerationError("interior too small for boxes, targets and player")
    rng = random.Random(f"sokoban:{seed}:{width}x{height}:{n_boxes}")
    n_pulls = 2 * width
    max_moves = 2 * (width + height)
    for _ in range(1000):
        walls, floor = _carve_room(rng, width, height)
        if len(floor) < n_boxes + 2:
            continue
        cells = rng.sample(floor, n_boxes + 1)
        targets = frozenset(cells[:n_boxes])
        solved = SokobanState(
            width=width,
            height=height,
            walls=walls,
            player=cells[-1],
            boxes=targets,
            targets=targets,
        )
        state = _reverse_moves(rng, solved, n_pulls, max_moves)
        if box_distance(state) >= 2 and not is_deadlocked(state):
            return TaskInstance(
                task_id=task_id or f"{split}-{width}x{height}-{seed}",
                initial_state=state,
                t_max=t_max if t_max is not None else default_t_max(width, height),
                split=split,
                seed=seed,
            )
    raise GenerationError(f"could not generate an unsolved instance for seed {seed}")


def worked_example_state() -> SokobanState:
    """The 6x6 worked example: player (2, 2), box (3, 2), target (4, 3)."""
    return parse_grid(
        "\n".join(
            [
                "Row 0    #     #     #     #     #     #    ",
                "Row 1    #     _     _     #     #     #    ",
                "Row 2    #     _     P     #     #     #    ",
                "Row 3    #     _     X     _     _     #    ",
                "Row 4    #     _     _     O     _     #    ",
                "Row 5    #     #     #     #     #     #    ",
            ]
        )
    )


def instance_to_json(instance: TaskInstance) -> dict:
    return {
        "task_id": instance.task_id,
        "split": instance.split,
        "seed": instance.seed,
        "t_max": instance.t_max,
        "grid": render_grid(instance.initial_state),
    }


def instance_from_json(data: dict) -> TaskInstance:
    return TaskInstance(
        task_id=data["task_id"],
        initial_state=parse_grid(data["grid"]),
        t_max=data["t_max"],
        split=data.get("split", "train"),
        seed=data.get("seed"),
    )

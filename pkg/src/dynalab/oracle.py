"""Breadth-first Sokoban solver used as ground truth and as a scripted policy."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import lru_cache

from .env import ACTIONS, Action, Position, SokobanState, step

DEFAULT_CAPACITY = 1_000_000


class CapacityError(RuntimeError):
    """The reachable configuration count exceeded the configured cap."""


class UnsolvableError(ValueError):
    pass


@dataclass(frozen=True)
class SolveResult:
    solvable: bool
    plan: tuple[Action, ...]
    optimal_length: int


def _key(player: Position, boxes: frozenset[Position]) -> tuple:
    return (player, tuple(sorted(boxes)))


@lru_cache(maxsize=100_000)
def _solve_cached(walls, player, boxes, targets, capacity):
    start = _key(player, boxes)
    if boxes == targets:
        return SolveResult(True, (), 0)
    parents: dict[tuple, tuple[tuple, Action] | None] = {start: None}
    queue = deque([(player, boxes)])
    while queue:
        p, bx = queue.popleft()
        here = _key(p, bx)
        for action in ACTIONS:
            dr, dc = action.delta
            nxt = Position(p.row + dr, p.col + dc)
            if nxt in walls:
                continue
            nb = bx
            if nxt in bx:
                beyond = Position(nxt.row + dr, nxt.col + dc)
                if beyond in walls or beyond in bx:
                    continue
                nb = (bx - {nxt}) | {beyond}
            key = _key(nxt, nb)
            if key in parents:
                continue
            parents[key] = (here, action)
            if nb == targets:
                plan = []
                cur = key
                while parents[cur] is not None:
                    cur, a = parents[cur]
                    plan.append(a)
                plan.reverse()
                return SolveResult(True, tuple(plan), len(plan))
            if len(parents) > capacity:
                raise CapacityError(f"more than {capacity} configurations explored")
            queue.append((nxt, nb))
    return SolveResult(False, (), 0)


def bfs_solve(state: SokobanState, capacity: int = DEFAULT_CAPACITY) -> SolveResult:
    """Shortest plan from ``state``; ties resolved by up < down < left < right."""
    return _solve_cached(state.walls, state.player, state.boxes, state.targets, capacity)


def replay(state: SokobanState, plan, t_max: int | None = None):
    """Apply ``plan`` ignoring episode caps; returns the visited states."""
    states = []
    cap = t_max if t_max is not None else state.step_count + len(plan) + 1
    for action in plan:
        state = step(state, action, cap).next_state
        states.append(state)
    return states


def oracle_plan(state: SokobanState, depth: int | None = None) -> tuple[Action, ...]:
    result = bfs_solve(state)
    if not result.solvable:
        raise UnsolvableError("state has no solution")
    return result.plan if depth is None else result.plan[:depth]


def oracle_policy(state: SokobanState, depth: int | None = None, noop_on_solved: bool = False):
    """Response whose plan is the optimal plan (optionally truncated to ``depth``).

    On an already-solved state this raises unless ``noop_on_solved`` is set, in
    which case it returns a move into an adjacent wall.
    """
    from .responses import make_response

    if state.solved:
        if not noop_on_solved:
            raise ValueError("state is already solved")
        for action in ACTIONS:
            dr, dc = action.delta
            if (state.player.row + dr, state.player.col + dc) in state.walls:
                break
        return make_response("The puzzle is already solved.", (action,))
    plan = oracle_plan(state, depth)
    think = f"The player is at {state.player}. The shortest solution has {bfs_solve(state).optimal_length} moves."
    return make_response(think, plan)

"""Agent policies: observation assembly and a tabular softmax policy with exact gradients."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .env import ACTIONS, Action, SokobanState, TaskInstance, render_text, state_key, step
from .responses import Response, format_response, make_response

TASK_INSTRUCTION = (
    "You are solving a Sokoban puzzle. Push every box onto a target. "
    "The player moves one cell per action and can push, but never pull, a single box. "
    "Walls are #, floor _, the player P (S when standing on a target), boxes X "
    "(√ when on a target) and targets O."
)

RESPONSE_FORMAT = (
    "Reason about the current situation inside <think> </think> tags. "
    "Then give a plan as a comma-separated list of admissible actions inside "
    "<plan> </plan> tags (e.g., <plan>up, right, up</plan>) and the action for "
    "this step inside <action> </action> tags (e.g., <action>up</action>)."
)

DEFAULT_HISTORY = 2


@dataclass(frozen=True)
class Observation:
    task_instruction: str
    history: tuple[tuple[str, str], ...]
    current_rendering: str
    admissible_actions: tuple[str, ...] = tuple(a.value for a in ACTIONS)
    # live state for scripted policies; never part of the prompt
    state: SokobanState | None = field(default=None, compare=False, repr=False)
    t_max: int | None = field(default=None, compare=False, repr=False)

    @property
    def key(self) -> str:
        if self.state is not None:
            return state_key(self.state)
        return self.current_rendering.split("\n\n", 1)[0]

    @property
    def text(self) -> str:
        parts = [self.task_instruction, ""]
        if self.history:
            parts.append("# Previous Steps")
            for i, (rendering, response) in enumerate(self.history, 1):
                parts += [f"## Step -{len(self.history) - i + 1}", rendering, "Response:", response, ""]
        actions = ", ".join(f'"{a}"' for a in self.admissible_actions)
        parts += [
            "# Current Step",
            "Your current observation is:",
            self.current_rendering,
            f"Your admissible actions are [{actions}].",
            "",
            "Now it's your turn to make a move (choose ONE action only for the current step).",
            RESPONSE_FORMAT,
        ]
        return "\n".join(parts)


def build_observation(
    instance: TaskInstance,
    trajectory_so_far: Sequence[tuple[SokobanState, str]] = (),
    h: int = DEFAULT_HISTORY,
    current: SokobanState | None = None,
) -> Observation:
    """Prompt for the current turn with at most ``h`` earlier (state, response) turns.

    ``trajectory_so_far`` lists past turns in order; ``current`` defaults to the
    instance's initial state.
    """
    if h < 0:
        raise ValueError("history window must be non-negative")
    window = list(trajectory_so_far)[-h:] if h else []
    state = instance.initial_state if current is None else current
    return Observation(
        task_instruction=TASK_INSTRUCTION,
        history=tuple((render_text(s), text) for s, text in window),
        current_rendering=render_text(state),
        state=state,
        t_max=instance.t_max,
    )


class Policy(Protocol):
    def act(self, observation: Observation, rng: random.Random) -> Response: ...


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=float) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _sample(probs: np.ndarray, rng: random.Random) -> int:
    u = rng.random()
    acc = 0.0
    for i, p in enumerate(probs):
        acc += p
        if u < acc:
            return i
    return len(probs) - 1


class TabularPolicy:
    """Softmax over four logits per state key; unseen keys read as all-zero logits."""

    def __init__(self, table: dict[str, np.ndarray] | None = None, temperature: float = 1.0, plan_depth: int = 5):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.table: dict[str, np.ndarray] = {} if table is None else table
        self.temperature = temperature
        self.plan_depth = plan_depth

    def logits(self, key: str) -> np.ndarray:
        row = self.table.get(key)
        return np.zeros(len(ACTIONS)) if row is None else row

    def probs(self, key: str) -> np.ndarray:
        return softmax(self.logits(key), self.temperature)

    def logprob(self, key: str, action: Action) -> float:
        z = self.logits(key) / self.temperature
        m = z.max()
        return float(z[action.index] - m - math.log(np.exp(z - m).sum()))

    def logprob_and_grad(self, key: str, action: Action) -> tuple[float, dict[str, np.ndarray]]:
        """log pi(a|key) and its gradient with respect to the logits of that row."""
        p = self.probs(key)
        grad = -p
        grad[action.index] += 1.0
        return float(math.log(p[action.index])), {key: grad / self.temperature}

    def greedy(self, key: str) -> Action:
        return ACTIONS[int(np.argmax(self.logits(key)))]

    def sample(self, key: str, rng: random.Random) -> tuple[Action, float]:
        p = self.probs(key)
        i = _sample(p, rng)
        return ACTIONS[i], float(math.log(p[i]))

    def greedy_plan(self, state: SokobanState, first: Action, t_max: int | None) -> tuple[Action, ...]:
        plan = [first]
        cap = t_max if t_max is not None else state.step_count + self.plan_depth + 1
        outcome = step(state, first, max(cap, state.step_count + 1))
        while len(plan) < self.plan_depth and not outcome.done:
            nxt = self.greedy(state_key(outcome.next_state))
            plan.append(nxt)
            outcome = step(outcome.next_state, nxt, cap)
        return tuple(plan)

    def act(self, observation: Observation, rng: random.Random) -> Response:
        return self.act_on_key(observation.key, observation.state, observation.t_max, rng)

    def act_on_key(self, key: str, state: SokobanState | None, t_max: int | None, rng: random.Random) -> Response:
        action, logp = self.sample(key, rng)
        if state is not None and self.plan_depth > 1:
            plan = self.greedy_plan(state, action, t_max)
        else:
            plan = (action,)
        think = f'Sampling "{action.value}" from the learned table and following the greedy continuation.'
        return Response(
            think=think,
            plan=plan,
            action=action,
            raw_text=format_response(think, plan, action),
            logprob=logp,
        )

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(
            {k: v.copy() for k, v in self.table.items()}, self.temperature, self.plan_depth
        )

    def apply_gradient(self, grads: dict[str, np.ndarray], learning_rate: float) -> None:
        """Gradient ascent step on the touched rows."""
        if learning_rate == 0:
            return
        for key, g in grads.items():
            row = self.table.get(key)
            if row is None:
                row = self.table[key] = np.zeros(len(ACTIONS))
            row += learning_rate * g

    def to_json(self) -> dict:
        return {
            "temperature": self.temperature,
            "plan_depth": self.plan_depth,
            "table": {k: [float(x) for x in v] for k, v in sorted(self.table.items())},
        }

    @classmethod
    def from_json(cls, data: dict) -> "TabularPolicy":
        table = {k: np.asarray(v, dtype=float) for k, v in data["table"].items()}
        return cls(table, data.get("temperature", 1.0), data.get("plan_depth", 5))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TabularPolicy":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def act_tabular(params: TabularPolicy, observation: Observation, rng_seed: int) -> Response:
    return params.act(observation, random.Random(rng_seed))


def logprob_and_grad(params: TabularPolicy, observation: Observation, action: Action):
    return params.logprob_and_grad(observation.key, action)


class OraclePolicy:
    """Plays the BFS-optimal plan from the true state carried by the observation.

    With ``epsilon > 0`` each step is replaced, with that probability, by a
    uniformly random one-action plan; useful for covering states near the
    optimal path when fitting value tables.
    """

    def __init__(self, depth: int | None = None, epsilon: float = 0.0):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        self.depth = depth
        self.epsilon = epsilon

    def act(self, observation: Observation, rng: random.Random | None = None) -> Response:
        from .oracle import UnsolvableError, oracle_policy

        if observation.state is None:
            raise ValueError("oracle policy needs the live state")
        explore = bool(self.epsilon) and rng is not None and rng.random() < self.epsilon
        if not explore:
            try:
                return oracle_policy(observation.state, depth=self.depth)
            except UnsolvableError:
                if not self.epsilon:
                    raise
        # exploring, or an earlier random move already made the puzzle unsolvable
        rng = rng or random.Random(0)
        return make_response("Exploring a random move.", (ACTIONS[rng.randrange(len(ACTIONS))],))

    def refine(self, context, rng: random.Random | None = None) -> Response:
        """Refinement ignores the feedback: the oracle already plays optimally."""
        return self.act(context.base_observation, rng)

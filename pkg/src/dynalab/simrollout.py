"""Refine-with-real-futures rollouts.

At each step the policy answers normally, its plan is replayed on a copy of
the environment to collect what really happens, and the policy is asked again
with that feedback in view.  The refined answer is what gets executed.  Every
step therefore yields two records sharing one response and one reward: one
keyed by the plain observation and one keyed by the refinement prompt.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field

from .env import SokobanEnv, SokobanState, TaskInstance, render_text, state_key
from .oracle import oracle_policy
from .policy import DEFAULT_HISTORY, Observation, TabularPolicy, build_observation
from .responses import ParseError, Response
from .trajectory import Episode, TrajectoryRecord

log = logging.getLogger(__name__)

REFINE_INSTRUCTIONS = (
    "The environment is back at the current observation. Compare the example response with the "
    "ground truth feedback above. Check whether its predicted outcomes match what really happened "
    "and whether the executed moves brought the boxes closer to the targets. If the example response "
    "is accurate and makes progress, repeat it unchanged. Otherwise rewrite its reasoning, plan and "
    "action so that they agree with the feedback and make better progress. Write the result as a "
    "standalone answer in the same format, without mentioning the feedback."
)


@dataclass(frozen=True)
class RefinementContext:
    base_observation: Observation
    original_response: Response
    # (action, rendering of the true state after it), in plan order
    feedback: tuple[tuple[str, str], ...]
    composed_prompt: str
    state: SokobanState | None = field(default=None, compare=False, repr=False)

    @property
    def refine_key(self) -> str:
        """Lookup key for tabular refiners: plain key plus the original action."""
        return f"{self.base_observation.key}\nrefine:{self.original_response.action.value}"


def compose_prompt(observation: Observation, response: Response, feedback) -> str:
    lines = [
        observation.task_instruction,
        "",
        "# Current observation",
        observation.current_rendering,
        "",
        "# Example response and feedback",
        "Some plans for the current step were tried in the environment. This is what happened:",
        "## Example response",
        response.raw_text,
        "## Ground truth feedback",
    ]
    if feedback:
        for i, (action, rendering) in enumerate(feedback, 1):
            lines += [f'After action {i} ("{action}"):', rendering]
    else:
        lines.append("No actions were executed.")
    lines += ["", "# Back to the current step", REFINE_INSTRUCTIONS]
    return "\n".join(lines)


def harvest_feedback(
    env: SokobanEnv,
    observation: Observation,
    response: Response,
    refine_depth: int,
) -> RefinementContext:
    """Replay up to ``refine_depth`` plan actions on ``env`` and put it back exactly."""
    if refine_depth < 0:
        raise ValueError("refine_depth must be non-negative")
    snap = env.snapshot()
    feedback = []
    try:
        for action in response.plan[:refine_depth]:
            outcome = env.step(action)
            feedback.append((action.value, render_text(outcome.next_state)))
            if outcome.done:
                break
    finally:
        env.restore(snap)
    feedback = tuple(feedback)
    return RefinementContext(
        observation, response, feedback, compose_prompt(observation, response, feedback), env.state
    )


class OracleRefiner:
    """Test refiner: answers with the optimal plan from the true current state."""

    def refine(self, context: RefinementContext, rng: random.Random | None = None) -> Response:
        return oracle_policy(context.state)


def refine(policy, context: RefinementContext, rng: random.Random) -> Response:
    """One policy call on the refinement prompt.

    Tabular policies sample from the row of ``context.refine_key``; anything
    with a ``refine`` method handles the prompt itself.  ParseError propagates.
    """
    if isinstance(policy, TabularPolicy):
        obs = context.base_observation
        return policy.act_on_key(context.refine_key, context.state, obs.t_max, rng)
    if hasattr(policy, "refine"):
        return policy.refine(context, rng)
    raise TypeError(f"{type(policy).__name__} cannot refine")


@dataclass
class PairedStep:
    plain_record: TrajectoryRecord
    refine_record: TrajectoryRecord
    context: RefinementContext | None = None


@dataclass
class SimRolloutResult:
    plain: list[TrajectoryRecord]
    refined: list[TrajectoryRecord]
    success: bool
    final_state: SokobanState
    steps: list[PairedStep]

    def plain_episode(self) -> Episode:
        return Episode(self.plain[0].task_id, self.plain, self.success, self.final_state)

    def refine_episode(self) -> Episode:
        return Episode(self.refined[0].task_id, self.refined, self.success, self.final_state)


def sim_rollout_episode(
    instance: TaskInstance,
    policy,
    refine_depth: int,
    rng: random.Random,
    refiner=None,
    h: int = DEFAULT_HISTORY,
) -> SimRolloutResult:
    """Sample, harvest real futures, refine, execute; until success or the step cap.

    ``refiner`` defaults to ``policy``.  With ``refine_depth=0`` the refiner
    sees no feedback, so the loop is an ordinary rollout with a resampled answer.
    """
    refiner = policy if refiner is None else refiner
    env = SokobanEnv(instance)
    history: list[tuple[SokobanState, str]] = []
    plain: list[TrajectoryRecord] = []
    refined: list[TrajectoryRecord] = []
    steps: list[PairedStep] = []
    while True:
        state = env.state
        obs = build_observation(instance, history, h, current=state)
        context = None
        try:
            original = policy.act(obs, rng)
        except ParseError as exc:
            log.debug("unparseable response on %s turn %d: %s", instance.task_id, len(plain), exc)
            original = None
        if original is None:
            response = None
        else:
            context = harvest_feedback(env, obs, original, refine_depth)
            try:
                response = refine(refiner, context, rng)
            except ParseError:
                response = original
        outcome = env.step(None if response is None else response.action)
        raw = "" if response is None else response.raw_text
        common = dict(
            task_id=instance.task_id,
            turn_index=len(plain),
            response=response,
            reward=outcome.reward,
            done=outcome.done,
            success=outcome.success,
            state=state,
            raw_text=raw,
            logprob=None if response is None else response.logprob,
        )
        p_rec = TrajectoryRecord(observation_key=obs.key, kind="plain", **common)
        r_key = context.refine_key if context is not None else state_key(state)
        r_rec = TrajectoryRecord(observation_key=r_key, kind="refine", **common)
        plain.append(p_rec)
        refined.append(r_rec)
        steps.append(PairedStep(p_rec, r_rec, context))
        if h:
            history.append((state, raw))
        if outcome.done:
            return SimRolloutResult(plain, refined, outcome.success, outcome.next_state, steps)

"""Group-relative policy optimisation for the tabular policy, plus the
simulate-then-improve schedule that interleaves refinement rollouts.

Advantages are computed per episode and broadcast to every step of that
episode.  The objective per batch is the mean over trajectories of the
per-step mean of ``min(rho*A, clip(rho)*A) - beta*kl``, with ``rho`` taken
against the parameters that generated the batch and the KL against a copy of
the parameters frozen when training started.
"""

from __future__ import annotations

import json
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import Action, TaskInstance
from .policy import TabularPolicy
from .simrollout import sim_rollout_episode
from .trajectory import TrajectoryRecord, episode_return, run_episode, write_jsonl

log = logging.getLogger(__name__)

STD_GUARD = 1e-8
METHODS = ("grpo", "rloo", "dyna")


class ConfigError(ValueError):
    pass


# --- advantage algebra ----------------------------------------------------

def advantage_grpo(returns: Sequence[float]) -> list[float]:
    """(r - mean) / population std; all zeros when the group has no spread."""
    r = np.asarray(returns, dtype=float)
    if r.size < 2:
        raise ValueError("a group needs at least two returns")
    std = r.std()
    if std < STD_GUARD:
        log.debug("zero-variance group of %d, advantages set to 0", r.size)
        return [0.0] * r.size
    return ((r - r.mean()) / std).tolist()


def advantage_rloo(returns: Sequence[float]) -> list[float]:
    r = np.asarray(returns, dtype=float)
    n = r.size
    if n < 2:
        raise ValueError("a group needs at least two returns")
    return (r - (r.sum() - r) / (n - 1)).tolist()


def advantage_refine(
    refine_returns: Sequence[float],
    refine_success_flags: Sequence[bool],
    mean_plain: float,
    mean_refine: float,
) -> list[float]:
    """1 for a refined episode that succeeded and strictly beat both group means."""
    bar = max(mean_plain, mean_refine)
    return [1.0 if ok and r > bar else 0.0 for r, ok in zip(refine_returns, refine_success_flags, strict=True)]


@dataclass
class AdvantageGroup:
    trajectories: list[list[TrajectoryRecord]]
    advantages: list[float]
    method: str

    def __post_init__(self) -> None:
        if len(self.trajectories) != len(self.advantages):
            raise ValueError("one advantage per trajectory")

    @property
    def returns(self) -> list[float]:
        return [episode_return(t) for t in self.trajectories]


def make_group(trajectories: list[list[TrajectoryRecord]], method: str) -> AdvantageGroup:
    returns = [episode_return(t) for t in trajectories]
    adv = advantage_rloo(returns) if method == "rloo" else advantage_grpo(returns)
    return AdvantageGroup(trajectories, adv, method)


# --- surrogate ------------------------------------------------------------

def surrogate_objective(ratio: float, advantage: float, epsilon: float, kl: float, beta: float) -> float:
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * advantage, clipped * advantage) - beta * kl


def kl_estimate(logp_new: float, logp_ref: float) -> float:
    """Per-sample KL(new || ref) estimate r - log r - 1 with r = p_ref / p_new; never negative."""
    log_r = logp_ref - logp_new
    return max(math.expm1(log_r) - log_r, 0.0)


@dataclass(frozen=True)
class Sample:
    key: str
    action: Action
    advantage: float
    old_logprob: float
    weight: float


def build_samples(groups: Sequence[AdvantageGroup], behaviour: TabularPolicy) -> list[Sample]:
    """One sample per executed action; each trajectory carries total weight 1/n_trajectories."""
    trajs = [(t, a) for g in groups for t, a in zip(g.trajectories, g.advantages)]
    out = []
    for records, adv in trajs:
        acted = [r for r in records if r.action is not None]
        for r in acted:
            out.append(
                Sample(r.observation_key, r.action, adv, behaviour.logprob(r.observation_key, r.action),
                       1.0 / (len(acted) * len(trajs)))
            )
    return out


def surrogate_value(policy: TabularPolicy, reference: TabularPolicy, samples: Sequence[Sample],
                    epsilon: float, beta: float) -> float:
    total = 0.0
    for s in samples:
        lp = policy.logprob(s.key, s.action)
        ratio = math.exp(lp - s.old_logprob)
        kl = kl_estimate(lp, reference.logprob(s.key, s.action))
        total += s.weight * surrogate_objective(ratio, s.advantage, epsilon, kl, beta)
    return total


def surrogate_gradient(
    policy: TabularPolicy,
    reference: TabularPolicy,
    samples: Sequence[Sample],
    epsilon: float,
    beta: float,
) -> tuple[float, dict[str, np.ndarray], float]:
    """Objective value, its exact gradient by table row, and the mean KL estimate."""
    value = 0.0
    kl_sum = 0.0
    grads: dict[str, np.ndarray] = {}
    for s in samples:
        lp, g = policy.logprob_and_grad(s.key, s.action)
        (row_grad,) = g.values()
        ratio = math.exp(lp - s.old_logprob)
        lp_ref = reference.logprob(s.key, s.action)
        kl = kl_estimate(lp, lp_ref)
        kl_sum += kl
        value += s.weight * surrogate_objective(ratio, s.advantage, epsilon, kl, beta)
        A = s.advantage
        clip_binds = (A > 0 and ratio > 1 + epsilon) or (A < 0 and ratio < 1 - epsilon)
        coef = 0.0 if clip_binds else A * ratio
        # d/dlp of (r - log r - 1) with r = exp(lp_ref - lp) is 1 - r
        coef -= beta * (1.0 - math.exp(lp_ref - lp))
        if coef:
            acc = grads.setdefault(s.key, np.zeros_like(row_grad))
            acc += s.weight * coef * row_grad
    return value, grads, kl_sum / len(samples) if samples else 0.0


# --- configuration --------------------------------------------------------

@dataclass
class TrainConfig:
    method: str = "grpo"
    G: int = 8
    N: int = 15
    n_T: int = 10
    n_pi: int = 10
    steps: int = 300
    epsilon_clip: float = 0.2
    beta_kl: float = 0.01
    learning_rate: float = 20.0
    batch_tasks: int = 4
    seed: int = 1
    refine_depth: int = 5
    h: int = 0
    eval_episodes: int = 8
    checkpoint_every: int = 0

    def validate(self, n_tasks: int | None = None) -> "TrainConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.G < 2 or self.G % 2:
            raise ConfigError("G must be an even number >= 2")
        for name in ("N", "steps", "batch_tasks", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_T < 0 or self.n_pi < 0 or self.n_T + self.n_pi < 1:
            raise ConfigError("n_T and n_pi must be non-negative and not both zero")
        if self.epsilon_clip <= 0 or self.beta_kl < 0 or self.learning_rate < 0:
            raise ConfigError("epsilon_clip must be positive; beta_kl and learning_rate non-negative")
        if self.refine_depth < 0 or self.h < 0 or self.checkpoint_every < 0:
            raise ConfigError("refine_depth, h and checkpoint_every must be non-negative")
        if n_tasks is not None and self.batch_tasks > n_tasks:
            raise ConfigError(f"batch_tasks={self.batch_tasks} exceeds the {n_tasks} available tasks")
        return self

    @property
    def total_steps(self) -> int:
        return self.N * (self.n_T + self.n_pi) if self.method == "dyna" else self.steps

    def phase(self, step: int) -> str:
        """Phase of 0-based ``step``: each outer iteration is n_T sim steps then n_pi policy steps."""
        if self.method != "dyna":
            return "policy"
        return "sim" if step % (self.n_T + self.n_pi) < self.n_T else "policy"


# --- training loop --------------------------------------------------------

def evaluate(policy, tasks: Sequence[TaskInstance], episodes_per_task: int, seed, h: int = 0) -> float:
    wins = 0
    for task in tasks:
        for k in range(episodes_per_task):
            wins += run_episode(task, policy, random.Random(f"eval:{seed}:{task.task_id}:{k}"), h).success
    return wins / (len(tasks) * episodes_per_task)


@dataclass
class TrainResult:
    policy: TabularPolicy
    log: list[dict]
    initial_success: float
    final_success: float
    config: TrainConfig = field(repr=False, default=None)


def _update(policy, reference, groups, cfg) -> tuple[float, float]:
    samples = build_samples(groups, policy)
    _, grads, kl_mean = surrogate_gradient(policy, reference, samples, cfg.epsilon_clip, cfg.beta_kl)
    policy.apply_gradient(grads, cfg.learning_rate)
    adv = [a for g in groups for a in g.advantages]
    return float(np.mean(np.abs(adv))), kl_mean


def _policy_step(policy, reference, batch, cfg, step) -> dict:
    groups = []
    for task in batch:
        trajs = [
            run_episode(task, policy, random.Random(f"roll:{cfg.seed}:{step}:{task.task_id}:{g}"), cfg.h).records
            for g in range(cfg.G)
        ]
        groups.append(make_group(trajs, "rloo" if cfg.method == "rloo" else "grpo"))
    trajs = [t for g in groups for t in g.trajectories]
    adv_abs, kl_mean = _update(policy, reference, groups, cfg)
    return {
        "mean_return": float(np.mean([episode_return(t) for t in trajs])),
        "success_rate": float(np.mean([t[-1].success for t in trajs])),
        "mean_advantage_abs": adv_abs,
        "kl_mean": kl_mean,
        "refine_positive_fraction": None,
    }


def _sim_step(policy, reference, batch, cfg, step, refiner) -> dict:
    half = cfg.G // 2
    combined, refine_groups = [], []
    for task in batch:
        plain = [
            run_episode(task, policy, random.Random(f"roll:{cfg.seed}:{step}:{task.task_id}:{g}"), cfg.h).records
            for g in range(half)
        ]
        sims = [
            sim_rollout_episode(
                task, policy, cfg.refine_depth,
                random.Random(f"sim:{cfg.seed}:{step}:{task.task_id}:{g}"), refiner, cfg.h,
            )
            for g in range(half)
        ]
        combined.append(make_group(plain + [s.plain for s in sims], "grpo"))
        refine_returns = [episode_return(s.refined) for s in sims]
        adv = advantage_refine(
            refine_returns,
            [s.success for s in sims],
            float(np.mean([episode_return(t) for t in plain])),
            float(np.mean(refine_returns)),
        )
        refine_groups.append(AdvantageGroup([s.refined for s in sims], adv, "refine"))
    # combined-group update first, then the refine update on the updated table
    adv_abs, kl1 = _update(policy, reference, combined, cfg)
    _, kl2 = _update(policy, reference, refine_groups, cfg)
    trajs = [t for g in combined for t in g.trajectories]
    refine_adv = [a for g in refine_groups for a in g.advantages]
    return {
        "mean_return": float(np.mean([episode_return(t) for t in trajs])),
        "success_rate": float(np.mean([t[-1].success for t in trajs])),
        "mean_advantage_abs": adv_abs,
        "kl_mean": (kl1 + kl2) / 2,
        "refine_positive_fraction": float(np.mean(refine_adv)),
    }


CHECKPOINT_NAME = "checkpoint.json"
LOG_NAME = "train_log.jsonl"


def _save_checkpoint(out_dir: Path, step: int, policy, reference, initial_success) -> None:
    data = {
        "step": step,
        "initial_success": initial_success,
        "policy": policy.to_json(),
        "reference": reference.to_json(),
    }
    tmp = out_dir / (CHECKPOINT_NAME + ".tmp")
    tmp.write_text(json.dumps(data, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(out_dir / CHECKPOINT_NAME)


def train(
    policy: TabularPolicy,
    tasks: Sequence[TaskInstance],
    config: TrainConfig,
    refiner=None,
    out_dir: str | Path | None = None,
    resume: bool = False,
) -> TrainResult:
    """Run ``config.total_steps`` optimiser steps, mutating ``policy`` in place.

    With ``out_dir`` the per-step log is appended to ``train_log.jsonl`` and a
    checkpoint is written every ``checkpoint_every`` steps; ``resume`` picks up
    from that checkpoint and reproduces the uninterrupted run.
    """
    tasks = list(tasks)
    cfg = config.validate(len(tasks))
    out = Path(out_dir) if out_dir is not None else None
    rows: list[dict] = []
    start = 0
    if resume:
        if out is None or not (out / CHECKPOINT_NAME).exists():
            raise FileNotFoundError("resume requested but no checkpoint found")
        ck = json.loads((out / CHECKPOINT_NAME).read_text(encoding="utf-8"))
        loaded = TabularPolicy.from_json(ck["policy"])
        policy.table, policy.temperature, policy.plan_depth = loaded.table, loaded.temperature, loaded.plan_depth
        reference = TabularPolicy.from_json(ck["reference"])
        initial_success = ck["initial_success"]
        start = ck["step"]
        rows = [json.loads(line) for line in (out / LOG_NAME).read_text(encoding="utf-8").splitlines()][:start]
        (out / LOG_NAME).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    else:
        reference = policy.copy()
        initial_success = evaluate(policy, tasks, cfg.eval_episodes, cfg.seed, cfg.h)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / LOG_NAME).write_text("", encoding="utf-8")
    if cfg.phase(0) == "sim" and refiner is None:
        refiner = policy
    for step in range(start, cfg.total_steps):
        t0 = time.perf_counter()
        batch = random.Random(f"batch:{cfg.seed}:{step}").sample(tasks, cfg.batch_tasks)
        phase = cfg.phase(step)
        if phase == "sim":
            stats = _sim_step(policy, reference, batch, cfg, step, refiner)
        else:
            stats = _policy_step(policy, reference, batch, cfg, step)
        row = {"step": step + 1, "phase": phase, **stats, "wallclock_ms": (time.perf_counter() - t0) * 1000}
        rows.append(row)
        log.info("step %d %s return %.3f success %.3f", step + 1, phase, row["mean_return"], row["success_rate"])
        if out is not None:
            write_jsonl(out / LOG_NAME, [row], append=True)
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                _save_checkpoint(out, step + 1, policy, reference, initial_success)
    final_success = evaluate(policy, tasks, cfg.eval_episodes, cfg.seed, cfg.h)
    return TrainResult(policy, rows, initial_success, final_success, cfg)


def train_grpo(policy, tasks, config: TrainConfig, **kw) -> TrainResult:
    method = "rloo" if config.method == "rloo" else "grpo"
    return train(policy, tasks, TrainConfig(**{**asdict(config), "method": method}), **kw)


def train_dyna(policy, tasks, config: TrainConfig, refiner=None, **kw) -> TrainResult:
    return train(policy, tasks, TrainConfig(**{**asdict(config), "method": "dyna"}), refiner=refiner, **kw)

"""Experiment configuration: one JSON document with sections, plus dotted overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class SplitSpec:
    seed_start: int
    count: int
    width: int | None = None
    height: int | None = None


def _default_splits() -> dict[str, SplitSpec]:
    return {
        "train": SplitSpec(0, 16),
        "id_test": SplitSpec(10_000, 20),
        "ood_test": SplitSpec(20_000, 20, 8, 8),
    }


@dataclass
class EnvSection:
    width: int = 6
    height: int = 6
    n_boxes: int = 1
    t_max: int | None = None
    splits: dict[str, SplitSpec] = field(default_factory=_default_splits)


@dataclass
class ResimSection:
    b: int = 16
    d: int = 5
    b_train: int = 2
    gamma: float = 0.95
    prior: float = 0.1
    # which policy fits the value table: "oracle" or "policy"
    value_fit: str = "oracle"
    n_rollouts: int = 1
    percent_granularity: int = 5
    use_prefixes: bool = True


@dataclass
class TrainSection:
    method: str = "grpo"
    G: int = 8
    N: int = 15
    n_T: int = 10
    n_pi: int = 10
    epsilon: float = 0.2
    beta: float = 0.01
    lr: float = 20.0
    steps: int = 300
    batch_tasks: int = 4
    refine_depth: int = 5
    # "oracle" for the scripted BFS refiner, "policy" to let the policy refine itself
    refiner: str = "oracle"
    eval_episodes: int = 8
    checkpoint_every: int = 50


@dataclass
class EndpointSection:
    url: str = ""
    model: str = "default"
    auth_header: str = "Authorization"
    auth_env: str | None = None
    attempts: int = 3
    timeout: float = 60.0
    temperature: float = 1.0
    max_tokens: int = 1024


@dataclass
class PolicySection:
    kind: str = "tabular"
    h: int = 2
    temperature: float = 1.0
    plan_depth: int = 5
    endpoint: EndpointSection = field(default_factory=EndpointSection)


@dataclass
class EvalSection:
    repeats: int = 3
    episodes_per_task: int = 1


@dataclass
class PathsSection:
    out: str = "runs/default"


@dataclass
class ExperimentConfig:
    seed: int = 1
    workers: int = 1
    env: EnvSection = field(default_factory=EnvSection)
    resim: ResimSection = field(default_factory=ResimSection)
    train: TrainSection = field(default_factory=TrainSection)
    policy: PolicySection = field(default_factory=PolicySection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_json(self) -> dict:
        return asdict(self)

    def validate(self) -> "ExperimentConfig":
        validate(self)
        return self


# --- building from dicts --------------------------------------------------

def _coerce(value: Any, current: Any, path: str) -> Any:
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigError(path, f"expected a string, got {value!r}")
    return value


def _merge(obj, data: dict, path: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", "expected an object")
    known = {f.name for f in fields(obj)}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(sub, "unknown field")
        current = getattr(obj, key)
        if is_dataclass(current):
            _merge(current, value, sub)
        elif key == "splits":
            if not isinstance(value, dict):
                raise ConfigError(sub, "expected an object of splits")
            splits = {}
            for name, spec in value.items():
                base = current.get(name) or SplitSpec(0, 0)
                merged = SplitSpec(**asdict(base))
                _merge(merged, spec, f"{sub}.{name}")
                splits[name] = merged
            setattr(obj, key, {**current, **splits})
        else:
            setattr(obj, key, value if current is None else _coerce(value, current, sub))


def from_dict(data: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    _merge(cfg, data, "")
    return cfg


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, str]) -> ExperimentConfig:
    """Apply ``{"train.G": "8"}``-style overrides; values are read as JSON when possible."""
    for dotted, raw in overrides.items():
        nested: dict = {}
        node = nested
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_value(raw)
        _merge(cfg, nested, "")
    return cfg


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    data = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    cfg = from_dict(data)
    apply_overrides(cfg, overrides or {})
    return cfg.validate()


# --- validation -----------------------------------------------------------

def _positive(value, path: str) -> None:
    if value is None or value <= 0:
        raise ConfigError(path, "must be positive")


def validate(cfg: ExperimentConfig) -> None:
    env, rs, tr, pol = cfg.env, cfg.resim, cfg.train, cfg.policy
    _positive(cfg.workers, "workers")
    for name in ("width", "height", "n_boxes"):
        _positive(getattr(env, name), f"env.{name}")
    if env.t_max is not None:
        _positive(env.t_max, "env.t_max")
    ranges = []
    for name, spec in env.splits.items():
        _positive(spec.count, f"env.splits.{name}.count")
        if spec.seed_start < 0:
            raise ConfigError(f"env.splits.{name}.seed_start", "must be non-negative")
        ranges.append((spec.seed_start, spec.seed_start + spec.count, name))
    ranges.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(ranges, ranges[1:]):
        if b0 < a1:
            raise ConfigError(f"env.splits.{bn}.seed_start", f"seed range overlaps split {an!r}")
    if "train" not in env.splits:
        raise ConfigError("env.splits", "a 'train' split is required")
    for name in ("b", "d", "b_train", "n_rollouts", "percent_granularity"):
        _positive(getattr(rs, name), f"resim.{name}")
    if rs.b_train > rs.b:
        raise ConfigError("resim.b_train", f"must not exceed resim.b={rs.b}")
    if not 0 < rs.gamma <= 1:
        raise ConfigError("resim.gamma", "must lie in (0, 1]")
    if not 0 <= rs.prior <= 1:
        raise ConfigError("resim.prior", "must lie in [0, 1]")
    if rs.value_fit not in ("oracle", "policy"):
        raise ConfigError("resim.value_fit", "must be 'oracle' or 'policy'")
    if tr.method not in ("grpo", "rloo", "dyna"):
        raise ConfigError("train.method", "must be grpo, rloo or dyna")
    if tr.G < 2:
        raise ConfigError("train.G", "must be at least 2")
    if tr.method == "dyna" and tr.G % 2:
        raise ConfigError("train.G", "must be even for method=dyna")
    for name in ("N", "steps", "batch_tasks", "eval_episodes", "epsilon"):
        _positive(getattr(tr, name), f"train.{name}")
    for name in ("n_T", "n_pi", "refine_depth", "checkpoint_every", "beta", "lr"):
        if getattr(tr, name) < 0:
            raise ConfigError(f"train.{name}", "must be non-negative")
    if tr.n_T + tr.n_pi < 1:
        raise ConfigError("train.n_pi", "n_T and n_pi cannot both be zero")
    if tr.batch_tasks > env.splits["train"].count:
        raise ConfigError("train.batch_tasks", "exceeds the number of train tasks")
    if tr.refiner not in ("oracle", "policy"):
        raise ConfigError("train.refiner", "must be 'oracle' or 'policy'")
    if pol.kind not in ("tabular", "remote", "oracle"):
        raise ConfigError("policy.kind", "must be tabular, remote or oracle")
    if pol.h < 0:
        raise ConfigError("policy.h", "must be non-negative")
    _positive(pol.temperature, "policy.temperature")
    _positive(pol.plan_depth, "policy.plan_depth")
    if pol.kind == "remote" and not pol.endpoint.url:
        raise ConfigError("policy.endpoint.url", "required when policy.kind=remote")
    _positive(cfg.eval.repeats, "eval.repeats")
    _positive(cfg.eval.episodes_per_task, "eval.episodes_per_task")

"""Command line entry point: generate, resim, train, eval and score."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import random
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

from .config import ConfigError, ExperimentConfig, load_config
from .env import generate_instance, instance_from_json, instance_to_json
from .policy import OraclePolicy, TabularPolicy
from .remote import EndpointConfig, RemotePolicy
from .resim import resim_episode
from .simrollout import OracleRefiner
from .simscore import summarize, trajectory_sim_score, write_summary_csv
from .trainer import ConfigError as TrainConfigError
from .trainer import TrainConfig, train
from .trajectory import TrajectoryRecord, read_jsonl, run_episode, write_jsonl
from .value import lookup_fn, mc_fit

log = logging.getLogger("dynalab")


def _setup_logging() -> None:
    level = os.environ.get("DYNA_LAB_LOG", "error").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "ERROR"
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- manifests ------------------------------------------------------------

def manifest_path(cfg: ExperimentConfig, split: str) -> Path:
    return Path(cfg.paths.out) / "manifests" / f"{split}.jsonl"


def build_split(cfg: ExperimentConfig, split: str):
    spec = cfg.env.splits[split]
    width = spec.width or cfg.env.width
    height = spec.height or cfg.env.height
    t_max = cfg.env.t_max if (width, height) == (cfg.env.width, cfg.env.height) else None
    return [
        generate_instance(seed, width, height, cfg.env.n_boxes, t_max, split=split)
        for seed in range(spec.seed_start, spec.seed_start + spec.count)
    ]


def load_split(cfg: ExperimentConfig, split: str):
    path = manifest_path(cfg, split)
    if not path.exists():
        raise FileNotFoundError(f"missing manifest {path}; run 'generate' first")
    return [instance_from_json(row) for row in read_jsonl(path)]


def cmd_generate(cfg: ExperimentConfig) -> dict:
    counts = {}
    for split in cfg.env.splits:
        instances = build_split(cfg, split)
        write_jsonl(manifest_path(cfg, split), [instance_to_json(i) for i in instances])
        counts[split] = len(instances)
    return counts


# --- policies -------------------------------------------------------------

def make_policy(cfg: ExperimentConfig, checkpoint: str | Path | None = None):
    pol = cfg.policy
    if pol.kind == "oracle":
        return OraclePolicy()
    if pol.kind == "remote":
        ep = pol.endpoint
        return RemotePolicy(
            EndpointConfig(
                url=ep.url, model=ep.model, auth_header=ep.auth_header, auth_env=ep.auth_env,
                attempts=ep.attempts, timeout=ep.timeout, temperature=ep.temperature, max_tokens=ep.max_tokens,
            )
        )
    if checkpoint is not None:
        policy = TabularPolicy.load(checkpoint)
        policy.temperature = pol.temperature
        return policy
    return TabularPolicy(temperature=pol.temperature, plan_depth=pol.plan_depth)


# --- resim ----------------------------------------------------------------

def _resim_one(args):
    instance, policy, table, rs, seed, h = args
    sft, episode, steps = resim_episode(
        instance, policy, lookup_fn(table), rs.b, rs.d, rs.b_train, seed=seed, h=h,
        percent_granularity=rs.percent_granularity, use_prefixes=rs.use_prefixes,
    )
    return [r.to_json() for r in sft], [r.to_json() for r in episode.records], episode.success, [s.deduped for s in steps]


def cmd_resim(cfg: ExperimentConfig) -> dict:
    instances = load_split(cfg, "train")
    rs = cfg.resim
    policy = make_policy(cfg)
    fitter = OraclePolicy() if rs.value_fit == "oracle" else policy
    t_max = max(i.t_max for i in instances)
    table = mc_fit(fitter, instances, rs.n_rollouts, gamma=rs.gamma, t_max=t_max, seed=cfg.seed, prior=rs.prior)
    out = Path(cfg.paths.out) / "resim"
    out.mkdir(parents=True, exist_ok=True)
    table.save(out / "value_table.json")
    jobs = [(inst, policy, table, rs, f"{cfg.seed}:{k}", cfg.policy.h) for k, inst in enumerate(instances)]
    results = _map(_resim_one, jobs, cfg.workers)
    write_jsonl(out / "sft.jsonl", [row for sft, _, _, _ in results for row in sft])
    write_jsonl(out / "episodes.jsonl", [row for _, recs, _, _ in results for row in recs])
    n = len(results)
    success = sum(ok for _, _, ok, _ in results) / n
    turns = sum(len(recs) for _, recs, _, _ in results) / n
    branch_counts = [c for *_, counts in results for c in counts]
    mean_branches = sum(branch_counts) / len(branch_counts)
    _write_csv(out / "summary.csv", ["success_rate", "mean_turns", "mean_branches"],
               [[f"{success:.6f}", f"{turns:.6f}", f"{mean_branches:.6f}"]])
    return {"success_rate": success, "mean_turns": turns, "mean_branches": mean_branches}


# --- train ----------------------------------------------------------------

def train_config(cfg: ExperimentConfig) -> TrainConfig:
    tr = cfg.train
    return TrainConfig(
        method=tr.method, G=tr.G, N=tr.N, n_T=tr.n_T, n_pi=tr.n_pi, steps=tr.steps,
        epsilon_clip=tr.epsilon, beta_kl=tr.beta, learning_rate=tr.lr, batch_tasks=tr.batch_tasks,
        seed=cfg.seed, refine_depth=tr.refine_depth, h=0 if cfg.policy.kind == "tabular" else cfg.policy.h,
        eval_episodes=tr.eval_episodes, checkpoint_every=tr.checkpoint_every,
    )


def train_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.paths.out) / "train" / cfg.train.method


def cmd_train(cfg: ExperimentConfig, resume: bool = False) -> dict:
    if cfg.policy.kind != "tabular":
        raise ConfigError("policy.kind", "training needs a tabular policy")
    instances = load_split(cfg, "train")
    policy = make_policy(cfg)
    refiner = OracleRefiner() if cfg.train.refiner == "oracle" else None
    out = train_dir(cfg)
    result = train(policy, instances, train_config(cfg), refiner=refiner, out_dir=out, resume=resume)
    policy.save(out / "policy.json")
    summary = {
        "method": cfg.train.method,
        "seed": cfg.seed,
        "steps": len(result.log),
        "initial_success": result.initial_success,
        "final_success": result.final_success,
    }
    _write_json(out / "summary.json", summary)
    return summary


# --- eval -----------------------------------------------------------------

def _eval_one(args):
    instance, policy, seed, h = args
    episode = run_episode(instance, policy, random.Random(f"evalcli:{seed}:{instance.task_id}"), h)
    rows = [r.to_json() for r in episode.records]
    chars = [len(r.raw_text) for r in episode.records]
    return episode.success, rows, chars


def cmd_eval(cfg: ExperimentConfig, checkpoint: str | Path | None = None) -> dict:
    if checkpoint is None and cfg.policy.kind == "tabular":
        default = train_dir(cfg) / "policy.json"
        checkpoint = default if default.exists() else None
    policy = make_policy(cfg, checkpoint)
    out = Path(cfg.paths.out) / "eval"
    shown = None
    if checkpoint is not None:
        # relative to the run directory when possible, so reports do not depend on where runs live
        try:
            shown = Path(checkpoint).resolve().relative_to(Path(cfg.paths.out).resolve()).as_posix()
        except ValueError:
            shown = str(checkpoint)
    report = {"policy": cfg.policy.kind, "checkpoint": shown, "splits": {}}
    trajectories = []
    for split in [s for s in cfg.env.splits if s != "train"]:
        instances = load_split(cfg, split)
        rates, chars = [], []
        for rep in range(cfg.eval.repeats):
            jobs = [
                (inst, policy, f"{cfg.seed}:{rep}:{k}", cfg.policy.h)
                for inst in instances
                for k in range(cfg.eval.episodes_per_task)
            ]
            results = _map(_eval_one, jobs, cfg.workers)
            rates.append(sum(ok for ok, _, _ in results) / len(results))
            for _, rows, c in results:
                chars += c
                if rep == 0:
                    trajectories += rows
        report["splits"][split] = {
            "success_mean": statistics.fmean(rates),
            "success_std": statistics.pstdev(rates),
            "mean_response_chars": statistics.fmean(chars) if chars else 0.0,
            "repeats": cfg.eval.repeats,
            "episodes": len(instances) * cfg.eval.episodes_per_task,
        }
    _write_json(out / "report.json", report)
    write_jsonl(out / "trajectories.jsonl", trajectories)
    return report


# --- score ----------------------------------------------------------------

def split_episodes(rows) -> list[list[TrajectoryRecord]]:
    """Cut a record stream into episodes at each ``done`` record."""
    episodes, current = [], []
    for row in rows:
        current.append(TrajectoryRecord.from_json(row))
        if row["done"]:
            episodes.append(current)
            current = []
    if current:
        episodes.append(current)
    return episodes


def cmd_score(cfg: ExperimentConfig, trajectory_files: Sequence[str | Path]) -> list[dict]:
    if not trajectory_files:
        defaults = [Path(cfg.paths.out) / "resim" / "episodes.jsonl", Path(cfg.paths.out) / "eval" / "trajectories.jsonl"]
        trajectory_files = [p for p in defaults if p.exists()]
        if not trajectory_files:
            raise FileNotFoundError("no trajectory files given and none found under the run directory")
    out = Path(cfg.paths.out) / "score"
    by_method: dict[str, list] = {}
    turn_rows = []
    for path in trajectory_files:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"missing trajectory file {path}")
        for records in split_episodes(read_jsonl(path)):
            scored = trajectory_sim_score(records)
            method = records[0].kind
            by_method.setdefault(method, []).append(scored)
            for t in scored.turns:
                turn_rows.append({**t.to_json(), "method": method, "source": path.name})
    write_jsonl(out / "turns.jsonl", turn_rows)
    summary = [summarize(m, s) for m, s in sorted(by_method.items())]
    write_summary_csv(out / "summary.csv", summary)
    return summary


# --- argument parsing -----------------------------------------------------

def _split_overrides(extra: list[str]) -> dict[str, str]:
    overrides = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise SystemExit(f"unrecognized argument: {tok}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise SystemExit(f"missing value for {tok}")
            i += 1
            value = extra[i]
        overrides[key] = value
        i += 1
    return overrides


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the verb from being reset by the subparser
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS, allow_abbrev=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--workers", type=int, help="parallel rollout processes")
    common.add_argument("--out", help="run directory (overrides paths.out)")
    parser = argparse.ArgumentParser(
        prog="dynalab",
        allow_abbrev=False,
        description="Sokoban world-model agent experiments. Dotted flags like --train.G=8 override config fields.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], allow_abbrev=False, help="write train/ID/OOD task manifests")
    sub.add_parser("resim", parents=[common], allow_abbrev=False, help="collect search-guided reasoning traces on the train split")
    p = sub.add_parser("train", parents=[common], allow_abbrev=False, help="train the tabular policy")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p = sub.add_parser("eval", parents=[common], allow_abbrev=False, help="evaluate on the test splits")
    p.add_argument("--checkpoint", help="tabular policy JSON (defaults to the trained policy)")
    p = sub.add_parser("score", parents=[common], allow_abbrev=False, help="score simulations in trajectory files")
    p.add_argument("trajectories", nargs="*", help="trajectory JSONL files")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = _split_overrides(extra)
        if getattr(args, "seed", None) is not None:
            overrides["seed"] = str(args.seed)
        if getattr(args, "workers", None) is not None:
            overrides["workers"] = str(args.workers)
        if getattr(args, "out", None) is not None:
            overrides["paths.out"] = json.dumps(args.out)
        cfg = load_config(getattr(args, "config", None), overrides)
        if args.command == "generate":
            result = cmd_generate(cfg)
        elif args.command == "resim":
            result = cmd_resim(cfg)
        elif args.command == "train":
            result = cmd_train(cfg, resume=args.resume)
        elif args.command == "eval":
            result = cmd_eval(cfg, args.checkpoint)
        else:
            result = cmd_score(cfg, args.trajectories)
    except (ConfigError, TrainConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Small builders and independent oracles shared by the test modules."""

import contextlib
import filecmp
import io
import math
import re
from pathlib import Path

import numpy as np

from dynalab.env import ACTIONS, Action, Position, SokobanState, TaskInstance, parse_grid, step
from dynalab.policy import TabularPolicy
from dynalab.responses import parse_response
from dynalab.trainer import Sample, surrogate_gradient, surrogate_value
from dynalab.trajectory import read_jsonl


def grid(*rows: str, step_count: int = 0) -> SokobanState:
    """Build a state from compact rows such as "#P_X_O#" (one character per cell)."""
    lines = [f"Row {r}    " + "     ".join(row) + "    " for r, row in enumerate(rows)]
    return parse_grid("\n".join(lines), step_count=step_count)


def instance(state: SokobanState, t_max: int = 20, task_id: str = "t") -> TaskInstance:
    return TaskInstance(task_id, state, t_max)


def pos(r, c) -> Position:
    return Position(r, c)


# --- oracles shared by unit and acceptance tests --------------------------

_STEP_RE = re.compile(
    r"Now the player is at \((\d+), (\d+)\); boxes are at ([^;]+); unsolved targets are at ([^.]+)\."
)
_NEIGHBOUR_RE = re.compile(r"a (wall|floor|box on target|box|target) \w+(?: of)? the player at \((\d+), (\d+)\)")


def _coord_set(text):
    return {(int(r), int(c)) for r, c in re.findall(r"\((\d+), (\d+)\)", text)}


def check_faithful(start, trace_text) -> int:
    """Replay every narrated plan and compare each narrated coordinate with the real state.

    Returns the number of narrated steps checked; raises AssertionError on a mismatch.
    """
    think = parse_response(trace_text).think
    blocks = re.split(r"\n\n(?=Maybe we can try plan)", think)
    opening = _STEP_RE.pattern.replace("Now the", "Currently, the")
    m = re.search(opening, blocks[0])
    assert m and (int(m.group(1)), int(m.group(2))) == start.player
    assert _coord_set(m.group(3)) == set(start.boxes)
    checked = 0
    for block in blocks[1:]:
        head = re.match(r"Maybe we can try plan \d+: (.*)\.", block)
        actions = [Action.parse(a) for a in head.group(1).split(" -> ")]
        lines = _STEP_RE.findall(block)
        assert len(lines) == len(actions)
        cur = start
        for a, (r, c, boxes, targets) in zip(actions, lines):
            cur = step(cur, a, 10**6).next_state
            assert (int(r), int(c)) == cur.player
            assert _coord_set(boxes) == set(cur.boxes)
            assert _coord_set(targets) == set(cur.targets - cur.boxes)
            checked += 1
        for kind, r, c in _NEIGHBOUR_RE.findall(block):
            assert cur.cell((int(r), int(c))) == kind
    return checked


def random_surrogate_batch(rng: np.random.Generator):
    """Random policy, reference and samples whose behaviour logprobs come from a nearby table."""
    keys = [f"k{i}" for i in range(int(rng.integers(1, 4)))]
    policy = TabularPolicy({k: rng.normal(0, 1, 4) for k in keys}, temperature=float(rng.uniform(0.5, 2)))
    old = TabularPolicy({k: v + rng.normal(0, 0.3, 4) for k, v in policy.table.items()}, policy.temperature)
    ref = TabularPolicy({k: rng.normal(0, 1, 4) for k in keys}, policy.temperature)
    samples = []
    for _ in range(int(rng.integers(1, 8))):
        k = keys[int(rng.integers(len(keys)))]
        a = ACTIONS[int(rng.integers(4))]
        samples.append(Sample(k, a, float(rng.normal()), old.logprob(k, a), float(rng.uniform(0.05, 1))))
    return policy, ref, samples


def near_clip_kink(policy, samples, eps_clip, margin=1e-3) -> bool:
    ratios = [math.exp(policy.logprob(s.key, s.action) - s.old_logprob) for s in samples]
    return any(min(abs(r - 1 - eps_clip), abs(r - 1 + eps_clip)) < margin for r in ratios)


def gradient_fd_error(policy, ref, samples, eps_clip, beta, h=1e-6) -> float:
    """Relative error between the analytic surrogate gradient and central finite differences."""
    _, grads, _ = surrogate_gradient(policy, ref, samples, eps_clip, beta)
    analytic, numeric = [], []
    for k in policy.table:
        for i in range(4):
            up, down = policy.copy(), policy.copy()
            up.table[k][i] += h
            down.table[k][i] -= h
            numeric.append((surrogate_value(up, ref, samples, eps_clip, beta)
                            - surrogate_value(down, ref, samples, eps_clip, beta)) / (2 * h))
            analytic.append(grads.get(k, np.zeros(4))[i])
    analytic, numeric = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-8))


def rank_oracle(v):
    """Average-tie ranks by pairwise counting."""
    n = len(v)
    return [1 + sum(v[j] < v[i] for j in range(n)) + 0.5 * sum(v[j] == v[i] for j in range(n) if j != i)
            for i in range(n)]


def spearman_oracle(x, y):
    rx, ry = rank_oracle(x), rank_oracle(y)
    n = len(x)
    mx, my = sum(rx) / n, sum(ry) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    return cov / (vx * vy) ** 0.5


def run_cli(*argv):
    """Call the CLI in-process; returns (exit code, stdout)."""
    from dynalab.cli import main

    buf = io.StringIO()
    with contextlib.redirect_stdout(buf), contextlib.redirect_stderr(io.StringIO()):
        code = main([str(a) for a in argv])
    return code, buf.getvalue()


def run_pipeline(config_path, out):
    for verb in ("generate", "resim", "train", "eval"):
        code, _ = run_cli(verb, "--config", config_path, "--out", out)
        assert code == 0, verb
    code, text = run_cli("score", "--config", config_path, "--out", out)
    assert code == 0
    return text


def strip_wallclock(path):
    return [{k: v for k, v in row.items() if k != "wallclock_ms"} for row in read_jsonl(path)]


def compare_runs(a: Path, b: Path) -> list[Path]:
    """Assert two run directories hold the same files with the same bytes (wallclock aside)."""
    files_a = sorted(p.relative_to(a) for p in Path(a).rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in Path(b).rglob("*") if p.is_file())
    assert files_a == files_b and files_a
    for rel in files_a:
        if rel.name == "train_log.jsonl":
            assert strip_wallclock(a / rel) == strip_wallclock(b / rel), rel
        else:
            assert filecmp.cmp(a / rel, b / rel, shallow=False), rel
    return files_a

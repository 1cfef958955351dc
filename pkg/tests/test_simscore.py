import csv
import json
import random

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynalab.env import Action, SokobanEnv, generate_instance, step, worked_example_state
from dynalab.oracle import replay
from dynalab.policy import OraclePolicy, TabularPolicy
from dynalab.remote import EndpointConfig
from dynalab.resim import Branch, aggregate, dedupe, expand, resim_episode, select, value_leaves
from dynalab.simscore import (
    ExtractedSimulation,
    ExtractionError,
    ImaginedState,
    RemoteExtractor,
    correctness_flags,
    extract_simulation,
    ground_truth_rollforward,
    progress_flags,
    score_correctness,
    score_progress,
    score_turn,
    spearman,
    summarize,
    trajectory_sim_score,
    write_summary_csv,
)
from dynalab.trajectory import run_episode
from dynalab.value import lookup_fn, mc_fit

from helpers import instance, spearman_oracle
from rubric_cases import CASES

D, L, R, U = Action.DOWN, Action.LEFT, Action.RIGHT, Action.UP
UNIFORM = TabularPolicy(plan_depth=1)


def _branch(start, actions, value):
    states = tuple(replay(start, actions, 20))
    return Branch(tuple(actions), states, start, value, states[-1].solved, states[-1].solved)


# --- extraction -----------------------------------------------------------

def test_extract_worked_example_trace():
    s = worked_example_state()
    trace = aggregate(s, _branch(s, [D, L, D, R], 1.0), [_branch(s, [D, L, D], 0.8)])
    sim = extract_simulation(trace.text)
    assert sim.actions == (D, L, D, R)
    assert sim.final.player == (4, 2) and sim.final.boxes == ((4, 3),) and sim.final.unsolved_targets == ()
    assert sim.imagined_states[0].player == s.player
    assert len(sim.imagined_states) == 5
    assert sim.discounted_success_rate == 1.0


def test_plain_tags_give_empty_states():
    sim = extract_simulation("<plan>up, left</plan>\n<action>up</action>")
    assert sim.actions == (U, L) and sim.imagined_states == () and sim.final is None


def test_unparseable_raises():
    with pytest.raises(ExtractionError):
        extract_simulation("I would go up I think")


def test_too_many_states_rejected():
    with pytest.raises(ValueError):
        ExtractedSimulation((U,), (ImaginedState(),) * 3)


def test_roundtrip_on_generated_traces():
    n = 0
    for seed in range(100):
        s = generate_instance(seed, 6, 6, 1).initial_state
        brs = dedupe(expand(s, UNIFORM, 8, 5, seed, 20))
        brs = value_leaves(brs, lambda st_, t: random.Random(f"{seed}:{st_.player}").random(), 0)
        best, others = select(brs, 2, seed)
        trace = aggregate(s, best, others)
        assert extract_simulation(trace.text).actions == trace.chosen_plan
        n += 1
    assert n == 100


def test_remote_extractor():
    reply = {"extracted_final_chosen_branch": {
        "actions": ["down", "left"], "discounted_success_rate": 80,
        "last_observation": "Now the player is at (3, 1); boxes are at (4, 2); unsolved targets are at (4, 3).",
    }}
    body = {"choices": [{"message": {"role": "assistant", "content": f"<json>{json.dumps(reply)}</json>"}}]}
    client = httpx.Client(transport=httpx.MockTransport(lambda req: httpx.Response(200, json=body)))
    ex = RemoteExtractor(EndpointConfig(url="http://stub/v1", model="m", attempts=1, timeout=1.0), client)
    sim = extract_simulation("free text", ex)
    assert sim.actions == (D, L) and sim.discounted_success_rate == pytest.approx(0.8)
    assert sim.final.player == (3, 1) and sim.final.boxes == ((4, 2),)
    bad = httpx.Client(transport=httpx.MockTransport(
        lambda req: httpx.Response(200, json={"choices": [{"message": {"content": "no json"}}]})))
    with pytest.raises(ExtractionError):
        RemoteExtractor(ex.config, bad)("free text")


# --- ground truth ---------------------------------------------------------

def test_rollforward():
    s = worked_example_state()
    assert ground_truth_rollforward(s, []) == []
    walls = ground_truth_rollforward(s, [U, U, U, U])
    assert len(walls) == 4 and walls[-1].player == walls[-2].player
    full = ground_truth_rollforward(s, [D, L, D, R, U, U])
    assert len(full) == 4 and full[-1].solved


def test_rollforward_restores_env():
    env = SokobanEnv(instance(worked_example_state()))
    env.step(D)
    snap = env.snapshot()
    out = ground_truth_rollforward(env, [L, D, R])
    assert out[-1].solved
    assert env.snapshot() == snap and not env.done


# --- rubric ---------------------------------------------------------------

@pytest.mark.parametrize("name,imagined,start,final,c,p", CASES, ids=[c[0] for c in CASES])
def test_rubric_table(name, imagined, start, final, c, p):
    assert score_correctness(imagined, final) == pytest.approx(c, abs=1e-12)
    assert score_progress(start, final) == pytest.approx(p, abs=1e-12)


def test_rubric_covers_items_and_caps():
    assert len(CASES) == 12
    seen = set()
    for _, imagined, start, final, _, _ in CASES:
        seen |= set(correctness_flags(imagined, final)) | set(progress_flags(start, final))
    assert seen == {"player", "some_boxes_targets", "all_boxes_targets", "walls_floors",
                    "solved", "major_progress", "minor_progress", "deadlocked"}
    # both caps bind: every correctness item at once, and solved together with a progress item
    assert any(len(correctness_flags(i, f)) == 4 for _, i, _, f, _, _ in CASES)
    assert sum(len(progress_flags(s, f)) == 2 for _, _, s, f, _, _ in CASES) == 2


def test_score_turn_on_worked_example():
    s = worked_example_state()
    trace = aggregate(s, _branch(s, [D, L, D, R], 1.0), [])
    rep = score_turn(s, trace.text, task_id="worked", turn=0)
    assert rep.correctness == pytest.approx(0.3) and rep.progress == pytest.approx(0.7)
    assert rep.total == rep.correctness + rep.progress
    assert set(rep.to_json()) == {"task_id", "turn", "correctness", "progress", "total", "flags"}
    bad = score_turn(s, "??")
    assert bad.total == 0 and bad.rubric_flags == ("extraction_failed",)


# --- trajectories ---------------------------------------------------------

def test_resim_trajectories_have_full_correctness():
    for seed in range(5):
        inst = generate_instance(seed, 6, 6, 1)
        _, ep, _ = resim_episode(inst, UNIFORM, lookup_fn(mc_fit(OraclePolicy(), [inst], 1)), seed=seed)
        score = trajectory_sim_score(ep.records)
        assert all(t.correctness == pytest.approx(0.3) for t in score.turns)
        # the last turn's chosen plan ends the episode
        assert score.turns[-1].total == pytest.approx(1.0)


def test_empty_simulations_score_progress_only():
    inst = generate_instance(3, 6, 6, 1)
    ep = run_episode(inst, OraclePolicy(), random.Random(0))
    score = trajectory_sim_score(ep.records)
    assert all(t.correctness == 0 for t in score.turns)
    assert score.turns[-1].progress == pytest.approx(0.7)


def test_single_turn_trajectory():
    s = worked_example_state()
    for a in (D, L, D):
        s = step(s, a, 20).next_state
    ep = run_episode(instance(s), OraclePolicy(), random.Random(0))
    score = trajectory_sim_score(ep.records)
    assert len(score.turns) == 1 and score.score == score.turns[0].total


def test_scoring_is_pure():
    inst = generate_instance(4, 6, 6, 1)
    ep = run_episode(inst, TabularPolicy(), random.Random(1), h=2)
    a = [t.to_json() for t in trajectory_sim_score(ep.records).turns]
    b = [t.to_json() for t in trajectory_sim_score(ep.records).turns]
    assert a == b
    assert all(0 <= t["total"] <= 1 and t["total"] == t["correctness"] + t["progress"] for t in a)


# --- spearman -------------------------------------------------------------

def test_spearman_examples():
    assert spearman([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        spearman([1], [1])


def test_spearman_against_oracle():
    rng = np.random.default_rng(0)
    done = 0
    while done < 200:
        n = int(rng.integers(2, 40))
        x = rng.integers(0, 6, n).tolist() if rng.random() < 0.5 else rng.normal(size=n).tolist()
        y = rng.integers(0, 2, n).tolist() if rng.random() < 0.3 else rng.normal(size=n).tolist()
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        assert abs(spearman(x, y) - spearman_oracle(x, y)) < 1e-9
        done += 1


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=3, max_size=20))
def test_spearman_symmetric_and_bounded(pairs):
    x, y = [a for a, _ in pairs], [b for _, b in pairs]
    if len(set(x)) < 2 or len(set(y)) < 2:
        return
    r = spearman(x, y)
    assert -1 - 1e-12 <= r <= 1 + 1e-12 and r == pytest.approx(spearman(y, x))


def test_summary_csv(tmp_path):
    s = worked_example_state()
    eps = [run_episode(instance(s, task_id=f"t{k}"), OraclePolicy(), random.Random(k)) for k in range(2)]
    scores = [trajectory_sim_score(e.records) for e in eps]
    row = summarize("oracle", scores)
    assert row["success_rate"] == 1.0 and row["spearman"] is None
    write_summary_csv(tmp_path / "s.csv", [row])
    with open(tmp_path / "s.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["method", "success_rate", "mean_sim_score", "spearman"]
    assert rows[1][0] == "oracle" and rows[1][3] == ""

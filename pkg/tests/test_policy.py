import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynalab.env import ACTIONS, Action, generate_instance, render_text, step, worked_example_state
from dynalab.oracle import oracle_policy
from dynalab.policy import (
    TabularPolicy,
    act_tabular,
    build_observation,
    logprob_and_grad,
    softmax,
)
from dynalab.responses import ParseError, format_response, make_response, parse_response

from helpers import instance

actions_st = st.sampled_from(ACTIONS)
logits_st = st.lists(st.floats(-8, 8, allow_nan=False), min_size=4, max_size=4).map(np.array)


# --- responses ------------------------------------------------------------

def test_parse_worked_example_tags():
    r = parse_response("<plan>down, left, down, right</plan>\n<action>down</action>")
    assert r.plan == (Action.DOWN, Action.LEFT, Action.DOWN, Action.RIGHT)
    assert r.action is Action.DOWN and r.consistent and r.think == ""


@pytest.mark.parametrize(
    "text",
    [
        "<action>up</action>",
        "<plan>up</plan>",
        "<plan></plan><action>up</action>",
        "<plan>up</plan><action> </action>",
        "<plan>jump</plan><action>up</action>",
        "<plan>up</plan><action>north</action>",
    ],
)
def test_parse_errors(text):
    with pytest.raises(ParseError):
        parse_response(text)


def test_action_tag_is_authoritative():
    r = parse_response("<think>hm</think><plan>left, up</plan><action>right</action>")
    assert r.action is Action.RIGHT and r.plan[0] is Action.LEFT and not r.consistent
    assert r.think == "hm"


def test_tags_inside_think_are_ignored():
    text = "<think>e.g. <plan>up</plan><action>up</action></think>\n<plan>down</plan>\n<action>down</action>"
    r = parse_response(text)
    assert r.plan == (Action.DOWN,) and r.action is Action.DOWN


@given(st.lists(actions_st, min_size=1, max_size=6), st.text(alphabet=st.characters(blacklist_characters="<>"), max_size=40))
def test_format_parse_roundtrip(plan, think):
    r = parse_response(format_response(think, plan, plan[0]))
    assert r.plan == tuple(plan) and r.action is plan[0]


def test_make_response_requires_plan():
    with pytest.raises(ValueError):
        make_response("x", ())


# --- observations ---------------------------------------------------------

def _turns(n):
    inst = generate_instance(1, 6, 6, 1)
    s = inst.initial_state
    turns = []
    for i in range(n):
        turns.append((s, f"response {i}"))
        s = step(s, ACTIONS[i % 4], 20).next_state
    return inst, turns, s


def test_history_window():
    inst, turns, cur = _turns(5)
    obs = build_observation(inst, turns, h=2, current=cur)
    assert [resp for _, resp in obs.history] == ["response 3", "response 4"]
    obs0 = build_observation(inst, turns, h=0, current=cur)
    assert obs0.history == () and "# Previous Steps" not in obs0.text
    assert render_text(cur) in obs0.text


def test_observation_is_deterministic_and_injective():
    inst, turns, cur = _turns(3)
    a = build_observation(inst, turns, 2, cur).text
    assert a == build_observation(inst, turns, 2, cur).text
    assert a != build_observation(inst, turns[:-1] + [(turns[-1][0], "other")], 2, cur).text
    with pytest.raises(ValueError):
        build_observation(inst, turns, -1)


# --- tabular policy -------------------------------------------------------

def test_uniform_probabilities_and_logprob():
    pol = TabularPolicy()
    assert np.allclose(pol.probs("k"), 0.25)
    assert pol.logprob("k", Action.LEFT) == pytest.approx(math.log(0.25))


def test_peaked_logits():
    pol = TabularPolicy({"k": np.array([10.0, 0, 0, 0])})
    # exact value e^10 / (e^10 + 3) = 0.999864
    assert pol.probs("k")[0] == pytest.approx(math.exp(10) / (math.exp(10) + 3), rel=1e-12)
    assert pol.probs("k")[0] > 0.9998


@given(logits_st, st.floats(0.1, 5))
def test_softmax_sums_to_one(logits, temp):
    assert abs(softmax(logits, temp).sum() - 1) < 1e-9


@given(logits_st, actions_st, st.floats(0.2, 3))
def test_logprob_gradient_matches_finite_differences(logits, action, temp):
    pol = TabularPolicy({"k": logits.copy()}, temperature=temp)
    lp, grad = pol.logprob_and_grad("k", action)
    assert set(grad) == {"k"}
    assert abs(grad["k"].sum()) < 1e-9
    eps = 1e-5
    for i in range(4):
        up, down = logits.copy(), logits.copy()
        up[i] += eps
        down[i] -= eps
        fd = (
            TabularPolicy({"k": up}, temperature=temp).logprob("k", action)
            - TabularPolicy({"k": down}, temperature=temp).logprob("k", action)
        ) / (2 * eps)
        assert fd == pytest.approx(grad["k"][i], rel=1e-6, abs=1e-8)


def test_sampling_matches_softmax_row():
    pol = TabularPolicy({"k": np.array([1.0, 0.0, -1.0, 0.5])})
    rng = random.Random(0)
    counts = np.zeros(4)
    for _ in range(20_000):
        a, _ = pol.sample("k", rng)
        counts[a.index] += 1
    assert np.allclose(counts / counts.sum(), pol.probs("k"), atol=0.015)


def test_act_tabular_deterministic_and_roundtrips():
    obs = build_observation(instance(worked_example_state()), (), 0)
    pol = TabularPolicy()
    a, b = act_tabular(pol, obs, 7), act_tabular(pol, obs, 7)
    assert a == b and a.logprob == pytest.approx(math.log(0.25))
    parsed = parse_response(a.raw_text)
    assert parsed.plan == a.plan and parsed.action == a.action
    assert len(a.plan) <= pol.plan_depth
    lp, grad = logprob_and_grad(pol, obs, a.action)
    assert lp == pytest.approx(a.logprob)


def test_oracle_response_roundtrips():
    r = oracle_policy(worked_example_state())
    parsed = parse_response(r.raw_text)
    assert parsed.plan == r.plan and parsed.action == r.action


def test_apply_gradient_and_zero_lr():
    pol = TabularPolicy()
    pol.apply_gradient({"k": np.array([1.0, 0, 0, -1.0])}, 0.0)
    assert pol.table == {}
    pol.apply_gradient({"k": np.array([1.0, 0, 0, -1.0])}, 0.5)
    assert np.allclose(pol.table["k"], [0.5, 0, 0, -0.5])


def test_json_roundtrip(tmp_path):
    pol = TabularPolicy({"a": np.array([0.1, 0.2, 0.3, 0.4])}, temperature=0.7, plan_depth=3)
    pol.save(tmp_path / "p.json")
    back = TabularPolicy.load(tmp_path / "p.json")
    assert back.temperature == 0.7 and back.plan_depth == 3
    assert np.array_equal(back.table["a"], pol.table["a"])


def test_invalid_temperature():
    with pytest.raises(ValueError):
        TabularPolicy(temperature=0)

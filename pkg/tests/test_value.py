import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynalab.env import generate_instance, state_key, worked_example_state
from dynalab.oracle import bfs_solve, replay
from dynalab.policy import OraclePolicy, TabularPolicy
from dynalab.trajectory import run_episode
from dynalab.value import ValueTable, mc_fit, oracle_value, value_lookup

from helpers import grid, instance


def test_always_succeeding_policy_discount():
    s = worked_example_state()
    inst = instance(s, t_max=9)
    table = mc_fit(OraclePolicy(), [inst], n_rollouts=3, gamma=0.95)
    states = [s] + replay(s, bfs_solve(s).plan)
    # the solved state is first seen at t = 4, so t_max - t = 5
    assert value_lookup(table, states[4], 4) == pytest.approx(0.95**5)
    assert value_lookup(table, states[4], 4) == pytest.approx(0.7737809375)
    for t, st_ in enumerate(states):
        value, visits = table.entries[state_key(st_)]
        assert value == pytest.approx(0.95 ** (9 - t)) and visits == 3


def test_gamma_one_gives_success_fraction():
    insts = [generate_instance(s, 6, 6, 1) for s in range(4)]
    pol = TabularPolicy(plan_depth=1)
    table = mc_fit(pol, insts, n_rollouts=10, gamma=1.0, t_max=20, seed=3)
    # independent recount of the start state of instance 0
    hits = wins = 0
    for k in range(10):
        ep = run_episode(insts[0], pol, random.Random(f"mc:3:{insts[0].task_id}:{k}"))
        hits += 1
        wins += ep.success
    assert table.entries[state_key(insts[0].initial_state)][0] == pytest.approx(wins / hits)


def test_repeats_multiply_rollouts():
    inst = instance(worked_example_state(), t_max=9)
    table = mc_fit(OraclePolicy(), [inst], n_rollouts=2, repeats=3)
    assert table.entries[state_key(worked_example_state())][1] == 6


def test_unseen_fallback():
    table = ValueTable(0.95, 20, prior=0.1)
    s = worked_example_state()
    assert value_lookup(table, s, 20) == pytest.approx(0.1)
    assert value_lookup(table, s, 15) == pytest.approx(0.95**5 * 0.1)
    assert value_lookup(table, s, 25) == pytest.approx(0.1)


def test_oracle_value():
    s = worked_example_state()
    assert oracle_value(s, 10, 0.95, 20) == pytest.approx(0.95**10)
    assert oracle_value(s, 17, 0.95, 20) == 0.0
    dead = grid("######", "#X___#", "#_P_O#", "######")
    assert oracle_value(dead, 0, 0.95, 20) == 0.0


@given(st.integers(0, 500), st.floats(0.5, 1.0))
def test_values_in_unit_interval(seed, gamma):
    inst = generate_instance(seed, 6, 6, 1)
    table = mc_fit(TabularPolicy(plan_depth=1), [inst], n_rollouts=3, gamma=gamma, seed=seed)
    assert all(0.0 <= v <= 1.0 and n >= 1 for v, n in table.entries.values())


def test_monotone_in_gamma():
    inst = instance(worked_example_state(), t_max=12)
    lo = mc_fit(OraclePolicy(), [inst], 1, gamma=0.8)
    hi = mc_fit(OraclePolicy(), [inst], 1, gamma=0.95)
    for k in lo.entries:
        assert lo.entries[k][0] <= hi.entries[k][0]


def test_json_roundtrip(tmp_path):
    table = mc_fit(OraclePolicy(), [instance(worked_example_state())], 1)
    table.save(tmp_path / "v.json")
    assert ValueTable.load(tmp_path / "v.json") == table


def test_invalid_arguments():
    with pytest.raises(ValueError):
        ValueTable(0.0, 20)
    with pytest.raises(ValueError):
        mc_fit(OraclePolicy(), [instance(worked_example_state())], 0)

"""Closed-loop episodes, Monte Carlo batches, and the epsilon sweep."""

import numpy as np
import pytest

from setmpc.abstraction import build_action_set, build_imdp
from setmpc.dynamics import Box, double_integrator
from setmpc.errors import ContractViolation
from setmpc.imdp_synthesis import robust_value_iteration
from setmpc.partition import build_partition
from setmpc import simulation
from setmpc.simulation import (
    TIMEOUT,
    MpcController,
    VanillaController,
    epsilon_sweep,
    monte_carlo,
    run_episode,
    synthesize_for,
)

Q2 = np.eye(2)
R1 = np.eye(1)


@pytest.fixture(scope="module")
def coarse():
    model = double_integrator(goal_box=Box([-4.2, -4.2], [4.2, 4.2]))
    partition = build_partition(model, (5, 5))
    out = {"model": model, "partition": partition}
    for key, eps in (("wide", 0.5), ("zero", 0.0)):
        actions = build_action_set(model, (5,), eps)
        imdp = build_imdp(model, partition, actions)
        _, policy = robust_value_iteration(imdp)
        out[key] = (actions, policy)
    return out


def _rng(seed, episode=0):
    return np.random.Generator(np.random.Philox(key=[seed, episode]))


def test_run_episode_starting_in_goal(coarse):
    model = coarse["model"]
    actions, policy = coarse["zero"]
    ctrl = VanillaController(coarse["partition"], actions, policy, Q2, R1)
    ep = run_episode(model, ctrl, np.array([0.0, 0.0]), 50, _rng(1))
    assert ep.sat is True
    assert ep.steps == 0
    assert ep.j_total == 0.0
    assert ep.states.shape == (1, 2)
    assert ep.inputs.shape == (0, 1)


def test_run_episode_starting_outside_is_unsafe(coarse):
    model = coarse["model"]
    actions, policy = coarse["zero"]
    ctrl = VanillaController(coarse["partition"], actions, policy, Q2, R1)
    ep = run_episode(model, ctrl, np.array([30.0, 0.0]), 50, _rng(1))
    assert ep.sat is False
    assert ep.steps == 0


def test_run_episode_requires_rng(coarse):
    model = coarse["model"]
    actions, policy = coarse["zero"]
    ctrl = VanillaController(coarse["partition"], actions, policy, Q2, R1)
    with pytest.raises(ContractViolation):
        run_episode(model, ctrl, np.array([10.0, 0.0]), 50)


def test_episode_cost_accounting_recomputes(coarse):
    model = coarse["model"]
    actions, policy = coarse["wide"]
    ctrl = VanillaController(coarse["partition"], actions, policy, Q2, R1)
    ep = run_episode(model, ctrl, np.array([-10.0, 6.0]), 80, _rng(7))
    assert ep.j_total == ep.j_state + ep.j_input
    js = 0.0
    ji = 0.0
    for k in range(ep.steps):
        r = ctrl.target(ep.states[k])
        e = r - ep.states[k]
        js += float(e @ Q2 @ e)
        u = ep.inputs[k]
        ji += float(u @ R1 @ u)
    assert ep.j_state == pytest.approx(js, rel=1e-12)
    assert ep.j_input == pytest.approx(ji, rel=1e-12)


def test_common_random_numbers_reproduce_bitwise(coarse):
    model = coarse["model"]
    actions, policy = coarse["wide"]
    ctrl = VanillaController(coarse["partition"], actions, policy, Q2, R1)
    a = monte_carlo(model, ctrl, np.array([10.0, 0.0]), 4, 11, max_steps=60)
    b = monte_carlo(model, ctrl, np.array([10.0, 0.0]), 4, 11, max_steps=60)
    for ea, eb in zip(a.episodes, b.episodes):
        assert np.array_equal(ea.states, eb.states)
        assert np.array_equal(ea.inputs, eb.inputs)
    c = monte_carlo(model, ctrl, np.array([10.0, 0.0]), 4, 12, max_steps=60)
    assert any(
        not np.array_equal(ea.states, ec.states)
        for ea, ec in zip(a.episodes, c.episodes)
    )


def test_monte_carlo_summary_matches_episodes(coarse):
    model = coarse["model"]
    actions, policy = coarse["wide"]
    ctrl = VanillaController(coarse["partition"], actions, policy, Q2, R1)
    s = monte_carlo(model, ctrl, np.array([10.0, 0.0]), 6, 3, max_steps=60)
    jt = np.array([ep.j_total for ep in s.episodes])
    sat = np.array([ep.sat is True for ep in s.episodes])
    assert s.n_runs == 6 and len(s.episodes) == 6
    assert s.mean_j_total == pytest.approx(float(jt.mean()), rel=1e-15)
    assert s.std_j_total == pytest.approx(float(jt.std()), rel=1e-15)
    assert s.sat_frequency == pytest.approx(float(sat.mean()))
    assert s.timeout_fraction == pytest.approx(
        float(np.mean([ep.sat == TIMEOUT for ep in s.episodes]))
    )
    if sat.any():
        assert s.mean_j_total_sat == pytest.approx(float(jt[sat].mean()))
    assert s.t_mpc_step is None  # vanilla batch never solves
    assert s.mean_fallback == 0.0


def test_timeout_counts_as_unsatisfied(coarse):
    model = coarse["model"]
    actions, policy = coarse["zero"]
    ctrl = VanillaController(coarse["partition"], actions, policy, Q2, R1)
    s = monte_carlo(model, ctrl, np.array([15.0, 0.0]), 3, 5, max_steps=1)
    assert s.sat_frequency == 0.0
    assert s.timeout_fraction == 1.0
    assert all(ep.sat == TIMEOUT for ep in s.episodes)


def test_mpc_equals_vanilla_at_zero_radius(coarse):
    model = coarse["model"]
    actions, policy = coarse["zero"]
    van = VanillaController(coarse["partition"], actions, policy, Q2, R1)
    mpc = MpcController(model, coarse["partition"], actions, policy, Q2, R1, 3)
    a = monte_carlo(model, van, np.array([10.0, 0.0]), 5, 21, max_steps=60)
    b = monte_carlo(model, mpc, np.array([10.0, 0.0]), 5, 21, max_steps=60)
    for ea, eb in zip(a.episodes, b.episodes):
        assert np.array_equal(ea.states, eb.states)
        assert np.array_equal(ea.inputs, eb.inputs)
        assert ea.sat == eb.sat


def test_synthesize_for_picks_representation(coarse, monkeypatch):
    model, partition = coarse["model"], coarse["partition"]
    actions, _ = coarse["wide"]
    values, policy, kind, t_abs, t_synth = synthesize_for(model, partition, actions)
    assert kind == "explicit"
    assert t_abs > 0 and t_synth > 0
    assert 0.0 <= policy.lam <= 1.0
    # force the factored path on the same instance; its bound stays sound
    monkeypatch.setattr(simulation, "MAX_EXPLICIT_TRANSITIONS", 1.0)
    values_f, policy_f, kind_f, _, _ = synthesize_for(model, partition, actions)
    assert kind_f == "factored"
    assert policy_f.lam <= policy.lam + 1e-12


def test_epsilon_sweep_rows_and_error_isolation():
    model = double_integrator(goal_box=Box([-4.2, -4.2], [4.2, 4.2]))
    cfg = {"Q": Q2, "R": R1, "horizon": 2}
    rows = epsilon_sweep(
        model, (5, 5), (5,), [0.0, 0.3, -1.0], cfg, n_runs=3,
        base_seed=2, max_steps=40,
    )
    assert len(rows) == 3
    zero, wide, bad = rows
    assert zero.error == "" and zero.kind == "explicit"
    assert zero.t_mpc_step is None  # zero radius runs the vanilla controller
    assert zero.mean_fallback == 0.0
    assert zero.ball_area == 0.0
    assert wide.error == ""
    assert wide.t_mpc_step is not None and wide.t_mpc_step > 0.0
    assert wide.ball_area == pytest.approx(0.6)
    assert bad.error.startswith("ContractViolation")
    assert np.isnan(bad.lam) and np.isnan(bad.e_j)


def test_epsilon_sweep_vanilla_override():
    model = double_integrator(goal_box=Box([-4.2, -4.2], [4.2, 4.2]))
    cfg = {"Q": Q2, "R": R1, "horizon": 2}
    rows = epsilon_sweep(
        model, (5, 5), (5,), [0.3], cfg, n_runs=2, base_seed=2,
        max_steps=40, controller="vanilla",
    )
    assert rows[0].t_mpc_step is None
    assert rows[0].error == ""

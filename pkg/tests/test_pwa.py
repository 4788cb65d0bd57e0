"""Piecewise-affine mean models: analytic Jacobians and table layout."""

import numpy as np
import pytest

from setmpc.abstraction import build_action_set
from setmpc.dynamics import (
    deterministic_mean,
    double_integrator,
    dubins_car,
    mountain_car,
)
from setmpc.errors import ContractViolation
from setmpc.imdp_synthesis import RobustPolicy
from setmpc.partition import GOAL, NEUTRAL, UNSAFE, build_partition, cell_center
from setmpc.pwa import jacobians, linearize, pwa_table


def _interior_sample(rng, model):
    """Random (x, u) far enough from clamp and wrap kinks for central FD."""
    if model.name == "mountain_car":
        x = np.array([rng.uniform(-1.1, 0.5), rng.uniform(-0.04, 0.04)])
    elif model.name == "dubins":
        x = np.array(
            [rng.uniform(-9.0, 9.0), rng.uniform(-9.0, 9.0), rng.uniform(-1.5, 1.5)]
        )
    else:
        x = rng.uniform(model.state_box.lo * 0.9, model.state_box.hi * 0.9)
    u = rng.uniform(model.input_box.lo, model.input_box.hi)
    return x, u


@pytest.mark.parametrize(
    "factory", [double_integrator, mountain_car, dubins_car]
)
def test_jacobians_match_finite_differences(factory):
    model = factory()
    rng = np.random.Generator(np.random.Philox(key=[801, 0]))
    for _ in range(20):
        x, u = _interior_sample(rng, model)
        A, B = jacobians(model, x, u)
        for d in range(model.n_x):
            h = 1e-6 * max(1.0, abs(x[d]))
            xp, xm = x.copy(), x.copy()
            xp[d] += h
            xm[d] -= h
            col = (deterministic_mean(model, xp, u) - deterministic_mean(model, xm, u)) / (2 * h)
            assert np.max(np.abs(col - A[:, d])) < 1e-5 * max(1.0, np.max(np.abs(A[:, d])))
        for d in range(model.n_u):
            h = 1e-6 * max(1.0, abs(u[d]))
            up, um = u.copy(), u.copy()
            up[d] += h
            um[d] -= h
            col = (deterministic_mean(model, x, up) - deterministic_mean(model, x, um)) / (2 * h)
            assert np.max(np.abs(col - B[:, d])) < 1e-5 * max(1.0, np.max(np.abs(B[:, d])))


@pytest.mark.parametrize(
    "factory", [double_integrator, mountain_car, dubins_car]
)
def test_linearize_exact_at_expansion_point(factory):
    model = factory()
    rng = np.random.Generator(np.random.Philox(key=[802, 0]))
    for _ in range(10):
        x, u = _interior_sample(rng, model)
        aff = linearize(model, x, u)
        pred = aff.A @ x + aff.B @ u + aff.c
        assert np.max(np.abs(pred - deterministic_mean(model, x, u))) < 1e-12


def test_linearize_is_globally_exact_for_affine_dynamics():
    model = double_integrator()
    aff = linearize(model, np.array([3.0, -2.0]), np.array([1.0]))
    rng = np.random.Generator(np.random.Philox(key=[803, 0]))
    for _ in range(20):
        x = rng.uniform(-20.0, 20.0, size=2)
        u = rng.uniform(-5.0, 5.0, size=1)
        pred = aff.A @ x + aff.B @ u + aff.c
        assert np.max(np.abs(pred - deterministic_mean(model, x, u))) < 1e-12


def test_pwa_table_covers_cells_by_label():
    model = dubins_car()
    partition = build_partition(model, (20, 20, 11))
    actions = build_action_set(model, (7, 5), np.array([0.15, 0.3]))
    action = np.where(
        partition.labels[: partition.num_cells + 1] == NEUTRAL, 3, -1
    ).astype(np.int64)
    policy = RobustPolicy(action=action, lam=0.0)
    table = pwa_table(model, partition, actions, policy)
    assert len(table) == partition.num_cells
    u_mid = model.input_box.center
    for i in range(partition.num_cells):
        label = partition.labels[i]
        if label == UNSAFE:
            assert table[i] is None
            continue
        aff = table[i]
        assert aff.cell == i
        u_bar = actions.ball(3).center if label == NEUTRAL else u_mid
        want = linearize(model, cell_center(partition, i), u_bar, cell=i)
        assert np.array_equal(aff.A, want.A)
        assert np.array_equal(aff.c, want.c)
    labels = partition.labels[: partition.num_cells]
    assert np.all([table[i] is not None for i in np.flatnonzero(labels == GOAL)])


def test_pwa_table_rejects_missing_action():
    model = double_integrator()
    partition = build_partition(model, (21, 21))
    actions = build_action_set(model, (5,), np.array([0.0]))
    action = np.full(partition.num_cells + 1, -1, dtype=np.int64)
    policy = RobustPolicy(action=action, lam=0.0)
    with pytest.raises(ContractViolation):
        pwa_table(model, partition, actions, policy)

"""Grid partition: indexing, labels, alignment contract."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from setmpc.dynamics import Box, double_integrator, dubins_car, mountain_car
from setmpc.errors import LabelAlignmentError
from setmpc.partition import (
    GOAL,
    NEUTRAL,
    UNSAFE,
    build_partition,
    cell_bounds,
    cell_center,
    goal_cell_centers,
    locate,
    locate_many,
)


@pytest.fixture(scope="module")
def di_part():
    return build_partition(double_integrator(), (21, 21))


def test_counts_and_outside_index(di_part):
    assert tuple(di_part.per_dim_counts) == (21, 21)
    assert di_part.num_cells == 441
    assert di_part.outside_index == 441
    assert di_part.labels.shape[0] == 442


def test_di_labels(di_part):
    # goal [-5,5]x[-3,3] covers 5x3 cells of width 2
    assert int(np.sum(di_part.labels == GOAL)) == 15
    assert int(np.sum(di_part.labels == UNSAFE)) == 1  # outside only
    assert di_part.labels[di_part.outside_index] == UNSAFE
    assert int(np.sum(di_part.labels == NEUTRAL)) == 441 - 15


def test_goal_cell_centers(di_part):
    centers, cells = goal_cell_centers(di_part)
    assert centers.shape == (15, 2)
    assert np.all(np.abs(centers[:, 0]) <= 4.0)
    assert np.all(np.abs(centers[:, 1]) <= 2.0)
    for c, i in zip(centers, cells):
        assert locate(di_part, c) == i
        assert di_part.labels[i] == GOAL


def test_locate_matches_bounds(di_part):
    r = np.random.Generator(np.random.Philox(key=[3, 0]))
    for _ in range(200):
        x = r.uniform(-21, 21, size=2)
        i = locate(di_part, x)
        lo, hi = cell_bounds(di_part, i)
        assert np.all(x >= lo - 1e-12) and np.all(x <= hi + 1e-12)


def test_locate_outside(di_part):
    assert locate(di_part, [30.0, 0.0]) == di_part.outside_index
    assert locate(di_part, [0.0, -21.5]) == di_part.outside_index


def test_locate_many_agrees(di_part):
    r = np.random.Generator(np.random.Philox(key=[4, 0]))
    X = r.uniform(-25, 25, size=(300, 2))
    ids = locate_many(di_part, X)
    assert ids.tolist() == [locate(di_part, x) for x in X]


def test_lower_edge_inclusive(di_part):
    # interior shared edges belong to the upper cell; the domain's top edge
    # stays in the topmost cell
    i = locate(di_part, [-21.0 + 2.0, 0.1])
    lo, _ = cell_bounds(di_part, i)
    assert lo[0] == pytest.approx(-19.0)
    top = locate(di_part, [21.0, 21.0])
    assert top != di_part.outside_index


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 440))
def test_center_roundtrip(di_part, i):
    assert locate(di_part, cell_center(di_part, i)) == i


def test_misaligned_goal_rejected():
    model = double_integrator(goal_box=Box([-4.0, -2.0], [4.0, 2.0]))
    with pytest.raises(LabelAlignmentError):
        build_partition(model, (21, 21))


def test_misaligned_obstacle_rejected():
    model = dubins_car(
        unsafe_boxes=(Box([0.3, 0.0, -math.pi], [2.0, 2.0, math.pi]),)
    )
    with pytest.raises(LabelAlignmentError):
        build_partition(model, (20, 20, 11))


def test_dubins_partition_wrap_dim():
    part = build_partition(dubins_car(), (20, 20, 11))
    assert part.num_cells == 20 * 20 * 11
    # the heading seam maps into the grid, not outside
    for theta in (-math.pi, math.pi, math.pi - 1e-9):
        i = locate(part, [0.5, 0.5, theta])
        assert i != part.outside_index
    # +pi and -pi are the same angle, hence the same cell
    a = locate(part, [0.5, 0.5, -math.pi])
    b = locate(part, [0.5, 0.5, math.pi])
    assert a == b
    # goal spans the full heading range: 5x5 position block x 11 headings
    assert int(np.sum(part.labels == GOAL)) == 25 * 11
    # obstacle block 2x2 position x 11 headings
    assert int(np.sum(part.labels == UNSAFE)) == 4 * 11 + 1


def test_mountain_car_partition():
    part = build_partition(mountain_car(), (360, 140))
    assert part.num_cells == 360 * 140
    # goal: p in [0.45, 0.6] = 30 position cells, all 140 velocity cells
    assert int(np.sum(part.labels == GOAL)) == 30 * 140
    i = locate(part, [-0.5, 0.0])
    lo, hi = cell_bounds(part, i)
    assert lo[0] <= -0.5 <= hi[0]


def test_cell_bounds_tile_domain(di_part):
    los = np.array([cell_bounds(di_part, i)[0] for i in range(441)])
    his = np.array([cell_bounds(di_part, i)[1] for i in range(441)])
    assert np.min(los) == pytest.approx(-21.0)
    assert np.max(his) == pytest.approx(21.0)
    widths = his - los
    assert np.allclose(widths, 2.0)

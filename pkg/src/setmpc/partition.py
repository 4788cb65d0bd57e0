"""Uniform rectangular partition of the state box, the state-to-cell map,
and per-cell bounds.

Cells are half-open [lo, hi) in every dimension except the topmost cell per
dimension, which is closed; points outside the state box map to a single
absorbing outside cell with index `num_cells`. Goal/unsafe boxes must align
with cell edges so every cell carries a single label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import Box, SystemModel, wrap_angle
from .errors import ContractViolation, LabelAlignmentError

NEUTRAL, GOAL, UNSAFE = 0, 1, 2


@dataclass(frozen=True)
class Partition:
    """Uniform grid over the state box plus one absorbing outside cell."""

    per_dim_counts: tuple
    per_dim_edges: tuple
    state_box: Box
    wrap_dims: tuple
    labels: np.ndarray  # length num_cells + 1, values NEUTRAL/GOAL/UNSAFE

    @property
    def num_cells(self):
        return int(np.prod(self.per_dim_counts))

    @property
    def outside_index(self):
        return self.num_cells

    @property
    def num_states(self):
        return self.num_cells + 1

    @property
    def widths(self):
        return np.array(
            [e[1] - e[0] for e in self.per_dim_edges]
        )

    @property
    def goal_cells(self):
        return np.flatnonzero(self.labels == GOAL)

    @property
    def unsafe_cells(self):
        return np.flatnonzero(self.labels == UNSAFE)

    def multi_index(self, i):
        return np.unravel_index(i, self.per_dim_counts)

    def flat_index(self, idx):
        return int(np.ravel_multi_index(idx, self.per_dim_counts))


def _edge_index(edges, value, what):
    """Index of the edge equal to value, or LabelAlignmentError."""
    scale = max(1.0, abs(edges[-1] - edges[0]))
    j = int(np.argmin(np.abs(edges - value)))
    if abs(edges[j] - value) > 1e-9 * scale:
        raise LabelAlignmentError(
            f"{what} boundary {value} does not align with partition edges"
        )
    return j


def _box_cell_ranges(partition: Partition, box: Box, what):
    """Per-dimension [i_lo, i_hi) cell index ranges covered by an aligned box."""
    ranges = []
    for d, edges in enumerate(partition.per_dim_edges):
        i0 = _edge_index(edges, box.lo[d], what)
        i1 = _edge_index(edges, box.hi[d], what)
        if i1 <= i0:
            return None  # degenerate slice, no cells
        ranges.append((i0, i1))
    return ranges


def _mark_cells(labels_grid, ranges, value):
    sl = tuple(slice(i0, i1) for i0, i1 in ranges)
    labels_grid[sl] = value


def build_partition(model: SystemModel, counts) -> Partition:
    """Uniform partition with label-preserving goal/unsafe cells.

    Raises LabelAlignmentError when a goal or unsafe box boundary falls
    strictly inside a cell.
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) != model.n_x or any(c < 1 for c in counts):
        raise ContractViolation(f"bad partition counts {counts}")
    edges = tuple(
        np.linspace(model.state_box.lo[d], model.state_box.hi[d], counts[d] + 1)
        for d in range(model.n_x)
    )

    labels_grid = np.zeros(counts, dtype=np.int8)
    part = Partition(counts, edges, model.state_box, model.wrap_dims, labels_grid)

    goal_ranges = _box_cell_ranges(part, model.goal_box, "goal box")
    if goal_ranges is None:
        raise ContractViolation("goal box covers no cells")
    for ub in model.unsafe_boxes:
        clipped = ub.intersect(model.state_box)
        if clipped is None:
            continue
        r = _box_cell_ranges(part, clipped, "unsafe box")
        if r is not None:
            _mark_cells(labels_grid, r, UNSAFE)
    goal_view = labels_grid[tuple(slice(i0, i1) for i0, i1 in goal_ranges)]
    if np.any(goal_view == UNSAFE):
        raise ContractViolation("goal and unsafe boxes overlap")
    _mark_cells(labels_grid, goal_ranges, GOAL)

    labels = np.concatenate(
        [
            labels_grid.reshape(-1),
            [UNSAFE if model.outside_unsafe else NEUTRAL],
        ]
    ).astype(np.int8)
    return Partition(counts, edges, model.state_box, model.wrap_dims, labels)


def locate(partition: Partition, x) -> int:
    """Cell index of x; points outside the state box map to the outside cell.

    Interior boundary points resolve to the higher-index neighbor (half-open
    cells), the topmost cell per dimension is closed.
    """
    x = np.asarray(x, dtype=float)
    idx = []
    for d, edges in enumerate(partition.per_dim_edges):
        xd = float(x[d])
        if d in partition.wrap_dims:
            xd = float(wrap_angle(xd))
        if xd < edges[0] or xd > edges[-1]:
            return partition.outside_index
        i = int(np.searchsorted(edges, xd, side="right")) - 1
        idx.append(min(i, partition.per_dim_counts[d] - 1))
    return partition.flat_index(tuple(idx))


def locate_many(partition: Partition, X) -> np.ndarray:
    """Vectorized locate over rows of X, shape (n, n_x)."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    flat = np.zeros(n, dtype=np.int64)
    outside = np.zeros(n, dtype=bool)
    for d, edges in enumerate(partition.per_dim_edges):
        xd = X[:, d]
        if d in partition.wrap_dims:
            xd = wrap_angle(xd)
        outside |= (xd < edges[0]) | (xd > edges[-1])
        i = np.searchsorted(edges, xd, side="right") - 1
        i = np.minimum(i, partition.per_dim_counts[d] - 1)
        flat = flat * partition.per_dim_counts[d] + np.maximum(i, 0)
    flat[outside] = partition.outside_index
    return flat


def cell_bounds(partition: Partition, i):
    """(min, max) corner vectors of interior cell i."""
    if not (0 <= i < partition.num_cells):
        raise ContractViolation(f"cell {i} is not an interior cell")
    idx = partition.multi_index(i)
    lo = np.array(
        [partition.per_dim_edges[d][idx[d]] for d in range(len(idx))]
    )
    hi = np.array(
        [partition.per_dim_edges[d][idx[d] + 1] for d in range(len(idx))]
    )
    return lo, hi


def cell_center(partition: Partition, i):
    lo, hi = cell_bounds(partition, i)
    return 0.5 * (lo + hi)


def all_cell_bounds(partition: Partition):
    """(lo, hi) arrays of shape (num_cells, n_x) for all interior cells."""
    n_x = len(partition.per_dim_counts)
    grids_lo = np.meshgrid(
        *[partition.per_dim_edges[d][:-1] for d in range(n_x)], indexing="ij"
    )
    grids_hi = np.meshgrid(
        *[partition.per_dim_edges[d][1:] for d in range(n_x)], indexing="ij"
    )
    lo = np.stack([g.reshape(-1) for g in grids_lo], axis=1)
    hi = np.stack([g.reshape(-1) for g in grids_hi], axis=1)
    return lo, hi


def is_topmost(partition: Partition, d, cell_idx_d):
    return cell_idx_d == partition.per_dim_counts[d] - 1


def goal_cell_centers(partition: Partition):
    """Centers of all goal cells, shape (n_goal, n_x), plus their indices."""
    idx = partition.goal_cells
    if idx.size == 0:
        return np.zeros((0, len(partition.per_dim_counts))), idx
    centers = np.stack([cell_center(partition, int(i)) for i in idx])
    return centers, idx

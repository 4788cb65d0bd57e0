"""Interval-MDP abstraction of a stochastic system over a grid partition.

Actions are L-infinity balls around gridded input centers. Transition
probability intervals are products of per-dimension bounds on the Gaussian
mass a cell can receive from any mean in the action's forward image box.
"""

from dataclasses import dataclass

import numpy as np

from .dynamics import Box, SystemModel, mean_image_intervals
from .errors import ContractViolation, InfeasibleAmbiguitySet
from .partition import GOAL, UNSAFE, all_cell_bounds, cell_bounds, locate
from . import _kernels

PRUNE_THRESHOLD = 1e-8
WINDOW_SIGMAS = 6.0
# mass a 6-sigma candidate window can miss, per noisy dimension
TAIL_PER_DIM = 2.0 * _kernels._phi.py_func(-WINDOW_SIGMAS)


@dataclass(frozen=True)
class ActionSet:
    """Gridded input centers with a common L-infinity radius per dimension."""

    centers: np.ndarray
    epsilon: np.ndarray
    input_box: Box

    def __post_init__(self):
        object.__setattr__(
            self, "centers", np.atleast_2d(np.asarray(self.centers, dtype=float))
        )
        object.__setattr__(
            self, "epsilon", np.atleast_1d(np.asarray(self.epsilon, dtype=float))
        )
        if self.centers.shape[1] != self.input_box.dim:
            raise ContractViolation(
                "action centers have dimension "
                f"{self.centers.shape[1]}, input box has {self.input_box.dim}"
            )
        if self.epsilon.shape[0] != self.input_box.dim:
            raise ContractViolation(
                f"epsilon has dimension {self.epsilon.shape[0]}, "
                f"input box has {self.input_box.dim}"
            )
        if np.any(self.epsilon < 0.0):
            raise ContractViolation("epsilon must be nonnegative")

    @property
    def num_actions(self):
        return self.centers.shape[0]

    def ball(self, a):
        """Input set of action a: the epsilon-ball around its center,
        clipped to the admissible input box."""
        lo = np.maximum(self.centers[a] - self.epsilon, self.input_box.lo)
        hi = np.minimum(self.centers[a] + self.epsilon, self.input_box.hi)
        return Box(lo, hi)


def build_action_set(model, counts, epsilon):
    """Grid `counts` centers per input dimension (midpoint when one)."""
    counts = np.atleast_1d(np.asarray(counts, dtype=int))
    epsilon = np.broadcast_to(
        np.atleast_1d(np.asarray(epsilon, dtype=float)), (model.n_u,)
    ).copy()
    if counts.shape[0] != model.n_u:
        raise ContractViolation(
            f"need {model.n_u} per-dimension action counts, got {counts.shape[0]}"
        )
    if np.any(counts < 1):
        raise ContractViolation("action counts must be positive")
    axes = []
    for d in range(model.n_u):
        lo = model.input_box.lo[d]
        hi = model.input_box.hi[d]
        if counts[d] == 1:
            axes.append(np.array([0.5 * (lo + hi)]))
        else:
            axes.append(np.linspace(lo, hi, counts[d]))
    grids = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([g.reshape(-1) for g in grids], axis=1)
    return ActionSet(centers=centers, epsilon=epsilon, input_box=model.input_box)


def interface_set(actions, a):
    """Certified input set handed to the online controller for action a."""
    return actions.ball(a)


@dataclass(frozen=True)
class Imdp:
    """Interval MDP over partition states plus the outside state.

    Terminal states (goal, unsafe, outside) have a single self-loop action.
    Non-terminal rows live in one CSR block: row r*num_actions + a holds the
    interval distribution of the r-th neutral state under action a."""

    num_states: int
    num_actions: int
    labels: np.ndarray
    initial_state: int
    neutral_states: np.ndarray
    state_rank: np.ndarray
    row_ptr: np.ndarray
    cols: np.ndarray
    p_lo: np.ndarray
    p_hi: np.ndarray

    @property
    def goal_states(self):
        return np.flatnonzero(self.labels == GOAL)

    @property
    def unsafe_states(self):
        return np.flatnonzero(self.labels == UNSAFE)

    def is_terminal(self, s):
        return self.state_rank[s] < 0

    def transitions(self, s, a):
        """Interval distribution of (s, a) as a list of (target, lo, hi)."""
        if s < 0 or s >= self.num_states:
            raise ContractViolation(f"state {s} out of range")
        if self.state_rank[s] < 0:
            if a != 0:
                raise ContractViolation(
                    f"terminal state {s} has a single action, got {a}"
                )
            return [(s, 1.0, 1.0)]
        if a < 0 or a >= self.num_actions:
            raise ContractViolation(f"action {a} out of range")
        r = self.state_rank[s] * self.num_actions + a
        lo = self.row_ptr[r]
        hi = self.row_ptr[r + 1]
        return [
            (int(self.cols[k]), float(self.p_lo[k]), float(self.p_hi[k]))
            for k in range(lo, hi)
        ]

    def available_actions(self, s):
        return 1 if self.state_rank[s] < 0 else self.num_actions


def imdp_from_rows(num_states, num_actions, labels, initial_state, rows):
    """Assemble an Imdp from explicit rows, for tests and small examples.

    rows maps (s, a) -> list of (target, p_lo, p_hi) for every non-terminal
    state s and action a. Terminal states (any label != neutral) must not
    appear."""
    labels = np.asarray(labels, dtype=np.int8)
    neutral = np.flatnonzero(labels == 0).astype(np.int64)
    rank = np.full(num_states, -1, dtype=np.int64)
    rank[neutral] = np.arange(neutral.shape[0])
    n_rows = neutral.shape[0] * num_actions
    row_ptr = np.zeros(n_rows + 1, dtype=np.int64)
    cols, plo, phi = [], [], []
    for r, s in enumerate(neutral):
        for a in range(num_actions):
            entries = rows[(int(s), a)]
            for t, lo, hi in entries:
                cols.append(t)
                plo.append(lo)
                phi.append(hi)
            row_ptr[r * num_actions + a + 1] = len(cols)
    imdp = Imdp(
        num_states=num_states,
        num_actions=num_actions,
        labels=labels,
        initial_state=initial_state,
        neutral_states=neutral,
        state_rank=rank,
        row_ptr=row_ptr,
        cols=np.asarray(cols, dtype=np.int32),
        p_lo=np.asarray(plo, dtype=float),
        p_hi=np.asarray(phi, dtype=float),
    )
    validate_imdp(imdp)
    return imdp


def validate_imdp(imdp):
    """Check interval sanity: 0 <= lo <= hi <= 1, sum lo <= 1 <= sum hi."""
    if np.any(imdp.p_lo < -1e-15) or np.any(imdp.p_hi > 1.0 + 1e-12):
        raise InfeasibleAmbiguitySet("transition bounds leave [0, 1]")
    if np.any(imdp.p_lo > imdp.p_hi + 1e-15):
        raise InfeasibleAmbiguitySet("lower transition bound exceeds upper")
    n_rows = imdp.row_ptr.shape[0] - 1
    for r in range(n_rows):
        lo = imdp.row_ptr[r]
        hi = imdp.row_ptr[r + 1]
        s_lo = float(np.sum(imdp.p_lo[lo:hi]))
        s_hi = float(np.sum(imdp.p_hi[lo:hi]))
        if s_lo > 1.0 + 1e-9:
            raise InfeasibleAmbiguitySet(
                f"row {r}: lower bounds sum to {s_lo:.12f} > 1"
            )
        if s_hi < 1.0 - 1e-9:
            raise InfeasibleAmbiguitySet(
                f"row {r}: upper bounds sum to {s_hi:.12f} < 1"
            )


def _dim_factor(model, d, mlo, mhi, a, b, closed_top, censor_lo=False,
                censor_hi=False):
    """Reference per-dimension factor bounds, mirroring the compiled path."""
    sigma = model.noise_std[d]
    if sigma > 0.0:
        if d in model.wrap_dims:
            return _kernels._wrapped_factor.py_func(mlo, mhi, a, b, sigma)
        fl = _kernels._noisy_factor.py_func(mlo, mhi, a, b, sigma)[0]
        ah = a - _kernels.CENSOR_PAD if censor_lo else a
        bh = b + _kernels.CENSOR_PAD if censor_hi else b
        fh = _kernels._noisy_factor.py_func(mlo, mhi, ah, bh, sigma)[1]
        return fl, fh
    return _kernels._det_factor.py_func(mlo, mhi, a, b, closed_top)


def _clip_mass_hi(model, mlo, mhi):
    """Upper bound on the probability that any clamped dimension saturates,
    over all means in the image box."""
    pclip = 0.0
    for d in model.clamp_dims:
        sigma = model.noise_std[d]
        if sigma <= 0.0:
            raise ContractViolation(
                f"clamped dimension {d} needs additive noise"
            )
        z_hi = (model.state_box.hi[d] - mhi[d]) / sigma
        z_lo = (model.state_box.lo[d] - mlo[d]) / sigma
        pclip += 1.0 - _kernels._phi.py_func(z_hi)
        pclip += _kernels._phi.py_func(z_lo)
    return pclip


def transition_interval(model, partition, s, ball, s_target):
    """Probability interval for reaching cell s_target from cell s when the
    input ranges over `ball`. Reference implementation, one pair at a time."""
    lo_cell, hi_cell = cell_bounds(partition, s)
    mlo, mhi = mean_image_intervals(
        model, lo_cell[None, :], hi_cell[None, :], ball
    )
    mlo, mhi = mlo[0], mhi[0]
    pclip = _clip_mass_hi(model, mlo, mhi)
    if s_target == partition.outside_index:
        in_lo, in_hi = 1.0, 1.0
        for d in range(model.n_x):
            if d in model.wrap_dims or d in model.clamp_dims:
                continue
            fl, fh = _dim_factor(
                model,
                d,
                mlo[d],
                mhi[d],
                model.state_box.lo[d],
                model.state_box.hi[d],
                True,
            )
            in_lo *= fl
            in_hi *= fh
        return max(0.0, 1.0 - in_hi - pclip), min(1.0, 1.0 - in_lo + pclip)
    tgt_lo, tgt_hi = cell_bounds(partition, s_target)
    midx = partition.multi_index(s_target)
    p_lo, p_hi = 1.0, 1.0
    for d in range(model.n_x):
        closed_top = midx[d] == partition.per_dim_counts[d] - 1
        clamped = d in model.clamp_dims
        fl, fh = _dim_factor(
            model, d, mlo[d], mhi[d], tgt_lo[d], tgt_hi[d], closed_top,
            censor_lo=clamped and midx[d] == 0,
            censor_hi=clamped and closed_top,
        )
        p_lo *= fl
        p_hi *= fh
    return p_lo, min(1.0, p_hi + pclip)


def _candidate_windows(model, partition, mlo, mhi):
    """Per-cell per-dim half-open index windows of candidate target cells."""
    n_cells = mlo.shape[0]
    n_x = model.n_x
    win_lo = np.empty((n_cells, n_x), dtype=np.int64)
    win_hi = np.empty((n_cells, n_x), dtype=np.int64)
    for d in range(n_x):
        edges = partition.per_dim_edges[d]
        count = partition.per_dim_counts[d]
        if d in model.wrap_dims:
            win_lo[:, d] = 0
            win_hi[:, d] = count
            continue
        sigma = model.noise_std[d]
        pad = WINDOW_SIGMAS * sigma
        lo_w = mlo[:, d] - pad
        hi_w = mhi[:, d] + pad
        i0 = np.searchsorted(edges, lo_w, side="right") - 1
        i1 = np.searchsorted(edges, hi_w, side="left")
        if sigma == 0.0:
            # widen so the exact overlap test inside the kernel decides
            i0 = i0 - 1
            i1 = i1 + 1
        if d in model.clamp_dims:
            # saturation pushes mass onto the edge cells, so the window
            # must always contain the nearest one
            i0 = np.clip(i0, 0, count - 1)
            i1 = np.clip(i1, i0 + 1, count)
        win_lo[:, d] = np.clip(i0, 0, count)
        win_hi[:, d] = np.clip(i1, 0, count)
    return win_lo, win_hi


def estimate_transition_count(model, partition, actions):
    """Upper bound on the number of explicit transition entries, from the
    candidate window sizes alone. Cheap; used to pick the build path."""
    L = partition.num_cells
    neutral_cells = np.flatnonzero(partition.labels[:L] == 0).astype(np.int64)
    lo_all, hi_all = all_cell_bounds(partition)
    cells_lo = lo_all[neutral_cells]
    cells_hi = hi_all[neutral_cells]
    total = 0
    for a in range(actions.num_actions):
        ball = actions.ball(a)
        mlo, mhi = mean_image_intervals(model, cells_lo, cells_hi, ball)
        win_lo, win_hi = _candidate_windows(model, partition, mlo, mhi)
        total += int(np.sum(np.prod(win_hi - win_lo, axis=1) + 1))
    return total


def build_imdp(model, partition, actions, prune=PRUNE_THRESHOLD):
    """Abstract the system into an interval MDP over the partition."""
    L = partition.num_cells
    num_states = partition.num_states
    labels = partition.labels
    neutral_cells = np.flatnonzero(labels[:L] == 0).astype(np.int64)
    n_neutral = neutral_cells.shape[0]
    M = actions.num_actions

    lo_all, hi_all = all_cell_bounds(partition)
    cells_lo = lo_all[neutral_cells]
    cells_hi = hi_all[neutral_cells]

    n_x = model.n_x
    counts = np.asarray(partition.per_dim_counts, dtype=np.int64)
    max_edges = int(counts.max()) + 1
    edges_pad = np.zeros((n_x, max_edges))
    for d in range(n_x):
        edges_pad[d, : counts[d] + 1] = partition.per_dim_edges[d]
    strides = np.ones(n_x, dtype=np.int64)
    for d in range(n_x - 2, -1, -1):
        strides[d] = strides[d + 1] * counts[d + 1]
    wrap_mask = np.zeros(n_x, dtype=np.bool_)
    for d in model.wrap_dims:
        wrap_mask[d] = True
    clamp_mask = np.zeros(n_x, dtype=np.bool_)
    for d in model.clamp_dims:
        if model.noise_std[d] <= 0.0:
            raise ContractViolation(
                f"clamped dimension {d} needs additive noise"
            )
        clamp_mask[d] = True
    sigma = model.noise_std.copy()
    n_noisy = int(np.count_nonzero(sigma > 0.0))
    tail_allow = n_noisy * TAIL_PER_DIM

    per_action = []
    for a in range(M):
        ball = actions.ball(a)
        mlo, mhi = mean_image_intervals(model, cells_lo, cells_hi, ball)
        win_lo, win_hi = _candidate_windows(model, partition, mlo, mhi)
        cap_per_cell = np.prod(win_hi - win_lo, axis=1) + 1
        offsets = np.zeros(n_neutral + 1, dtype=np.int64)
        np.cumsum(cap_per_cell, out=offsets[1:])
        cap = int(offsets[-1])
        cols_buf = np.empty(cap, dtype=np.int32)
        plo_buf = np.empty(cap)
        phi_buf = np.empty(cap)
        row_counts = np.zeros(n_neutral, dtype=np.int64)
        bad = _kernels.build_rows(
            mlo,
            mhi,
            sigma,
            wrap_mask,
            clamp_mask,
            edges_pad,
            counts,
            model.state_box.lo,
            model.state_box.hi,
            win_lo,
            win_hi,
            offsets[:-1],
            strides,
            prune,
            tail_allow,
            L,
            cols_buf,
            plo_buf,
            phi_buf,
            row_counts,
        )
        if bad >= 0:
            raise InfeasibleAmbiguitySet(
                f"cell {int(neutral_cells[bad])}, action {a}: upper bounds "
                "sum below 1"
            )
        keep = np.repeat(offsets[:-1], row_counts) + _within_row(row_counts)
        per_action.append(
            (cols_buf[keep].copy(), plo_buf[keep].copy(), phi_buf[keep].copy(),
             row_counts)
        )
        del cols_buf, plo_buf, phi_buf

    # interleave per-action blocks into one state-major CSR
    row_len = np.empty(n_neutral * M, dtype=np.int64)
    for a in range(M):
        row_len[a::M] = per_action[a][3]
    row_ptr = np.zeros(n_neutral * M + 1, dtype=np.int64)
    np.cumsum(row_len, out=row_ptr[1:])
    total = int(row_ptr[-1])
    cols = np.empty(total, dtype=np.int32)
    p_lo = np.empty(total)
    p_hi = np.empty(total)
    for a in range(M):
        a_cols, a_plo, a_phi, a_counts = per_action[a]
        dest = np.repeat(row_ptr[a:-1:M], a_counts) + _within_row(a_counts)
        cols[dest] = a_cols
        p_lo[dest] = a_plo
        p_hi[dest] = a_phi

    rank = np.full(num_states, -1, dtype=np.int64)
    rank[neutral_cells] = np.arange(n_neutral)
    initial_state = int(locate(partition, model.initial_state))
    imdp = Imdp(
        num_states=num_states,
        num_actions=M,
        labels=labels.copy(),
        initial_state=initial_state,
        neutral_states=neutral_cells,
        state_rank=rank,
        row_ptr=row_ptr,
        cols=cols,
        p_lo=p_lo,
        p_hi=p_hi,
    )
    np.clip(imdp.p_lo, 0.0, 1.0, out=imdp.p_lo)
    np.clip(imdp.p_hi, 0.0, 1.0, out=imdp.p_hi)
    return imdp


def _within_row(counts):
    """[0..counts[0]-1, 0..counts[1]-1, ...] as one flat array."""
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    ends = np.cumsum(counts)
    out = np.arange(total, dtype=np.int64)
    out -= np.repeat(ends - counts, counts)
    return out


def export_imdp(imdp, path):
    """Write the interval MDP in a plain line-oriented text format."""
    term = np.flatnonzero(imdp.state_rank < 0)
    n_term = term.shape[0]
    total = int(imdp.row_ptr[-1]) + n_term
    with open(path, "w", newline="\n") as fh:
        fh.write(f"states {imdp.num_states}\n")
        fh.write(f"actions {imdp.num_actions}\n")
        fh.write(f"initial {imdp.initial_state}\n")
        goal = " ".join(str(int(s)) for s in imdp.goal_states)
        unsafe = " ".join(str(int(s)) for s in imdp.unsafe_states)
        fh.write(f"label goal {goal}\n".replace(" \n", "\n"))
        fh.write(f"label unsafe {unsafe}\n".replace(" \n", "\n"))
        fh.write(f"transitions {total}\n")
        for r, s in enumerate(imdp.neutral_states):
            base = r * imdp.num_actions
            for a in range(imdp.num_actions):
                lo = imdp.row_ptr[base + a]
                hi = imdp.row_ptr[base + a + 1]
                for k in range(lo, hi):
                    fh.write(
                        f"{int(s)} {a} {int(imdp.cols[k])} "
                        f"{imdp.p_lo[k]:.17g} {imdp.p_hi[k]:.17g}\n"
                    )
        for s in term:
            fh.write(f"{int(s)} 0 {int(s)} 1 1\n")

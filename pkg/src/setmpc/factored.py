"""Memory-bounded abstraction for large two-dimensional grids.

The explicit transition-list abstraction stores one entry per (cell, action,
target) triple. On fine grids with wide noise kernels that is infeasible:
the mountain car at 360x140 cells would need billions of entries. This
module exploits the product structure of the per-dimension bounds: each
row's lower transition bounds factor into a position vector times a
velocity vector. Position factor vectors are shared between rows by
snapping the position mean interval outward onto a quarter-cell grid
(snapping widens the interval, so every shared factor is a valid lower
bound). Velocity factors are stored exactly, one short vector per row.

Value iteration then uses a sound relaxation of the interval backup: the
mandatory mass (the factored lower bounds) is applied exactly, and the
remaining budget is placed on the outside state up to its upper bound and
then on the worst (best, for the upper pass) value inside the row's
support, ignoring the per-target caps. Dropping the caps enlarges the
ambiguity set, so the lower value can only decrease and the upper value
can only increase: certificates remain valid, just slightly wider than
the explicit path would give."""

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import ndtr

from .dynamics import mean_image_intervals
from .errors import ContractViolation, NonConvergence
from .partition import GOAL, NEUTRAL, UNSAFE, all_cell_bounds, locate
from . import _kernels
from .abstraction import TAIL_PER_DIM, WINDOW_SIGMAS
from .imdp_synthesis import VI_MAX_ITERS, VI_TOL, RobustPolicy, ValueBounds

# position mean intervals are snapped outward onto this fraction of a cell
SNAP_DIV = 4


@dataclass(frozen=True)
class FactoredImdp:
    """Product-form interval abstraction of a 2-D system.

    Rows are (neutral cell, action) pairs in action-minor order. Row r has
    lower transition bounds kernel[class_id[r], j] * flv[r, vt] for target
    cell (start[r] + j, vt), an outside entry [plo_out[r], phi_out[r]],
    and upper bounds left implicit (only their row sums matter to the
    relaxed backup)."""

    num_p: int
    num_v: int
    num_actions: int
    labels: np.ndarray
    initial_state: int
    neutral_cells: np.ndarray
    cell_rank: np.ndarray
    kernels: np.ndarray
    kernel_sums: np.ndarray
    class_id: np.ndarray
    start: np.ndarray
    sum_flp: np.ndarray
    flv: np.ndarray
    sum_flv: np.ndarray
    plo_out: np.ndarray
    phi_out: np.ndarray

    @property
    def num_cells(self):
        return self.num_p * self.num_v

    @property
    def num_states(self):
        return self.num_cells + 1


def _snap_quanta(mlo, mhi, origin, h):
    """Snap [mlo, mhi] outward to the h-grid anchored at origin, returning
    integer quanta (lo index, width)."""
    qlo = np.floor((mlo - origin) / h + 1e-9).astype(np.int64)
    qhi = np.ceil((mhi - origin) / h - 1e-9).astype(np.int64)
    qhi = np.maximum(qhi, qlo + 1)
    return qlo, qhi - qlo


def build_factored(model, partition, actions):
    """Product-form abstraction for 2-D models: dimension 0 is free and
    noisy, dimension 1 is noisy and may clamp. No wrapped dimensions."""
    if model.n_x != 2:
        raise ContractViolation("factored abstraction needs a 2-D state")
    if model.wrap_dims:
        raise ContractViolation(
            "factored abstraction does not support wrapped dimensions"
        )
    if model.noise_std[0] <= 0.0 or model.noise_std[1] <= 0.0:
        raise ContractViolation(
            "factored abstraction needs additive noise in both dimensions"
        )
    if 0 in model.clamp_dims:
        raise ContractViolation(
            "factored abstraction supports clamping only in dimension 1"
        )
    clamp_v = 1 in model.clamp_dims

    n_p, n_v = (int(c) for c in partition.per_dim_counts)
    labels = partition.labels
    neutral_cells = np.flatnonzero(labels[: n_p * n_v] == NEUTRAL).astype(
        np.int64
    )
    n_neutral = neutral_cells.shape[0]
    M = actions.num_actions
    n_rows = n_neutral * M

    lo_all, hi_all = all_cell_bounds(partition)
    cells_lo = lo_all[neutral_cells]
    cells_hi = hi_all[neutral_cells]

    p_edges = partition.per_dim_edges[0]
    v_edges = partition.per_dim_edges[1]
    p0 = p_edges[0]
    dp = (p_edges[-1] - p_edges[0]) / n_p
    h = dp / SNAP_DIV
    sp = model.noise_std[0]
    sv = model.noise_std[1]
    box_lo = model.state_box.lo
    box_hi = model.state_box.hi

    flv = np.empty((n_rows, n_v))
    sum_flv = np.empty(n_rows)
    plo_out = np.empty(n_rows)
    phi_out = np.empty(n_rows)
    base_cells = np.empty(n_rows, dtype=np.int64)
    off_all = np.empty(n_rows, dtype=np.int64)
    qw_all = np.empty(n_rows, dtype=np.int64)
    tail_allow = 2.0 * TAIL_PER_DIM

    for a in range(M):
        ball = actions.ball(a)
        mlo, mhi = mean_image_intervals(model, cells_lo, cells_hi, ball)
        qlo, qw = _snap_quanta(mlo[:, 0], mhi[:, 0], p0, h)
        rows = np.arange(n_neutral) * M + a
        base_cells[rows] = qlo // SNAP_DIV
        off_all[rows] = qlo - (qlo // SNAP_DIV) * SNAP_DIV
        qw_all[rows] = qw
        _fill_v_rows(
            flv, sum_flv, plo_out, phi_out, rows,
            mlo, mhi, v_edges, sp, sv,
            box_lo, box_hi, clamp_v, tail_allow,
        )

    # one kernel per (offset, width) class, plus its clipped window sums
    keys, class_id = np.unique(off_all * 1000000 + qw_all,
                               return_inverse=True)
    offsets = keys // 1000000
    widths = keys % 1000000
    reach = int(np.ceil(WINDOW_SIGMAS * sp / dp)) + 1
    max_w = int(widths.max())
    klen = 2 * reach + (max_w + SNAP_DIV - 1) // SNAP_DIV + 2
    C = keys.shape[0]
    kernels = np.zeros((C, klen))
    for c in range(C):
        m_lo = offsets[c] * h
        m_hi = (offsets[c] + widths[c]) * h
        for j in range(klen):
            a_edge = (j - reach) * dp
            b_edge = a_edge + dp
            f_lo, _ = _kernels._noisy_factor.py_func(m_lo, m_hi, a_edge,
                                                     b_edge, sp)
            kernels[c, j] = f_lo
    ksum = np.zeros((C, klen + 1))
    np.cumsum(kernels, axis=1, out=ksum[:, 1:])

    start = base_cells - reach
    j0 = np.clip(-start, 0, klen)
    j1 = np.clip(n_p - start, 0, klen)
    j1 = np.maximum(j1, j0)
    sum_flp = ksum[class_id, j1] - ksum[class_id, j0]

    initial_state = int(locate(partition, model.initial_state))
    rank = np.full(n_p * n_v + 1, -1, dtype=np.int64)
    rank[neutral_cells] = np.arange(n_neutral)
    return FactoredImdp(
        num_p=n_p,
        num_v=n_v,
        num_actions=M,
        labels=labels.copy(),
        initial_state=initial_state,
        neutral_cells=neutral_cells,
        cell_rank=rank,
        kernels=kernels,
        kernel_sums=ksum,
        class_id=class_id,
        start=start,
        sum_flp=sum_flp,
        flv=flv,
        sum_flv=sum_flv,
        plo_out=plo_out,
        phi_out=phi_out,
    )


def _fill_v_rows(flv, sum_flv, plo_out, phi_out, rows, mlo, mhi, v_edges,
                 sp, sv, box_lo, box_hi, clamp_v, tail_allow):
    """Exact per-row velocity factors and outside-entry bounds."""
    mvlo = mlo[:, 1]
    mvhi = mhi[:, 1]
    n_v = v_edges.shape[0] - 1
    lo_e = _phi_arr((v_edges[:-1][None, :] - mvlo[:, None]) / sv)
    hi_e = _phi_arr((v_edges[1:][None, :] - mvlo[:, None]) / sv)
    bump_lo = hi_e - lo_e
    lo_e = _phi_arr((v_edges[:-1][None, :] - mvhi[:, None]) / sv)
    hi_e = _phi_arr((v_edges[1:][None, :] - mvhi[:, None]) / sv)
    bump_hi = hi_e - lo_e
    f = np.minimum(bump_lo, bump_hi)
    flv[rows] = f
    sum_flv[rows] = f.sum(axis=1)

    if clamp_v:
        pclip = (1.0 - _phi_arr((box_hi[1] - mvhi) / sv)) + _phi_arr(
            (box_lo[1] - mvlo) / sv
        )
    else:
        pclip = np.zeros_like(mvlo)
    # position factor over the whole state box bounds the in-box mass
    mplo = mlo[:, 0]
    mphi = mhi[:, 0]
    in_lo = np.minimum(
        _phi_arr((box_hi[0] - mplo) / sp) - _phi_arr((box_lo[0] - mplo) / sp),
        _phi_arr((box_hi[0] - mphi) / sp) - _phi_arr((box_lo[0] - mphi) / sp),
    )
    mid = np.clip(0.5 * (box_lo[0] + box_hi[0]), mplo, mphi)
    in_hi = _phi_arr((box_hi[0] - mid) / sp) - _phi_arr((box_lo[0] - mid) / sp)
    if not clamp_v:
        vin_lo = np.minimum(
            _phi_arr((box_hi[1] - mvlo) / sv)
            - _phi_arr((box_lo[1] - mvlo) / sv),
            _phi_arr((box_hi[1] - mvhi) / sv)
            - _phi_arr((box_lo[1] - mvhi) / sv),
        )
        vmid = np.clip(0.5 * (box_lo[1] + box_hi[1]), mvlo, mvhi)
        vin_hi = _phi_arr((box_hi[1] - vmid) / sv) - _phi_arr(
            (box_lo[1] - vmid) / sv
        )
        in_lo = in_lo * vin_lo
        in_hi = in_hi * vin_hi
    plo_out[rows] = np.maximum(0.0, 1.0 - in_hi - pclip)
    phi_out[rows] = np.minimum(1.0, (1.0 - in_lo) + pclip + tail_allow)


def _phi_arr(z):
    return ndtr(z)


@njit(cache=True)
def _factored_sweep(
    values,
    new_values,
    neutral_cells,
    num_actions,
    kernels,
    class_id,
    start,
    sum_flp,
    flv,
    sum_flv,
    plo_out,
    phi_out,
    policy,
    fixed_policy,
    maximize_adversary,
):
    """One Gauss-Jacobi sweep of the relaxed robust backup. values and
    new_values are (n_p, n_v) grids over in-box cells; terminal cells hold
    their fixed values. Returns the max residual over neutral cells."""
    n_p, n_v = values.shape
    C, klen = kernels.shape

    # contraction along the position axis, one slice per kernel class;
    # slot i + klen holds the window starting at cell i, so starts down
    # to -klen are addressable
    U = np.zeros((C, n_p + klen, n_v))
    for c in range(C):
        for i in range(-klen, n_p):
            for j in range(klen):
                t = i + j
                if t < 0 or t >= n_p:
                    continue
                k = kernels[c, j]
                if k == 0.0:
                    continue
                for vt in range(n_v):
                    U[c, i + klen, vt] += k * values[t, vt]

    # per-column extreme then sliding window extreme of width klen
    col_ext = np.empty(n_p)
    for i in range(n_p):
        e = values[i, 0]
        if maximize_adversary:
            for vt in range(1, n_v):
                if values[i, vt] > e:
                    e = values[i, vt]
        else:
            for vt in range(1, n_v):
                if values[i, vt] < e:
                    e = values[i, vt]
        col_ext[i] = e
    win_ext = np.empty(n_p)
    deque_idx = np.empty(n_p, dtype=np.int64)
    head = 0
    tail = 0
    for i in range(n_p):
        while tail > head and deque_idx[head] < i - (klen - 1):
            head += 1
        if maximize_adversary:
            while tail > head and col_ext[deque_idx[tail - 1]] <= col_ext[i]:
                tail -= 1
        else:
            while tail > head and col_ext[deque_idx[tail - 1]] >= col_ext[i]:
                tail -= 1
        deque_idx[tail] = i
        tail += 1
        win_ext[i] = col_ext[deque_idx[head]]
    # win_ext[i] = extreme over columns [i - klen + 1, i]; a row with
    # window [s, s + klen) clipped to the grid needs the extreme at
    # min(s + klen - 1, n_p - 1)

    residual = 0.0
    n_neutral = neutral_cells.shape[0]
    for idx in range(n_neutral):
        cell = neutral_cells[idx]
        pc = cell // n_v
        vc = cell % n_v
        best = -1.0
        best_a = -1
        if fixed_policy:
            a0 = policy[cell]
            a1 = a0 + 1
        else:
            a0 = 0
            a1 = num_actions
        for a in range(a0, a1):
            r = idx * num_actions + a
            c = class_id[r]
            s = start[r]
            mand = 0.0
            for vt in range(n_v):
                f = flv[r, vt]
                if f > 0.0:
                    mand += f * U[c, s + klen, vt]
            budget = 1.0 - sum_flp[r] * sum_flv[r] - plo_out[r]
            if budget < 0.0:
                budget = 0.0
            val = mand
            if maximize_adversary:
                ext = win_ext[min(s + klen - 1, n_p - 1)]
                val += budget * ext
            else:
                cap = phi_out[r] - plo_out[r]
                rest = budget - cap
                if rest > 0.0:
                    ext = win_ext[min(s + klen - 1, n_p - 1)]
                    val += rest * ext
            if val > 1.0:
                val = 1.0
            if val > best:
                best = val
                best_a = a
        new_values[pc, vc] = best
        if not fixed_policy:
            policy[cell] = best_a
        d = best - values[pc, vc]
        if d < 0.0:
            d = -d
        if d > residual:
            residual = d
    return residual


def _run_factored(fimdp, values, policy, fixed_policy, maximize_adversary,
                  tol, max_iters):
    new_values = values.copy()
    for it in range(1, max_iters + 1):
        residual = _factored_sweep(
            values,
            new_values,
            fimdp.neutral_cells,
            fimdp.num_actions,
            fimdp.kernels,
            fimdp.class_id,
            fimdp.start,
            fimdp.sum_flp,
            fimdp.flv,
            fimdp.sum_flv,
            fimdp.plo_out,
            fimdp.phi_out,
            policy,
            fixed_policy,
            maximize_adversary,
        )
        values, new_values = new_values, values
        if residual < tol:
            return values, it, residual
    raise NonConvergence(max_iters, residual)


def factored_value_iteration(fimdp, tol=VI_TOL, max_iters=VI_MAX_ITERS):
    """Robust reachability bounds and the certified policy, mirroring the
    explicit-path interface. Values are flat arrays over grid cells plus
    the outside state."""
    n_cells = fimdp.num_cells
    labels = fimdp.labels
    v0 = np.zeros((fimdp.num_p, fimdp.num_v))
    goal = labels[:n_cells] == GOAL
    v0.reshape(-1)[goal] = 1.0
    unsafe = labels[:n_cells] == UNSAFE

    policy = np.full(fimdp.num_states, -1, dtype=np.int64)
    v_lo_grid, it_lo, res_lo = _run_factored(
        fimdp, v0.copy(), policy, False, False, tol, max_iters
    )
    v_hi_grid, it_hi, res_hi = _run_factored(
        fimdp, v0.copy(), policy, True, True, tol, max_iters
    )

    v_lo = np.zeros(fimdp.num_states)
    v_hi = np.zeros(fimdp.num_states)
    v_lo[:n_cells] = v_lo_grid.reshape(-1)
    v_hi[:n_cells] = v_hi_grid.reshape(-1)
    v_lo[:n_cells][goal] = 1.0
    v_hi[:n_cells][goal] = 1.0
    v_lo[:n_cells][unsafe] = 0.0
    v_hi[:n_cells][unsafe] = 0.0
    np.maximum(v_hi, v_lo, out=v_hi)
    bounds = ValueBounds(
        v_lo=v_lo,
        v_hi=v_hi,
        iterations=it_lo + it_hi,
        residual=max(res_lo, res_hi),
    )
    lam = float(v_lo[fimdp.initial_state])
    return bounds, RobustPolicy(action=policy, lam=lam)

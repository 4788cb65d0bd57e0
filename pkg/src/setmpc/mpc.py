"""Online tracking MPC constrained to the certified input sets.

The controller minimizes a quadratic tracking cost over a piecewise affine
prediction of the mean dynamics. Region membership makes the problem mixed
integer; at the short horizons used here the binary part reduces to picking
one cell per predicted step, so the solver enumerates cell sequences depth
first with deterministic reachability pruning and convex lower bounds,
solving one box-constrained QP per complete sequence. In every outcome the
applied input lies in the certified input set of the synthesized policy at
the current cell (the set center is the fallback), so the offline
satisfaction bound carries over to the closed loop unchanged.

Angle dimensions are handled per branch with a chart shift: a cell entered
through the seam joins the sequence as its box translated by a multiple of
2*pi, with the affine offset adjusted so the model agrees on the shifted
chart. Tracking errors on angle dimensions are measured in the base chart;
the shipped benchmarks put zero tracking weight on angles, so the chart
choice never changes the cost.
"""

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np
from numba import njit

from .dynamics import Box
from .errors import ContractViolation, Infeasible
from .partition import GOAL, NEUTRAL, cell_bounds, cell_center, locate
from .pwa import AffineModel

TWO_PI = 2.0 * math.pi
STATE_TOL = 1.0e-6
QP_TOL = 1.0e-8
QP_MAX_ITERS = 10_000
_POWER_ITERS = 200


@dataclass(frozen=True)
class RegionData:
    """One mixed-integer region: state box, certified input box, model."""

    m_s: np.ndarray
    M_s: np.ndarray
    m_a: np.ndarray
    M_a: np.ndarray
    model: AffineModel


@dataclass(frozen=True)
class MiqpInstance:
    """Tracking MIQP at one control step.

    region_data maps each candidate cell to its RegionData; candidate_cells
    is the reachability-pruned selection set (always containing the cell of
    x_k, stored as root_cell)."""

    horizon: int
    x_k: np.ndarray
    r_k: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    region_data: dict
    candidate_cells: np.ndarray
    root_cell: int
    wrap_dims: tuple = ()
    successors: dict = None
    packed: tuple = None


@dataclass(frozen=True)
class MpcSolution:
    """Result of one MIQP solve.

    u0 lies in the certified input set of the current cell in every status;
    on infeasible_fallback it is the set center and the prediction arrays
    are empty."""

    u0: np.ndarray
    predicted_states: np.ndarray
    predicted_inputs: np.ndarray
    cost: float
    status: str
    solve_time: float
    explored_sequences: int
    cell_sequence: tuple = ()


def _weight_matrix(W, n, name):
    """Coerce a scalar/diagonal/full weight to a symmetric PSD matrix."""
    W = np.asarray(W, dtype=float)
    if W.ndim == 0:
        W = float(W) * np.eye(n)
    elif W.ndim == 1:
        if W.shape[0] != n:
            raise ContractViolation(f"{name} diagonal needs {n} entries")
        W = np.diag(W)
    if W.shape != (n, n):
        raise ContractViolation(f"{name} must be {n}x{n}")
    if not np.allclose(W, W.T, atol=1e-10):
        raise ContractViolation(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(0.5 * (W + W.T))) < -1e-9:
        raise ContractViolation(f"{name} must be positive semidefinite")
    return 0.5 * (W + W.T)


def target_point(partition, goal_cells, x_k, wrap_dims=(), centers=None):
    """Center of the goal cell nearest to x_k.

    Distance is Euclidean with wrapped differences on angle dimensions;
    exact ties go to the lowest cell index. centers may carry precomputed
    goal-cell centers (same order as goal_cells) to skip the per-call
    stacking."""
    goal_cells = np.asarray(goal_cells, dtype=np.int64)
    if goal_cells.size == 0:
        raise ContractViolation("no goal cells to target")
    x_k = np.asarray(x_k, dtype=float)
    if centers is None:
        centers = np.stack([cell_center(partition, int(i)) for i in goal_cells])
    diff = centers - x_k
    for d in wrap_dims:
        diff[:, d] = np.mod(diff[:, d] + math.pi, TWO_PI) - math.pi
    d2 = np.einsum("ij,ij->i", diff, diff)
    tied = np.flatnonzero(d2 == d2.min())
    best = tied[np.argmin(goal_cells[tied])]
    return centers[best].copy()


def _affine_image(A, B, c, s_lo, s_hi, u_lo, u_hi):
    """Interval image of a state box under x -> A x + B u + c, u boxed."""
    Ap, An = np.maximum(A, 0.0), np.minimum(A, 0.0)
    Bp, Bn = np.maximum(B, 0.0), np.minimum(B, 0.0)
    lo = Ap @ s_lo + An @ s_hi + Bp @ u_lo + Bn @ u_hi + c
    hi = Ap @ s_hi + An @ s_lo + Bp @ u_hi + Bn @ u_lo + c
    return lo, hi


def _grid_cells_touching(partition, lo, hi, pad=STATE_TOL):
    """Interior cells whose closed box meets [lo, hi] within pad.

    Angle dimensions are matched modulo 2*pi; the chart shift needed to
    overlay each cell on the unwrapped interval is dropped here (the
    candidate set is shift-free)."""
    n_x = len(partition.per_dim_counts)
    wrapset = set(partition.wrap_dims)
    per_dim = []
    for d in range(n_x):
        edges = partition.per_dim_edges[d]
        if d in wrapset:
            seen = set()
            k_lo = math.floor((lo[d] + math.pi) / TWO_PI)
            k_hi = math.floor((hi[d] + math.pi) / TWO_PI)
            for k in range(k_lo, k_hi + 1):
                a = max(lo[d], -math.pi + TWO_PI * k) - TWO_PI * k
                b = min(hi[d], math.pi + TWO_PI * k) - TWO_PI * k
                idx = np.flatnonzero((edges[1:] >= a - pad) & (edges[:-1] <= b + pad))
                seen.update(int(i) for i in idx)
            if not seen:
                return []
            per_dim.append(sorted(seen))
        else:
            idx = np.flatnonzero(
                (edges[1:] >= lo[d] - pad) & (edges[:-1] <= hi[d] + pad)
            )
            if idx.size == 0:
                return []
            per_dim.append([int(i) for i in idx])
    counts = partition.per_dim_counts
    out = []
    for combo in itertools.product(*per_dim):
        flat = 0
        for d in range(n_x):
            flat = flat * counts[d] + combo[d]
        out.append(flat)
    return out


def build_miqp(x_k, r_k, partition, actions, policy, pwa_table, Q, R, N,
               reach_cache=None):
    """Assemble the tracking MIQP around the measured state.

    candidate_cells collects every certified cell reachable within N steps
    from the current cell, chaining interval images of cell boxes under the
    per-cell affine models and input boxes. Neutral cells contribute the
    certified ball of the policy action as input box; goal cells the full
    input range; unsafe and outside regions are never candidates, so every
    feasible prediction stays certified.

    The candidate set depends on x_k only through its cell, so callers
    solving every control step may pass a dict as reach_cache to reuse the
    reachability scan across steps with the same root cell. The cache is
    only valid for one (partition, actions, policy, table, N) combination;
    use one dict per controller."""
    N = int(N)
    if N < 1:
        raise ContractViolation("horizon must be at least 1")
    x_k = np.asarray(x_k, dtype=float)
    r_k = np.asarray(r_k, dtype=float)
    n_x = x_k.shape[0]
    n_u = actions.input_box.dim
    Q = _weight_matrix(Q, n_x, "Q")
    R = _weight_matrix(R, n_u, "R")
    c0 = locate(partition, x_k)
    if c0 == partition.outside_index or partition.labels[c0] != NEUTRAL:
        raise ContractViolation(
            "controller consulted outside a certified non-terminal cell"
        )
    if reach_cache is not None and c0 in reach_cache:
        region, cand, succ, packed = reach_cache[c0]
        return MiqpInstance(
            horizon=N, x_k=x_k, r_k=r_k, Q=Q, R=R, region_data=region,
            candidate_cells=cand, root_cell=int(c0),
            wrap_dims=tuple(partition.wrap_dims), successors=succ,
            packed=packed,
        )

    region = {}

    def admit(i):
        if i in region:
            return True
        if i == partition.outside_index:
            return False
        label = partition.labels[i]
        model = pwa_table[i]
        if model is None or label not in (NEUTRAL, GOAL):
            return False
        s_lo, s_hi = cell_bounds(partition, i)
        if label == NEUTRAL:
            ball = actions.ball(int(policy.action[i]))
            u_lo, u_hi = ball.lo.copy(), ball.hi.copy()
        else:
            u_lo = actions.input_box.lo.copy()
            u_hi = actions.input_box.hi.copy()
        region[i] = RegionData(s_lo, s_hi, u_lo, u_hi, model)
        return True

    if not admit(c0):
        raise ContractViolation("current cell has no certified prediction model")
    succ = {}
    frontier = [c0]
    for depth in range(N):
        nxt = []
        for i in frontier:
            if i in succ:
                continue
            rd = region[i]
            lo, hi = _affine_image(
                rd.model.A, rd.model.B, rd.model.c,
                rd.m_s, rd.M_s, rd.m_a, rd.M_a,
            )
            kids = []
            for j in _grid_cells_touching(partition, lo, hi):
                if admit(j):
                    kids.append(j)
                    if j not in succ:
                        nxt.append(j)
            succ[i] = tuple(sorted(set(kids)))
        frontier = nxt
    cand = np.array(sorted(region), dtype=np.int64)
    packed = _pack_regions(region, cand, succ, n_x, n_u)
    if reach_cache is not None:
        reach_cache[c0] = (region, cand, succ, packed)
    return MiqpInstance(
        horizon=N,
        x_k=x_k,
        r_k=r_k,
        Q=Q,
        R=R,
        region_data=region,
        candidate_cells=cand,
        root_cell=int(c0),
        wrap_dims=tuple(partition.wrap_dims),
        successors=succ,
        packed=packed,
    )


def _pack_regions(region, cand_ids, successors, n_x, n_u):
    """Flatten RegionData and successor lists into kernel-ready arrays."""
    cand_ids = np.asarray(cand_ids, dtype=np.int64)
    n_c = cand_ids.shape[0]
    S_lo = np.zeros((n_c, n_x))
    S_hi = np.zeros((n_c, n_x))
    U_lo = np.zeros((n_c, n_u))
    U_hi = np.zeros((n_c, n_u))
    Amat = np.zeros((n_c, n_x, n_x))
    Bmat = np.zeros((n_c, n_x, n_u))
    cvec = np.zeros((n_c, n_x))
    for p in range(n_c):
        rd = region[int(cand_ids[p])]
        S_lo[p] = rd.m_s
        S_hi[p] = rd.M_s
        U_lo[p] = rd.m_a
        U_hi[p] = rd.M_a
        Amat[p] = rd.model.A
        Bmat[p] = rd.model.B
        cvec[p] = rd.model.c
    sindptr = np.zeros(n_c + 1, dtype=np.int64)
    rows = []
    for p in range(n_c):
        if successors is None:
            row = np.arange(n_c, dtype=np.int64)
        else:
            ids = np.asarray(
                successors.get(int(cand_ids[p]), ()), dtype=np.int64
            )
            row = np.searchsorted(cand_ids, ids)
        rows.append(row)
        sindptr[p + 1] = sindptr[p] + row.shape[0]
    sidx = (
        np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    ).astype(np.int64)
    return (cand_ids, S_lo, S_hi, U_lo, U_hi, Amat, Bmat, cvec, sindptr, sidx)


@njit(cache=True)
def _accelerated_pg(H, g, lo, hi, x0):
    """Box QP by projected gradient with Nesterov momentum and restarts.

    x0 seeds the iteration (projected into the box); the fixed point is
    the same from any seed, a good one just arrives faster. Everything is
    written as scalar loops: the matrices are tiny, so library matvec
    calls would cost more than the arithmetic."""
    n = g.shape[0]
    if n == 0:
        return np.zeros(0), 0.0
    # step 1/L from the dominant eigenvalue (power iteration)
    v = np.ones(n) / np.sqrt(n)
    w = np.empty(n)
    L = 0.0
    for _ in range(_POWER_ITERS):
        nw = 0.0
        for i in range(n):
            acc = 0.0
            for k in range(n):
                acc += H[i, k] * v[k]
            w[i] = acc
            nw += acc * acc
        nw = np.sqrt(nw)
        if nw <= 1e-30:
            break
        for i in range(n):
            v[i] = w[i] / nw
        if abs(nw - L) <= 1e-13 * max(L, 1.0):
            L = nw
            break
        L = nw
    if L <= 1e-30:
        L = 1.0
    L *= 1.0 + 1e-9
    inv = 1.0 / L
    x = np.empty(n)
    y = np.empty(n)
    xn = np.empty(n)
    for i in range(n):
        m = x0[i]
        if not np.isfinite(m):
            m = 0.0
        if m < lo[i]:
            m = lo[i]
        if m > hi[i]:
            m = hi[i]
        x[i] = m
        y[i] = m
    t = 1.0
    for _ in range(QP_MAX_ITERS):
        s = 0.0
        for i in range(n):
            acc = g[i]
            for k in range(n):
                acc += H[i, k] * y[k]
            zi = y[i] - inv * acc
            if zi < lo[i]:
                zi = lo[i]
            if zi > hi[i]:
                zi = hi[i]
            xn[i] = zi
            s += (y[i] - zi) * (zi - x[i])
        if s > 0.0:
            t = 1.0  # momentum points uphill: restart
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        mo = (t - 1.0) / tn
        for i in range(n):
            y[i] = xn[i] + mo * (xn[i] - x[i])
            x[i] = xn[i]
        t = tn
        res = 0.0
        for i in range(n):
            acc = g[i]
            for k in range(n):
                acc += H[i, k] * x[k]
            zi = x[i] - acc
            if zi < lo[i]:
                zi = lo[i]
            if zi > hi[i]:
                zi = hi[i]
            d = x[i] - zi
            res += d * d
        if np.sqrt(res) < QP_TOL:
            break
    val = 0.0
    for i in range(n):
        acc = 0.0
        for k in range(n):
            acc += H[i, k] * x[k]
        val += x[i] * (0.5 * acc + g[i])
    return x, val


def _as_bounds(bounds, n):
    if isinstance(bounds, Box):
        lo, hi = bounds.lo, bounds.hi
    elif all(isinstance(b, Box) for b in bounds):
        lo = np.concatenate([b.lo for b in bounds])
        hi = np.concatenate([b.hi for b in bounds])
    else:
        lo, hi = bounds
    lo = np.ascontiguousarray(np.asarray(lo, dtype=float))
    hi = np.ascontiguousarray(np.asarray(hi, dtype=float))
    if lo.shape != (n,) or hi.shape != (n,):
        raise ContractViolation("bounds do not match the decision dimension")
    if np.any(lo > hi):
        raise Infeasible("empty bound box")
    return lo, hi


def solve_box_qp(H, g, bounds, equality=None):
    """Minimize 0.5 u'Hu + g'u over a box, states eliminated.

    bounds is a (lo, hi) pair, a single Box, or a sequence of per-stage
    Boxes (concatenated). equality optionally carries the eliminated stage
    dynamics as (F, G, s_lo, s_hi) with stacked states x = F + G u; the
    solved candidate is checked against the state boxes and a violation
    beyond 1e-6 raises Infeasible, rejecting the cell sequence as
    geometrically inconsistent.

    Accelerated projected gradient with fixed step 1/L (L from power
    iteration); stops when the projected-gradient norm falls below 1e-8 or
    after 1e4 iterations."""
    H = np.ascontiguousarray(np.asarray(H, dtype=float))
    g = np.ascontiguousarray(np.asarray(g, dtype=float))
    if H.ndim != 2 or H.shape[0] != H.shape[1] or H.shape[0] != g.shape[0]:
        raise ContractViolation("H and g dimensions disagree")
    lo, hi = _as_bounds(bounds, g.shape[0])
    u, val = _accelerated_pg(H, g, lo, hi, 0.5 * (lo + hi))
    if equality is not None:
        F, G, s_lo, s_hi = equality
        x = np.asarray(F, dtype=float) + np.asarray(G, dtype=float) @ u
        if np.any(x < np.asarray(s_lo, dtype=float) - STATE_TOL) or np.any(
            x > np.asarray(s_hi, dtype=float) + STATE_TOL
        ):
            raise Infeasible("eliminated states leave their cell boxes")
    return u, val


def _shift_vector(wrap_dims, delta, n_x):
    s = np.zeros(n_x)
    for t, d in enumerate(wrap_dims):
        s[d] = TWO_PI * delta[t]
    return s


def _vanilla_path(instance, cand_ids, cand_lo, cand_hi):
    """Predicted cell path under the set-center inputs, for child ordering.

    Follows the affine models from x_k applying each cell's input-box
    center, locating successors among the candidate boxes (lowest index
    wins on shared faces). Stops early if the path leaves the candidates;
    the result is a heuristic, not a constraint."""
    region = instance.region_data
    wrap_dims = instance.wrap_dims
    n_x = instance.x_k.shape[0]
    x = instance.x_k.copy()
    cell = instance.root_cell
    delta = (0,) * len(wrap_dims)
    path = {}
    for j in range(instance.horizon):
        rd = region[cell]
        dvec = _shift_vector(wrap_dims, delta, n_x)
        coff = rd.model.c + dvec - rd.model.A @ dvec
        u = 0.5 * (rd.m_a + rd.M_a)
        x = rd.model.A @ x + rd.model.B @ u + coff
        nxt_delta = []
        x_base = x.copy()
        for t, d in enumerate(wrap_dims):
            k = math.floor((x[d] + math.pi) / TWO_PI)
            nxt_delta.append(k)
            x_base[d] = x[d] - TWO_PI * k
        inside = np.flatnonzero(
            np.all(cand_lo <= x_base + 1e-12, axis=1)
            & np.all(cand_hi >= x_base - 1e-12, axis=1)
        )
        if inside.size == 0:
            break
        cell = int(cand_ids[inside[0]])
        delta = tuple(nxt_delta)
        path[j + 1] = (cell, delta)
    return path


@njit(cache=True)
def _kid_less(vf, gp, cl, ks, a, b):
    """Strict child order: vanilla flag, clip distance, cell, shift."""
    if vf[a] != vf[b]:
        return vf[a] < vf[b]
    if gp[a] != gp[b]:
        return gp[a] < gp[b]
    if cl[a] != cl[b]:
        return cl[a] < cl[b]
    for t in range(ks.shape[1]):
        if ks[a, t] != ks[b, t]:
            return ks[a, t] < ks[b, t]
    return False


@njit(cache=True)
def _dfs_kernel(N, x_k, r_k, Q, R, S_lo, S_hi, U_lo, U_hi, Amat, Bmat,
                cvec, wd, sindptr, sidx, root_pos, vcell, vks):
    """Depth-first sequence search over packed region arrays.

    Maintains per-depth condensation panels (state constants F, input maps
    G, accumulated Hessian/gradient/constant, stacked input bounds, reach
    boxes, chosen cell boxes) so entering a node costs one rank-1 style
    update plus one box QP. Children are generated from the CSR successor
    lists, shifted per wrap chart, and insertion-sorted; at the last level
    the prefix is checked once and the first child containing the terminal
    state closes the sequence. Returns (found, value, inputs, cells,
    shifts, explored); found is -1 on child buffer overflow."""
    n_x = x_k.shape[0]
    n_u = U_lo.shape[1]
    n_w = wd.shape[0]
    n_c = S_lo.shape[0]
    M = N * n_u

    F = np.zeros((N + 1, n_x))
    G = np.zeros((N + 1, n_x, M))
    Hh = np.zeros((N + 1, M, M))
    gg = np.zeros((N + 1, M))
    constv = np.zeros(N + 1)
    ub_lo = np.zeros((N + 1, M))
    ub_hi = np.zeros((N + 1, M))
    r_lo = np.zeros((N + 1, n_x))
    r_hi = np.zeros((N + 1, n_x))
    sb_lo = np.zeros((N + 1, n_x))
    sb_hi = np.zeros((N + 1, n_x))
    lbU = np.zeros((N, M))
    lbval = np.zeros(N)
    ilo = np.zeros((N, n_x))
    ihi = np.zeros((N, n_x))
    cells = np.zeros(N + 1, np.int64)
    ksv = np.zeros((N + 1, n_w), np.int64)

    cap = 8 * n_c + 8
    kid_cell = np.zeros((N, cap), np.int64)
    kid_ks = np.zeros((N, cap, n_w), np.int64)
    kid_blo = np.zeros((N, cap, n_x))
    kid_bhi = np.zeros((N, cap, n_x))
    kid_vflag = np.zeros((N, cap), np.int64)
    kid_gap = np.zeros((N, cap))
    kid_ord = np.zeros((N, cap), np.int64)
    nkids = np.zeros(N, np.int64)
    cursor = np.zeros(N, np.int64)

    dvec = np.zeros(n_x)
    coff = np.zeros(n_x)
    svec = np.zeros(n_x)
    xh = np.zeros(n_x)
    QG = np.zeros((n_x, M))
    kr_lo = np.zeros(n_w, np.int64)
    kr_n = np.zeros(n_w, np.int64)
    kcur = np.zeros(n_w, np.int64)

    best_val = np.inf
    best_U = np.zeros(M)
    best_cells = np.zeros(N + 1, np.int64)
    best_ks = np.zeros((N + 1, n_w), np.int64)
    found = 0
    explored = 0

    F[0] = x_k
    r_lo[0] = x_k
    r_hi[0] = x_k
    cells[0] = root_pos

    j = 0
    entering = True
    while j >= 0:
        if entering:
            entering = False
            if j > 0 and lbval[j - 1] + constv[j] >= best_val:
                # the parent bound already rules this subtree out against
                # an incumbent found after the parent was expanded
                j -= 1
                continue
            p = cells[j]
            A = Amat[p]
            B = Bmat[p]
            for i in range(n_x):
                dvec[i] = 0.0
            for t in range(n_w):
                dvec[wd[t]] = TWO_PI * ksv[j, t]
            for r in range(n_x):
                acc = cvec[p, r] + dvec[r]
                for c in range(n_x):
                    acc -= A[r, c] * dvec[c]
                coff[r] = acc
            for r in range(n_x):
                acc = coff[r]
                for c in range(n_x):
                    acc += A[r, c] * F[j, c]
                F[j + 1, r] = acc
            for r in range(n_x):
                for m in range(M):
                    acc = 0.0
                    for c in range(n_x):
                        acc += A[r, c] * G[j, c, m]
                    G[j + 1, r, m] = acc
            for r in range(n_x):
                for m in range(n_u):
                    G[j + 1, r, j * n_u + m] = B[r, m]
            for m in range(M):
                ub_lo[j + 1, m] = ub_lo[j, m]
                ub_hi[j + 1, m] = ub_hi[j, m]
            for m in range(n_u):
                ub_lo[j + 1, j * n_u + m] = U_lo[p, m]
                ub_hi[j + 1, j * n_u + m] = U_hi[p, m]
            for r in range(n_x):
                for m in range(M):
                    acc = 0.0
                    for c in range(n_x):
                        acc += Q[r, c] * G[j + 1, c, m]
                    QG[r, m] = acc
            for ai in range(M):
                for bi in range(M):
                    acc = 0.0
                    for r in range(n_x):
                        acc += G[j + 1, r, ai] * QG[r, bi]
                    Hh[j + 1, ai, bi] = Hh[j, ai, bi] + 2.0 * acc
            for ai in range(n_u):
                for bi in range(n_u):
                    Hh[j + 1, j * n_u + ai, j * n_u + bi] += 2.0 * R[ai, bi]
            for m in range(M):
                acc = 0.0
                for r in range(n_x):
                    acc += QG[r, m] * (F[j + 1, r] - r_k[r])
                gg[j + 1, m] = gg[j, m] + 2.0 * acc
            acc2 = 0.0
            for r in range(n_x):
                qe = 0.0
                for c in range(n_x):
                    qe += Q[r, c] * (F[j + 1, c] - r_k[c])
                acc2 += (F[j + 1, r] - r_k[r]) * qe
            constv[j + 1] = constv[j] + acc2
            if j > 0:
                # warm start from the parent solution (new slots clip in)
                u_sol, v_sol = _accelerated_pg(
                    Hh[j + 1], gg[j + 1], ub_lo[j + 1], ub_hi[j + 1],
                    lbU[j - 1],
                )
            else:
                u_sol, v_sol = _accelerated_pg(
                    Hh[j + 1], gg[j + 1], ub_lo[j + 1], ub_hi[j + 1],
                    0.5 * (ub_lo[j + 1] + ub_hi[j + 1]),
                )
            for m in range(M):
                lbU[j, m] = u_sol[m]
            lbval[j] = v_sol
            if v_sol + constv[j + 1] >= best_val:
                # completions only add nonnegative stage costs, so nothing
                # below can strictly beat the incumbent (ties keep the
                # first accepted sequence, keeping the search deterministic
                # even when the dynamics are globally affine)
                j -= 1
                continue
            for r in range(n_x):
                lo_acc = coff[r]
                hi_acc = coff[r]
                for c in range(n_x):
                    aval = A[r, c]
                    if aval >= 0.0:
                        lo_acc += aval * r_lo[j, c]
                        hi_acc += aval * r_hi[j, c]
                    else:
                        lo_acc += aval * r_hi[j, c]
                        hi_acc += aval * r_lo[j, c]
                for m in range(n_u):
                    bval = B[r, m]
                    if bval >= 0.0:
                        lo_acc += bval * U_lo[p, m]
                        hi_acc += bval * U_hi[p, m]
                    else:
                        lo_acc += bval * U_hi[p, m]
                        hi_acc += bval * U_lo[p, m]
                ilo[j, r] = lo_acc
                ihi[j, r] = hi_acc
            for r in range(n_x):
                acc = F[j + 1, r]
                for m in range(M):
                    acc += G[j + 1, r, m] * lbU[j, m]
                xh[r] = acc
            ncomb = 1
            for t in range(n_w):
                klo = int(np.floor((ilo[j, wd[t]] + np.pi) / TWO_PI))
                khi = int(np.floor((ihi[j, wd[t]] + np.pi) / TWO_PI))
                kr_lo[t] = klo
                kr_n[t] = khi - klo + 1
                ncomb *= khi - klo + 1
            n_kid = 0
            for comb in range(ncomb):
                rem = comb
                for t in range(n_w):
                    kcur[t] = kr_lo[t] + rem % kr_n[t]
                    rem //= kr_n[t]
                for i in range(n_x):
                    svec[i] = 0.0
                for t in range(n_w):
                    svec[wd[t]] = TWO_PI * kcur[t]
                for s_i in range(sindptr[p], sindptr[p + 1]):
                    s = sidx[s_i]
                    touch = True
                    for i in range(n_x):
                        blo = S_lo[s, i] + svec[i]
                        bhi = S_hi[s, i] + svec[i]
                        if (bhi < ilo[j, i] - STATE_TOL
                                or blo > ihi[j, i] + STATE_TOL):
                            touch = False
                            break
                    if not touch:
                        continue
                    if n_kid >= cap:
                        return -1, best_val, best_U, best_cells, best_ks, explored
                    kid_cell[j, n_kid] = s
                    g2 = 0.0
                    for i in range(n_x):
                        blo = S_lo[s, i] + svec[i]
                        bhi = S_hi[s, i] + svec[i]
                        kid_blo[j, n_kid, i] = blo
                        kid_bhi[j, n_kid, i] = bhi
                        gp = blo - xh[i]
                        if xh[i] - bhi > gp:
                            gp = xh[i] - bhi
                        if gp < 0.0:
                            gp = 0.0
                        g2 += gp * gp
                    kid_gap[j, n_kid] = g2
                    vfl = 1
                    if vcell[j + 1] == s:
                        same = True
                        for t in range(n_w):
                            if vks[j + 1, t] != kcur[t]:
                                same = False
                                break
                        if same:
                            vfl = 0
                    kid_vflag[j, n_kid] = vfl
                    for t in range(n_w):
                        kid_ks[j, n_kid, t] = kcur[t]
                    n_kid += 1
            nkids[j] = n_kid
            for a in range(n_kid):
                kid_ord[j, a] = a
            for a in range(1, n_kid):
                key = kid_ord[j, a]
                b = a - 1
                while b >= 0 and _kid_less(
                    kid_vflag[j], kid_gap[j], kid_cell[j], kid_ks[j],
                    key, kid_ord[j, b],
                ):
                    kid_ord[j, b + 1] = kid_ord[j, b]
                    b -= 1
                kid_ord[j, b + 1] = key
            if j == N - 1:
                # the final cell adds no cost term and no input bound: the
                # QP just solved is the leaf QP for every child, so check
                # the prefix states once and take the first child whose box
                # contains the terminal state (later ones tie on cost)
                ok = True
                for t in range(1, N):
                    for i in range(n_x):
                        acc = F[t, i]
                        for m in range(M):
                            acc += G[t, i, m] * lbU[j, m]
                        if (acc < sb_lo[t, i] - STATE_TOL
                                or acc > sb_hi[t, i] + STATE_TOL):
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    explored += n_kid
                    j -= 1
                    continue
                accepted = False
                for rank in range(n_kid):
                    t2 = kid_ord[j, rank]
                    inside = True
                    for i in range(n_x):
                        if (xh[i] < kid_blo[j, t2, i] - STATE_TOL
                                or xh[i] > kid_bhi[j, t2, i] + STATE_TOL):
                            inside = False
                            break
                    if inside:
                        explored += rank + 1
                        total = lbval[j] + constv[j + 1]
                        if total < best_val:
                            best_val = total
                            for m in range(M):
                                best_U[m] = lbU[j, m]
                            for d in range(N):
                                best_cells[d] = cells[d]
                                for t in range(n_w):
                                    best_ks[d, t] = ksv[d, t]
                            best_cells[N] = kid_cell[j, t2]
                            for t in range(n_w):
                                best_ks[N, t] = kid_ks[j, t2, t]
                            found = 1
                        accepted = True
                        break
                if not accepted:
                    explored += n_kid
                j -= 1
                continue
            cursor[j] = 0
            continue
        if cursor[j] >= nkids[j]:
            j -= 1
            continue
        t2 = kid_ord[j, cursor[j]]
        cursor[j] += 1
        empty = False
        for i in range(n_x):
            lo2 = ilo[j, i]
            if kid_blo[j, t2, i] - STATE_TOL > lo2:
                lo2 = kid_blo[j, t2, i] - STATE_TOL
            hi2 = ihi[j, i]
            if kid_bhi[j, t2, i] + STATE_TOL < hi2:
                hi2 = kid_bhi[j, t2, i] + STATE_TOL
            if lo2 > hi2:
                empty = True
                break
            r_lo[j + 1, i] = lo2
            r_hi[j + 1, i] = hi2
        if empty:
            continue
        cells[j + 1] = kid_cell[j, t2]
        for t in range(n_w):
            ksv[j + 1, t] = kid_ks[j, t2, t]
        for i in range(n_x):
            sb_lo[j + 1, i] = kid_blo[j, t2, i]
            sb_hi[j + 1, i] = kid_bhi[j, t2, i]
        j += 1
        entering = True
    return found, best_val, best_U, best_cells, best_ks, explored


def solve_miqp(instance):
    """Exact optimum over the cell-sequence structure by depth-first search.

    The root cell is fixed; successors are restricted to candidate cells
    whose box meets the interval image of the branch's deterministic reach
    set (the image of the running state box under the cell model and input
    box, re-intersected with each chosen cell box inflated by the state
    tolerance). That tightening discards only sequences whose QP candidate
    could never pass the state-box check, so the returned optimum matches
    plain cell-image enumeration. Children are ordered best first (the
    predicted-cell path under set-center inputs, then distance to the
    prefix minimizer); a branch is pruned when its input-box relaxation
    already exceeds the incumbent. With no feasible sequence the status is
    infeasible_fallback and u0 is the certified set center. The search
    itself runs in a compiled kernel over packed region arrays."""
    t0 = time.perf_counter()
    N = instance.horizon
    region = instance.region_data
    wrap_dims = instance.wrap_dims
    x_k = instance.x_k
    r_k = instance.r_k
    Q, R = instance.Q, instance.R
    n_x = x_k.shape[0]
    rd0 = region[instance.root_cell]
    n_u = rd0.m_a.shape[0]

    packed = instance.packed
    if packed is None:
        packed = _pack_regions(
            region, instance.candidate_cells, instance.successors, n_x, n_u
        )
    cand_ids, S_lo, S_hi, U_lo, U_hi, Amat, Bmat, cvec, sindptr, sidx = packed
    root_pos = int(np.searchsorted(cand_ids, instance.root_cell))

    n_w = len(wrap_dims)
    vcell = np.full(N + 1, -1, dtype=np.int64)
    vks = np.zeros((N + 1, n_w), dtype=np.int64)
    vcell[0] = root_pos
    vpath = _vanilla_path(instance, cand_ids, S_lo, S_hi)
    for d, (cell, delta) in vpath.items():
        vcell[d] = int(np.searchsorted(cand_ids, cell))
        for t in range(n_w):
            vks[d, t] = delta[t]

    wd = np.asarray(wrap_dims, dtype=np.int64)
    found, best_val, best_U, best_pos, best_ks, explored = _dfs_kernel(
        int(N), x_k, r_k, Q, R, S_lo, S_hi, U_lo, U_hi, Amat, Bmat, cvec,
        wd, sindptr, sidx, root_pos, vcell, vks,
    )
    if found < 0:
        raise ContractViolation("child buffer overflow in the sequence search")
    elapsed = time.perf_counter() - t0
    if found == 0:
        u0 = 0.5 * (rd0.m_a + rd0.M_a)
        if np.any(u0 < rd0.m_a) or np.any(u0 > rd0.M_a):
            raise ContractViolation("fallback input left the certified set")
        return MpcSolution(
            u0=u0,
            predicted_states=np.zeros((0, n_x)),
            predicted_inputs=np.zeros((0, n_u)),
            cost=math.inf,
            status="infeasible_fallback",
            solve_time=elapsed,
            explored_sequences=int(explored),
            cell_sequence=(instance.root_cell,),
        )
    cells = tuple(int(cand_ids[p]) for p in best_pos)
    U = best_U
    preds = np.zeros((N, n_x))
    F = x_k.copy()
    Gm = np.zeros((n_x, N * n_u))
    for t in range(N):
        rd = region[cells[t]]
        dvec = _shift_vector(
            wrap_dims, tuple(int(k) for k in best_ks[t]), n_x
        )
        coff = rd.model.c + dvec - rd.model.A @ dvec
        F = rd.model.A @ F + coff
        Gm = rd.model.A @ Gm
        Gm[:, t * n_u:(t + 1) * n_u] = rd.model.B
        preds[t] = F + Gm @ U
    inputs = U.reshape(N, n_u)
    u0 = inputs[0].copy()
    if np.any(u0 < rd0.m_a) or np.any(u0 > rd0.M_a):
        raise ContractViolation("applied input left the certified set")
    return MpcSolution(
        u0=u0,
        predicted_states=preds,
        predicted_inputs=inputs,
        cost=float(best_val),
        status="optimal",
        solve_time=elapsed,
        explored_sequences=int(explored),
        cell_sequence=cells,
    )



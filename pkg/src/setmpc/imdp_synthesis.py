"""Robust reach-avoid synthesis on an interval MDP.

Value iteration maximizes, over actions, the worst-case probability of
reaching goal while avoiding unsafe and outside, with the adversary choosing
a feasible distribution inside the transition intervals each step. The
returned lower value at the initial state is the certificate lambda.
"""

from dataclasses import dataclass

import numpy as np

from .abstraction import interface_set
from .errors import ContractViolation, InfeasibleAmbiguitySet, NonConvergence
from .partition import locate
from . import _kernels

VI_TOL = 1e-6
VI_MAX_ITERS = 10000


@dataclass(frozen=True)
class ValueBounds:
    """Lower and upper reach-avoid value per state, with solve diagnostics."""

    v_lo: np.ndarray
    v_hi: np.ndarray
    iterations: int
    residual: float


@dataclass(frozen=True)
class RobustPolicy:
    """Maximizing action per state (-1 for terminal states) and the
    certified satisfaction lower bound from the initial state."""

    action: np.ndarray
    lam: float


def extremal_expectation(values, p_lo, p_hi, maximize=False):
    """Worst-case (or best-case) expectation over the interval ambiguity set.

    Returns (expectation, distribution). The extremal distribution pays every
    target its lower bound, then spends the remaining budget on the smallest
    (largest when maximize) values first, up to each upper bound."""
    values = np.asarray(values, dtype=float)
    p_lo = np.asarray(p_lo, dtype=float)
    p_hi = np.asarray(p_hi, dtype=float)
    if values.shape != p_lo.shape or values.shape != p_hi.shape:
        raise ContractViolation("values and bounds must have matching shapes")
    if np.any(p_lo > p_hi + 1e-15):
        raise InfeasibleAmbiguitySet("lower transition bound exceeds upper")
    s_lo = float(p_lo.sum())
    s_hi = float(p_hi.sum())
    if s_lo > 1.0 + 1e-12 or s_hi < 1.0 - 1e-12:
        raise InfeasibleAmbiguitySet(
            f"no distribution fits the bounds (sum lo {s_lo:.12f}, "
            f"sum hi {s_hi:.12f})"
        )
    order = np.argsort(-values if maximize else values, kind="stable")
    dist = p_lo.copy()
    budget = max(0.0, 1.0 - s_lo)
    for t in order:
        add = min(p_hi[t] - p_lo[t], budget)
        dist[t] += add
        budget -= add
        if budget <= 0.0:
            break
    return float(dist @ values), dist


def worst_case_expectation(values, p_lo, p_hi):
    """Adversarial (minimizing) expectation over the interval ambiguity set."""
    return extremal_expectation(values, p_lo, p_hi, maximize=False)


def _run_sweeps(imdp, values, policy, fixed_policy, maximize_adversary, tol,
                max_iters):
    new_values = values.copy()
    residual = np.inf
    for it in range(1, max_iters + 1):
        residual = _kernels.vi_sweep(
            imdp.row_ptr,
            imdp.cols,
            imdp.p_lo,
            imdp.p_hi,
            values,
            new_values,
            imdp.neutral_states,
            imdp.num_actions,
            policy,
            fixed_policy,
            maximize_adversary,
        )
        values, new_values = new_values, values
        if residual <= tol:
            return values, it, float(residual)
    raise NonConvergence(max_iters, float(residual))


def robust_value_iteration(imdp, tol=VI_TOL, max_iters=VI_MAX_ITERS):
    """Synthesize the maximizing policy and certified value bounds.

    The lower pass maximizes over actions against a minimizing adversary
    (ties broken toward the lowest action index); the upper pass re-evaluates
    the frozen policy against a maximizing adversary. Iterates start at the
    goal indicator, so both passes converge from below."""
    v0 = np.zeros(imdp.num_states)
    v0[imdp.goal_states] = 1.0
    policy = np.full(imdp.num_states, -1, dtype=np.int64)

    v_lo, iters, residual = _run_sweeps(
        imdp, v0.copy(), policy, False, False, tol, max_iters
    )
    v_hi, _, _ = _run_sweeps(
        imdp, v0.copy(), policy, True, True, tol, max_iters
    )
    np.maximum(v_hi, v_lo, out=v_hi)
    bounds = ValueBounds(
        v_lo=v_lo, v_hi=v_hi, iterations=iters, residual=residual
    )
    lam = float(v_lo[imdp.initial_state])
    return bounds, RobustPolicy(action=policy, lam=lam)


def permissive_policy(partition, actions, policy):
    """Map a state-space point to its certified input set, or None when the
    point lies in a terminal cell (goal, unsafe, or outside)."""

    action = policy.action

    def pi_set(x):
        s = locate(partition, x)
        a = action[s]
        if a < 0:
            return None
        return interface_set(actions, int(a))

    return pi_set


def value_grid(partition, values):
    """Reshape per-cell values onto the partition grid (outside dropped)."""
    L = partition.num_cells
    return np.asarray(values[:L]).reshape(tuple(partition.per_dim_counts))

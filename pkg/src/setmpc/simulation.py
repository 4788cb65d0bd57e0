"""Closed-loop simulation: episodes, Monte Carlo batches, epsilon sweeps.

Each control step checks the reach-avoid status first (goal wins, then
unsafe or leaving the state range), then asks the controller for an input,
asserts it lies in the certified set of the synthesized policy, and steps
the stochastic dynamics. Monte Carlo batches derive one counter-based rng
stream per episode index from a single base seed, so different controllers
or ball radii consume identical noise sequences and cost comparisons
isolate the controller effect.

Episode costs mirror the controller objective: per executed step the
tracking error against the current target point is weighed by Q and the
input by R. Timeouts count as unsatisfied in the satisfaction frequency and
are reported separately.
"""

import time
from dataclasses import dataclass

import numpy as np

from .abstraction import build_action_set, build_imdp, estimate_transition_count
from .dynamics import sample_noise, step
from .errors import ContractViolation
from .factored import build_factored, factored_value_iteration
from .imdp_synthesis import robust_value_iteration
from .mpc import build_miqp, solve_miqp, target_point
from .partition import build_partition, goal_cell_centers, locate
from .pwa import pwa_table

TIMEOUT = "timeout"

# explicit transition-row budget before switching to the factored product
# representation (memory bound, not a semantics switch)
MAX_EXPLICIT_TRANSITIONS = 5.0e7


@dataclass(frozen=True)
class EpisodeRecord:
    """One closed-loop episode.

    sat is True, False, or TIMEOUT; j_total = j_state + j_input exactly;
    inputs has one row per executed step, states one more."""

    states: np.ndarray
    inputs: np.ndarray
    sat: object
    steps: int
    j_state: float
    j_input: float
    j_total: float
    fallback_count: int
    mpc_times: tuple = ()


def _in_goal(model, x):
    return model.goal_box.contains(x)


def _is_unsafe(model, x):
    if not model.state_box.contains(x):
        return model.outside_unsafe
    return any(b.contains(x) for b in model.unsafe_boxes)


class VanillaController:
    """Applies the center of the certified input set at the current cell."""

    def __init__(self, partition, actions, policy, Q, R):
        self.partition = partition
        self.actions = actions
        self.policy = policy
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(R, dtype=float))
        self._centers, self._goal_cells = goal_cell_centers(partition)

    def target(self, x):
        return target_point(
            self.partition, self._goal_cells, x,
            wrap_dims=self.partition.wrap_dims, centers=self._centers,
        )

    def input_set(self, x):
        s = locate(self.partition, x)
        if s == self.partition.outside_index:
            return None
        a = int(self.policy.action[s])
        if a < 0:
            return None
        return self.actions.ball(a)

    def compute(self, x):
        ball = self.input_set(x)
        if ball is None:
            raise ContractViolation("controller consulted in a terminal cell")
        return ball.center, "vanilla", 0.0


class MpcController(VanillaController):
    """Tracks the nearest goal-cell center through the sequence MIQP."""

    def __init__(self, model, partition, actions, policy, Q, R, horizon):
        super().__init__(partition, actions, policy, Q, R)
        self.horizon = int(horizon)
        self.table = pwa_table(model, partition, actions, policy)
        self._reach_cache = {}

    def compute(self, x):
        r = self.target(x)
        instance = build_miqp(
            x, r, self.partition, self.actions, self.policy, self.table,
            self.Q, self.R, self.horizon, reach_cache=self._reach_cache,
        )
        sol = solve_miqp(instance)
        return sol.u0, sol.status, sol.solve_time


def run_episode(model, controller, x0, max_steps=150, rng_stream=None):
    """One closed-loop episode under the given controller.

    Terminal status is checked before acting at every time index including
    the last, so an episode ending inside the goal at the horizon counts as
    satisfied; only episodes still undecided after max_steps inputs time
    out. Raises ContractViolation if the controller ever returns an input
    outside the certified set."""
    if rng_stream is None:
        raise ContractViolation("run_episode needs an explicit rng stream")
    x = np.asarray(x0, dtype=float).copy()
    Q, R = controller.Q, controller.R
    states = [x.copy()]
    inputs = []
    mpc_times = []
    j_state = 0.0
    j_input = 0.0
    fallback = 0
    sat = TIMEOUT
    for k in range(int(max_steps) + 1):
        if _in_goal(model, x):
            sat = True
            break
        if _is_unsafe(model, x):
            sat = False
            break
        if k == max_steps:
            break
        r = controller.target(x)
        u, status, solve_time = controller.compute(x)
        ball = controller.input_set(x)
        if ball is None or np.any(u < ball.lo) or np.any(u > ball.hi):
            raise ContractViolation("controller input left the certified set")
        e = r - x
        j_state += float(e @ Q @ e)
        j_input += float(u @ R @ u)
        if status == "infeasible_fallback":
            fallback += 1
        if status != "vanilla":
            mpc_times.append(float(solve_time))
        w = sample_noise(model, rng_stream)
        x = step(model, x, u, w)
        states.append(x.copy())
        inputs.append(np.asarray(u, dtype=float).copy())
    n_u = controller.actions.input_box.dim
    return EpisodeRecord(
        states=np.stack(states),
        inputs=(np.stack(inputs) if inputs else np.zeros((0, n_u))),
        sat=sat,
        steps=len(inputs),
        j_state=j_state,
        j_input=j_input,
        j_total=j_state + j_input,
        fallback_count=fallback,
        mpc_times=tuple(mpc_times),
    )


@dataclass(frozen=True)
class MonteCarloSummary:
    """Batch statistics over common-random-number episodes.

    Costs are averaged over all episodes and, separately, over satisfying
    episodes only (nan when none satisfy). t_mpc_step is the mean wall
    clock per controller solve, None when the batch never invoked one."""

    n_runs: int
    sat_frequency: float
    timeout_fraction: float
    mean_j_total: float
    std_j_total: float
    mean_j_state: float
    std_j_state: float
    mean_j_input: float
    std_j_input: float
    mean_j_total_sat: float
    mean_fallback: float
    t_mpc_step: object
    episodes: tuple


def monte_carlo(model, controller, x0, n_runs, base_seed, max_steps=150):
    """Fixed-size batch of episodes with per-index counter-based streams."""
    if n_runs < 1:
        raise ContractViolation("n_runs must be at least 1")
    episodes = []
    for e in range(int(n_runs)):
        rng = np.random.Generator(np.random.Philox(key=[int(base_seed), e]))
        episodes.append(run_episode(model, controller, x0, max_steps, rng))
    jt = np.array([ep.j_total for ep in episodes])
    js = np.array([ep.j_state for ep in episodes])
    ji = np.array([ep.j_input for ep in episodes])
    sat = np.array([ep.sat is True for ep in episodes])
    t_all = [t for ep in episodes for t in ep.mpc_times]
    return MonteCarloSummary(
        n_runs=int(n_runs),
        sat_frequency=float(np.mean(sat)),
        timeout_fraction=float(np.mean([ep.sat == TIMEOUT for ep in episodes])),
        mean_j_total=float(jt.mean()),
        std_j_total=float(jt.std()),
        mean_j_state=float(js.mean()),
        std_j_state=float(js.std()),
        mean_j_input=float(ji.mean()),
        std_j_input=float(ji.std()),
        mean_j_total_sat=(float(jt[sat].mean()) if sat.any() else float("nan")),
        mean_fallback=float(np.mean([ep.fallback_count for ep in episodes])),
        t_mpc_step=(float(np.mean(t_all)) if t_all else None),
        episodes=tuple(episodes),
    )


def synthesize_for(model, partition, actions, tol=None, max_iters=None):
    """Abstraction plus synthesis, explicit or factored by estimated size.

    Returns (values, policy, kind, t_abs, t_synth). Grids whose estimated
    transition count exceeds the explicit budget use the factored product
    representation with the relaxed (still sound) value iteration."""
    kwargs = {}
    if tol is not None:
        kwargs["tol"] = tol
    if max_iters is not None:
        kwargs["max_iters"] = max_iters
    est = estimate_transition_count(model, partition, actions)
    if est <= MAX_EXPLICIT_TRANSITIONS:
        t0 = time.perf_counter()
        imdp = build_imdp(model, partition, actions)
        t_abs = time.perf_counter() - t0
        t0 = time.perf_counter()
        values, policy = robust_value_iteration(imdp, **kwargs)
        t_synth = time.perf_counter() - t0
        return values, policy, "explicit", t_abs, t_synth
    t0 = time.perf_counter()
    fimdp = build_factored(model, partition, actions)
    t_abs = time.perf_counter() - t0
    t0 = time.perf_counter()
    values, policy = factored_value_iteration(fimdp, **kwargs)
    t_synth = time.perf_counter() - t0
    return values, policy, "factored", t_abs, t_synth


@dataclass(frozen=True)
class SweepRow:
    """One epsilon of a sweep: certification plus closed-loop statistics.

    Timing columns hold wall clock and are the only fields expected to
    differ across reruns. error is nonempty when this epsilon failed to
    build; its other fields are then nan."""

    epsilon: tuple
    ball_area: float
    lam: float
    e_j: float
    e_j_state: float
    e_j_input: float
    t_abs: float
    t_mpc_step: object
    sat_frequency: float = float("nan")
    timeout_fraction: float = float("nan")
    e_j_sat: float = float("nan")
    mean_fallback: float = float("nan")
    t_synth: float = float("nan")
    kind: str = ""
    error: str = ""


def _nan_row(eps, area, message):
    nan = float("nan")
    return SweepRow(
        epsilon=eps, ball_area=area, lam=nan, e_j=nan, e_j_state=nan,
        e_j_input=nan, t_abs=nan, t_mpc_step=None, error=message,
    )


def epsilon_sweep(model, partition_counts, action_counts, epsilons, mpc_cfg,
                  n_runs, base_seed=0, max_steps=150, controller="mpc"):
    """Rebuild, certify, and simulate once per ball radius.

    epsilons is a list of scalars or per-dimension tuples. mpc_cfg carries
    Q, R, and horizon. The zero radius runs the vanilla controller (there
    is no input freedom to exploit); positive radii use the requested
    controller. Per-epsilon failures are recorded in the row and the sweep
    continues."""
    partition = build_partition(model, partition_counts)
    Q, R = mpc_cfg["Q"], mpc_cfg["R"]
    horizon = mpc_cfg["horizon"]
    rows = []
    for eps in epsilons:
        eps_vec = tuple(np.broadcast_to(np.asarray(eps, dtype=float),
                                        (model.n_u,)).tolist())
        area = float(np.prod([2.0 * e for e in eps_vec]))
        try:
            actions = build_action_set(model, action_counts, eps_vec)
            values, policy, kind, t_abs, t_synth = synthesize_for(
                model, partition, actions
            )
            vanilla = controller == "vanilla" or all(e == 0.0 for e in eps_vec)
            if vanilla:
                ctrl = VanillaController(partition, actions, policy, Q, R)
            else:
                ctrl = MpcController(
                    model, partition, actions, policy, Q, R, horizon
                )
            summary = monte_carlo(
                model, ctrl, model.initial_state, n_runs, base_seed, max_steps
            )
        except Exception as exc:  # noqa: BLE001  (per-radius isolation)
            rows.append(_nan_row(eps_vec, area, f"{type(exc).__name__}: {exc}"))
            continue
        rows.append(SweepRow(
            epsilon=eps_vec,
            ball_area=area,
            lam=policy.lam,
            e_j=summary.mean_j_total,
            e_j_state=summary.mean_j_state,
            e_j_input=summary.mean_j_input,
            t_abs=t_abs,
            t_mpc_step=summary.t_mpc_step,
            sat_frequency=summary.sat_frequency,
            timeout_fraction=summary.timeout_fraction,
            e_j_sat=summary.mean_j_total_sat,
            mean_fallback=summary.mean_fallback,
            t_synth=t_synth,
            kind=kind,
        ))
    return rows

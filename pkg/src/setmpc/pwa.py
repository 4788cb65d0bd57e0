"""Piecewise-affine approximation of the mean dynamics over the partition.

Each non-terminal cell gets an affine model linearized at its center and at
the center of the certified input set the synthesized policy assigns there.
Goal cells get one too (around the full input box) so horizons may end
inside the goal region.
"""

from dataclasses import dataclass

import numpy as np

from .dynamics import deterministic_mean
from .errors import ContractViolation
from .partition import GOAL, NEUTRAL, cell_center


@dataclass(frozen=True)
class AffineModel:
    """Mean-dynamics affine piece x+ = A x + B u + c, valid on one cell."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    cell: int


def jacobians(model, x, u):
    """Analytic Jacobians of the mean dynamics at (x, u)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p = model.params
    if model.name == "double_integrator":
        tau = p["tau"]
        A = np.array([[1.0, tau], [0.0, 1.0]])
        B = np.array([[0.5 * tau * tau], [tau]])
        return A, B
    if model.name == "mountain_car":
        tau, grav = p["tau"], p["gravity"]
        sp = np.sin(x[0])
        A = np.array(
            [
                [1.0 + tau * tau * grav * sp, tau],
                [tau * grav * sp, 1.0],
            ]
        )
        B = np.array([[tau * tau * p["power"]], [tau * p["power"]]])
        return A, B
    if model.name == "dubins":
        tau, alpha = p["tau"], p["alpha"]
        s = u[1]
        ct, st = np.cos(x[2]), np.sin(x[2])
        A = np.array(
            [
                [1.0, 0.0, -tau * s * st],
                [0.0, 1.0, tau * s * ct],
                [0.0, 0.0, 1.0],
            ]
        )
        B = np.array(
            [
                [0.0, tau * ct],
                [0.0, tau * st],
                [tau * alpha, 0.0],
            ]
        )
        return A, B
    raise ContractViolation(f"unknown model {model.name!r}")


def linearize(model, x_bar, u_bar, cell=-1):
    """First-order affine model of the mean dynamics around (x_bar, u_bar).

    The offset is chosen so the model is exact at the expansion point. Wrap
    dimensions are left unwrapped: the model lives on the local chart around
    x_bar."""
    x_bar = np.asarray(x_bar, dtype=float)
    u_bar = np.asarray(u_bar, dtype=float)
    A, B = jacobians(model, x_bar, u_bar)
    f0 = _unwrapped_mean(model, x_bar, u_bar)
    c = f0 - A @ x_bar - B @ u_bar
    return AffineModel(A=A, B=B, c=c, cell=int(cell))


def _unwrapped_mean(model, x, u):
    """Mean next state without wrapping angle dimensions, continuous in x."""
    if model.name == "dubins":
        p = model.params
        tau, alpha = p["tau"], p["alpha"]
        return np.array(
            [
                x[0] + tau * u[1] * np.cos(x[2]),
                x[1] + tau * u[1] * np.sin(x[2]),
                x[2] + tau * alpha * u[0],
            ]
        )
    return deterministic_mean(model, x, u)


def pwa_table(model, partition, actions, policy):
    """Per-cell affine models under the synthesized policy.

    Neutral cells linearize at (cell center, certified set center); goal
    cells at (cell center, input box center). Unsafe cells and the outside
    state get None."""
    table = [None] * partition.num_cells
    u_mid = model.input_box.center
    for i in range(partition.num_cells):
        label = partition.labels[i]
        if label == NEUTRAL:
            a = int(policy.action[i])
            if a < 0:
                raise ContractViolation(
                    f"policy has no action for non-terminal cell {i}"
                )
            u_bar = actions.ball(a).center
        elif label == GOAL:
            u_bar = u_mid
        else:
            continue
        table[i] = linearize(model, cell_center(partition, i), u_bar, cell=i)
    return table

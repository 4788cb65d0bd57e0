"""Benchmark dynamics: stochastic difference equations, noise sampling, and
interval bounds on the noise-free mean over boxes of states and inputs.

All three systems have additive diagonal Gaussian noise per affected
dimension, which is what makes closed-form transition intervals possible in
the abstraction layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Wrap angles into [-pi, pi)."""
    return (np.asarray(theta) + math.pi) % TWO_PI - math.pi


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by element-wise lo <= hi."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape:
            raise ContractViolation(f"box shape mismatch: {lo.shape} vs {hi.shape}")
        if np.any(lo > hi):
            raise ContractViolation("box has lo > hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return self.lo.shape[0]

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def width(self):
        return self.hi - self.lo

    def contains(self, x, tol=0.0):
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def intersect(self, other: "Box") -> "Box | None":
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        if np.any(lo > hi):
            return None
        return Box(lo, hi)


@dataclass(frozen=True)
class SystemModel:
    """A benchmark system: dynamics selector, noise law, boxes, spec regions.

    noise_std is per state dimension (0 marks a noise-free dimension);
    wrap_dims lists state dimensions treated as angles wrapped to [-pi, pi].
    The initial distribution is a point mass at initial_state.
    """

    name: str
    state_box: Box
    input_box: Box
    noise_std: np.ndarray
    params: dict
    goal_box: Box
    unsafe_boxes: tuple
    initial_state: np.ndarray
    wrap_dims: tuple = ()
    clamp_dims: tuple = ()
    outside_unsafe: bool = True

    def __post_init__(self):
        object.__setattr__(self, "noise_std", np.asarray(self.noise_std, dtype=float))
        object.__setattr__(
            self, "initial_state", np.asarray(self.initial_state, dtype=float)
        )
        object.__setattr__(self, "unsafe_boxes", tuple(self.unsafe_boxes))
        object.__setattr__(self, "wrap_dims", tuple(sorted(self.wrap_dims)))
        object.__setattr__(self, "clamp_dims", tuple(sorted(self.clamp_dims)))
        if self.noise_std.shape[0] != self.n_x:
            raise ContractViolation("noise_std dimension mismatch")
        if np.any(self.noise_std < 0):
            raise ContractViolation("noise_std must be nonnegative")
        if self.initial_state.shape[0] != self.n_x:
            raise ContractViolation("initial_state dimension mismatch")
        for d in self.wrap_dims:
            lo, hi = self.state_box.lo[d], self.state_box.hi[d]
            if not (math.isclose(lo, -math.pi) and math.isclose(hi, math.pi)):
                raise ContractViolation(f"wrap dim {d} state box must be [-pi, pi]")
        if set(self.wrap_dims) & set(self.clamp_dims):
            raise ContractViolation("a dimension cannot both wrap and clamp")

    @property
    def n_x(self):
        return self.state_box.dim

    @property
    def n_u(self):
        return self.input_box.dim


def _check_dims(model, x, u, w=None):
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape[-1] != model.n_x:
        raise ContractViolation(f"state dim {x.shape[-1]} != {model.n_x}")
    if u.shape[-1] != model.n_u:
        raise ContractViolation(f"input dim {u.shape[-1]} != {model.n_u}")
    if w is not None:
        w = np.asarray(w, dtype=float)
        if w.shape[-1] != model.n_x:
            raise ContractViolation(f"noise dim {w.shape[-1]} != {model.n_x}")
    return x, u, w


def step(model: SystemModel, x, u, w):
    """One step of the stochastic difference equation x' = f(x, u, w).

    Accepts batched x/u/w with matching leading shapes. Wrap dimensions of
    the output are wrapped into [-pi, pi).
    """
    x, u, w = _check_dims(model, x, u, w)
    p = model.params
    if model.name == "double_integrator":
        tau = p["tau"]
        x1 = x[..., 0] + tau * x[..., 1] + 0.5 * tau**2 * u[..., 0] + w[..., 0]
        x2 = x[..., 1] + tau * u[..., 0] + w[..., 1]
        return np.stack([x1, x2], axis=-1)
    if model.name == "mountain_car":
        tau, power, grav = p["tau"], p["power"], p["gravity"]
        # equations kept verbatim: the velocity noise enters v' and is then
        # subtracted again inside the position update
        v_next = x[..., 1] + tau * (power * u[..., 0] - grav * np.cos(x[..., 0])) + w[..., 1]
        if 1 in model.clamp_dims:
            # velocity saturates at its domain bounds before moving the car
            v_next = np.clip(
                v_next, model.state_box.lo[1], model.state_box.hi[1]
            )
        p_next = x[..., 0] + tau * (v_next - w[..., 1]) + w[..., 0]
        return np.stack([p_next, v_next], axis=-1)
    if model.name == "dubins":
        tau, alpha = p["tau"], p["alpha"]
        xn = x[..., 0] + tau * u[..., 1] * np.cos(x[..., 2])
        yn = x[..., 1] + tau * u[..., 1] * np.sin(x[..., 2])
        tn = wrap_angle(x[..., 2] + tau * alpha * u[..., 0] + w[..., 2])
        return np.stack([xn, yn, tn], axis=-1)
    raise ContractViolation(f"unknown model {model.name!r}")


def deterministic_mean(model: SystemModel, x, u):
    """Noise-free successor f(x, u, 0)."""
    x = np.asarray(x, dtype=float)
    return step(model, x, u, np.zeros(x.shape[:-1] + (model.n_x,)))


def sample_noise(model: SystemModel, rng: np.random.Generator):
    """One Gaussian noise draw with the model's per-dimension std."""
    return rng.standard_normal(model.n_x) * model.noise_std


def _interval_cos(lo, hi):
    """Range of cos over [lo, hi], vectorized; handles critical points."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    clo, chi = np.cos(lo), np.cos(hi)
    cmin = np.minimum(clo, chi)
    cmax = np.maximum(clo, chi)
    # cos attains +1 at 2*pi*k, -1 at pi + 2*pi*k
    has_top = np.floor(hi / TWO_PI) >= np.ceil(lo / TWO_PI)
    has_bot = np.floor((hi - math.pi) / TWO_PI) >= np.ceil((lo - math.pi) / TWO_PI)
    cmax = np.where(has_top, 1.0, cmax)
    cmin = np.where(has_bot, -1.0, cmin)
    return cmin, cmax


def _interval_sin(lo, hi):
    return _interval_cos(lo - 0.5 * math.pi, hi - 0.5 * math.pi)


def _interval_prod(alo, ahi, blo, bhi):
    """Four-corner product of two interval arrays."""
    c1, c2, c3, c4 = alo * blo, alo * bhi, ahi * blo, ahi * bhi
    return (
        np.minimum(np.minimum(c1, c2), np.minimum(c3, c4)),
        np.maximum(np.maximum(c1, c2), np.maximum(c3, c4)),
    )


def mean_image_intervals(model: SystemModel, cells_lo, cells_hi, ball: Box):
    """Per-dimension bounds of {f(x, u, 0) : x in cell, u in ball}, vectorized
    over an array of cells of shape (L, n_x).

    Wrap dimensions are returned pre-wrap (the raw angle interval); callers
    that need a wrapped box must fold the seam themselves.
    """
    cl = np.atleast_2d(np.asarray(cells_lo, dtype=float))
    ch = np.atleast_2d(np.asarray(cells_hi, dtype=float))
    ul, uh = ball.lo, ball.hi
    p = model.params
    if model.name == "double_integrator":
        tau = p["tau"]
        lo0 = cl[:, 0] + tau * cl[:, 1] + 0.5 * tau**2 * ul[0]
        hi0 = ch[:, 0] + tau * ch[:, 1] + 0.5 * tau**2 * uh[0]
        lo1 = cl[:, 1] + tau * ul[0]
        hi1 = ch[:, 1] + tau * uh[0]
        return np.stack([lo0, lo1], axis=1), np.stack([hi0, hi1], axis=1)
    if model.name == "mountain_car":
        tau, power, grav = p["tau"], p["power"], p["gravity"]
        cmin, cmax = _interval_cos(cl[:, 0], ch[:, 0])
        vlo = cl[:, 1] + tau * (power * ul[0] - grav * cmax)
        vhi = ch[:, 1] + tau * (power * uh[0] - grav * cmin)
        # p' = p - tau^2 g cos(p) + tau v + tau^2 P u is monotone in p
        # because tau^2 g < 1, so endpoint evaluation is tight
        plo = cl[:, 0] - tau**2 * grav * np.cos(cl[:, 0]) + tau * cl[:, 1] + tau**2 * power * ul[0]
        phi = ch[:, 0] - tau**2 * grav * np.cos(ch[:, 0]) + tau * ch[:, 1] + tau**2 * power * uh[0]
        return np.stack([plo, vlo], axis=1), np.stack([phi, vhi], axis=1)
    if model.name == "dubins":
        tau, alpha = p["tau"], p["alpha"]
        cmin, cmax = _interval_cos(cl[:, 2], ch[:, 2])
        smin, smax = _interval_sin(cl[:, 2], ch[:, 2])
        dxlo, dxhi = _interval_prod(np.full_like(cmin, ul[1]), np.full_like(cmin, uh[1]), cmin, cmax)
        dylo, dyhi = _interval_prod(np.full_like(smin, ul[1]), np.full_like(smin, uh[1]), smin, smax)
        xlo, xhi = cl[:, 0] + tau * dxlo, ch[:, 0] + tau * dxhi
        ylo, yhi = cl[:, 1] + tau * dylo, ch[:, 1] + tau * dyhi
        tlo = cl[:, 2] + tau * alpha * ul[0]
        thi = ch[:, 2] + tau * alpha * uh[0]
        return np.stack([xlo, ylo, tlo], axis=1), np.stack([xhi, yhi, thi], axis=1)
    raise ContractViolation(f"unknown model {model.name!r}")


def mean_image_bounds(model: SystemModel, cell: Box, ball: Box) -> Box:
    """Box containing every noise-free successor mean of cell x ball.

    Wrap dimensions: if the raw angle interval crosses the seam (or spans a
    full turn) the full [-pi, pi] range is returned for that dimension.
    """
    lo, hi = mean_image_intervals(model, cell.lo[None, :], cell.hi[None, :], ball)
    lo, hi = lo[0].copy(), hi[0].copy()
    for d in model.wrap_dims:
        a, b = lo[d], hi[d]
        if b - a >= TWO_PI or math.floor((a + math.pi) / TWO_PI) != math.floor(
            (b + math.pi) / TWO_PI
        ):
            lo[d], hi[d] = -math.pi, math.pi
        else:
            lo[d], hi[d] = wrap_angle(a), wrap_angle(b)
    return Box(lo, hi)


def double_integrator(**overrides) -> SystemModel:
    """Planar double integrator, fully affine, full-state noise."""
    kw = dict(
        name="double_integrator",
        state_box=Box([-21.0, -21.0], [21.0, 21.0]),
        input_box=Box([-5.0], [5.0]),
        noise_std=[math.sqrt(0.15), math.sqrt(0.15)],
        params={"tau": 1.0},
        goal_box=Box([-5.0, -3.0], [5.0, 3.0]),
        unsafe_boxes=(),
        initial_state=[10.0, 0.0],
    )
    kw.update(overrides)
    return SystemModel(**kw)


def mountain_car(**overrides) -> SystemModel:
    """Underpowered car on a slope; state (position, velocity).

    The velocity dimension saturates at its bounds (the car cannot fail by
    overspeeding); only leaving the position range ends an episode. Noise
    standard deviations are the square roots of the stated per-dimension
    variances."""
    kw = dict(
        name="mountain_car",
        state_box=Box([-1.2, -0.07], [0.6, 0.07]),
        input_box=Box([-1.0], [1.0]),
        noise_std=[math.sqrt(0.005), math.sqrt(0.0005)],
        params={"tau": 2.0, "power": 0.0015, "gravity": 0.0025},
        goal_box=Box([0.45, -0.07], [0.6, 0.07]),
        unsafe_boxes=(),
        initial_state=[-0.5, 0.0],
        clamp_dims=(1,),
    )
    kw.update(overrides)
    return SystemModel(**kw)


def dubins_car(**overrides) -> SystemModel:
    """Dubins vehicle (x, y, heading); noisy steering, wrapped heading."""
    kw = dict(
        name="dubins",
        state_box=Box([-10.0, -10.0, -math.pi], [10.0, 10.0, math.pi]),
        input_box=Box([-0.5 * math.pi, -3.0], [0.5 * math.pi, 3.0]),
        noise_std=[0.0, 0.0, 0.1],
        params={"tau": 1.0, "alpha": 0.85},
        goal_box=Box([-10.0, 5.0, -math.pi], [-5.0, 10.0, math.pi]),
        unsafe_boxes=(Box([0.0, 0.0, -math.pi], [2.0, 2.0, math.pi]),),
        initial_state=[5.0, -5.0, 0.5 * math.pi],
        wrap_dims=(2,),
    )
    kw.update(overrides)
    return SystemModel(**kw)


MODEL_FACTORIES = {
    "double_integrator": double_integrator,
    "mountain_car": mountain_car,
    "dubins": dubins_car,
}

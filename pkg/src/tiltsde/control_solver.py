"""Value functions, optimal and approximate controls, and the optimal initial law.

The primary route solves the linear backward equation for the Cole-Hopf
field ``exp(v / alpha)`` on a lattice; Feynman-Kac Monte Carlo gives an
independent pointwise estimate. Controls are feedback maps ``u(t, y)`` that
look up the gradient at the last time node not after ``t`` and interpolate
multilinearly in space.
"""

from __future__ import annotations

import logging
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from . import _pde
from .diffusion_core import DiffusionSpec, PathEnsemble, TimeGrid, make_time_grid, simulate_sde
from .errors import DegenerateTiltError, InvalidArgumentError
from .grids import GridDensity, SpatialGrid, interpolate, require_same_grid

log = logging.getLogger(__name__)

__all__ = [
    "ValueField",
    "ControlPolicy",
    "Estimate",
    "solve_value_grid",
    "solve_expected_reward_grid",
    "fk_value_estimate",
    "optimal_control",
    "approx_control",
    "approx_control_grid",
    "zero_control",
    "optimal_init_distribution",
    "sample_init_distribution",
    "pretrained_marginals",
    "hj_residual",
    "nonlinear_hj_value",
]

POLICY_KINDS = ("optimal-grid", "optimal-fk", "approx-classifier", "zero", "custom")


class Estimate(NamedTuple):
    value: np.ndarray
    std_error: np.ndarray


def _field_values(r_target, grid: SpatialGrid) -> np.ndarray:
    return np.asarray(r_target(grid.points()), dtype=float).reshape(grid.shape)


@dataclass
class ValueField:
    """``v(t_k, y)`` on ``time_grid x grid``; level ``k`` is ``v[k]``."""

    time_grid: TimeGrid
    grid: SpatialGrid
    v: np.ndarray
    alpha: float
    spec: Optional[DiffusionSpec] = None
    startup_steps: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def hopf_values(self) -> np.ndarray:
        return np.exp(self.v / self.alpha)

    @property
    def initial(self) -> np.ndarray:
        return self.v[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.v[-1]

    def level(self, t: float) -> int:
        return self.time_grid.index_of(t)

    def value(self, t: float, y) -> np.ndarray:
        return interpolate(self.grid, self.v[self.level(t)], y)[0]

    def gradient(self, k: int, order: int = 2) -> np.ndarray:
        if order == 4:
            return _pde.fourth_order_gradient(self.grid, self.v[k])
        return _pde.central_gradient(self.grid, self.v[k])

    def header(self) -> dict:
        return {
            "format": "tiltsde-grid/1",
            "dtype": "<f8",
            "order": "C",
            "shape": [self.time_grid.n_steps + 1, *self.grid.shape],
            "time": {"t_start": self.time_grid.t_start, "t_end": self.time_grid.t_end,
                     "n_steps": self.time_grid.n_steps},
            "grid": self.grid.to_dict(),
            "alpha": self.alpha,
            "field": "v",
        }


def _lin_solve(spec, r_target, grid, time_grid, n_steps, startup):
    if spec.dim != grid.dim:
        raise InvalidArgumentError(f"spec has dimension {spec.dim}, grid has {grid.dim}")
    if grid.dim > 2:
        raise InvalidArgumentError("grid solves are limited to d <= 2")
    if time_grid is None:
        time_grid = make_time_grid(0.0, spec.horizon, n_steps)
    return time_grid, _field_values(r_target, grid)


def solve_value_grid(spec: DiffusionSpec, r_target: Callable, alpha: float, grid: SpatialGrid,
                     time_grid: Optional[TimeGrid] = None, n_steps: int = 512,
                     startup_steps: int = 0) -> ValueField:
    """Solve for ``v`` through the linear equation satisfied by ``exp(v / alpha)``.

    The terminal field ``exp((r - max r) / alpha)`` is stepped backward with
    Crank-Nicolson (ADI in 2-D) after ``startup_steps`` implicit-Euler
    smoothing steps; every level is rescaled by its maximum so that the
    logarithm never under- or overflows.
    """
    if not alpha > 0:
        raise InvalidArgumentError("alpha must be positive")
    time_grid, r = _lin_solve(spec, r_target, grid, time_grid, n_steps, startup_steps)
    rmax = float(r.max())
    levels, shift = _pde.backward_sweep(spec, grid, time_grid, np.exp((r - rmax) / alpha),
                                        startup=startup_steps, positive=True, rescale=True)
    v = alpha * (np.log(levels) + (shift + rmax / alpha).reshape((-1,) + (1,) * grid.dim))
    v[-1] = r
    return ValueField(time_grid, grid, v, float(alpha), spec, startup_steps)


def solve_expected_reward_grid(spec: DiffusionSpec, r_target: Callable, grid: SpatialGrid,
                               time_grid: Optional[TimeGrid] = None, n_steps: int = 512,
                               startup_steps: int = 0) -> ValueField:
    """``w(t, y) = E[r(Y_T) | Y_t = y]`` by the same linear solver (stored with ``alpha = 1``)."""
    time_grid, r = _lin_solve(spec, r_target, grid, time_grid, n_steps, startup_steps)
    levels, _ = _pde.backward_sweep(spec, grid, time_grid, r, startup=startup_steps)
    levels[-1] = r
    return ValueField(time_grid, grid, levels, 1.0, spec, startup_steps, {"field": "expected-reward"})


def hj_residual(vf: ValueField, interior: float = 0.5) -> dict:
    """Residual of ``v_t + 1/2 s^2 Lap v + b . grad v + s^2 |grad v|^2 / (2 alpha)``.

    Evaluated at time midpoints with centred differences, averaging the two
    neighbouring levels in space. Returns RMS and max over the central
    ``interior`` fraction of every axis.
    """
    spec, grid, tg = vf.spec, vf.grid, vf.time_grid
    mask = grid.interior_mask(interior)
    pts = grid.points()
    sq = []
    worst = 0.0
    for k in range(tg.n_steps):
        t = tg.nodes[k] + 0.5 * tg.dt
        vm = 0.5 * (vf.v[k] + vf.v[k + 1])
        vt = (vf.v[k + 1] - vf.v[k]) / tg.dt
        g = _pde.central_gradient(grid, vm)
        s2 = float(spec.diffusion(t)) ** 2
        b = np.asarray(spec.drift(t, pts)).reshape(grid.shape + (grid.dim,))
        res = vt + 0.5 * s2 * _pde.laplacian(grid, vm) + np.sum(b * g, -1) + s2 / (2 * vf.alpha) * np.sum(g * g, -1)
        r = res[mask]
        sq.append(np.mean(r**2))
        worst = max(worst, float(np.abs(r).max()))
    return {"rms": float(np.sqrt(np.mean(sq))), "max": worst, "per_step_rms": np.sqrt(np.array(sq))}


def nonlinear_hj_value(spec: DiffusionSpec, r_target: Callable, alpha: float, grid: SpatialGrid) -> np.ndarray:
    """``v(0, .)`` from an explicit scheme for the nonlinear equation (small grids only)."""
    return _pde.explicit_hj(spec, grid, _field_values(r_target, grid), alpha, spec.horizon)


# --------------------------------------------------------------------------
# Feynman-Kac


def _sub_grid(spec, t, n_steps):
    steps = max(1, int(round(n_steps * (spec.horizon - t) / spec.horizon)))
    return make_time_grid(t, spec.horizon, steps)


def fk_value_estimate(spec: DiffusionSpec, r_target: Callable, alpha: float, t: float, y,
                      n_paths: int = 100_000, seed: int = 0, n_steps: int = 512) -> Estimate:
    """``alpha log E[exp(r(Y_T) / alpha) | Y_t = y]`` with a delta-method standard error."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if not 0 <= t <= spec.horizon:
        raise InvalidArgumentError("t outside the horizon")
    if t >= spec.horizon - 1e-12:
        return Estimate(float(r_target(y[None])[0]), 0.0)
    ens = simulate_sde(spec, _sub_grid(spec, t, n_steps), y, n_paths=n_paths, seed=seed, record="ends")
    ok = ens.valid
    if not ok.any():
        raise DegenerateTiltError("every Feynman-Kac path diverged")
    a = np.asarray(r_target(ens.terminal[ok]), dtype=float) / alpha
    n = a.size
    lme = logsumexp(a) - np.log(n)
    w = np.exp(a - lme)
    se = alpha * np.std(w, ddof=1) / np.sqrt(n)
    return Estimate(float(alpha * lme), float(se))


def fk_control_estimate(spec: DiffusionSpec, r_target, alpha: float, t: float, y,
                        n_paths: int = 100_000, seed: int = 0, n_steps: int = 512) -> Estimate:
    """Monte Carlo ``u*(t, y)`` from the tangent process, self-normalised by ``exp(r / alpha)``."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    sig2 = float(spec.diffusion(t)) ** 2
    if t >= spec.horizon - 1e-12:
        return Estimate(sig2 / alpha * r_target.gradient(y[None])[0], np.zeros(y.size))
    ens = simulate_sde(spec, _sub_grid(spec, t, n_steps), y, n_paths=n_paths, seed=seed, record="ends", tangent=True)
    ok = ens.valid
    yt = ens.terminal[ok]
    a = np.asarray(r_target(yt), dtype=float) / alpha
    w = np.exp(a - a.max())
    path = np.einsum("nj,nji->ni", r_target.gradient(yt), ens.tangent[ok]) / alpha
    num = (w[:, None] * path).mean(0)
    den = w.mean()
    ratio = num / den
    infl = (w[:, None] * path - ratio * w[:, None]) / den
    return Estimate(sig2 * ratio, sig2 * infl.std(0, ddof=1) / np.sqrt(w.size))


# --------------------------------------------------------------------------
# controls


class ControlPolicy:
    """Feedback control ``u(t, y)``; ``kind`` records how it was obtained."""

    def __init__(self, fn: Callable, kind: str, dim: int):
        if kind not in POLICY_KINDS:
            raise InvalidArgumentError(f"unknown policy kind {kind!r}")
        self.fn = fn
        self.kind = kind
        self.dim = dim
        self.far_evaluations = 0

    def __call__(self, t: float, y) -> np.ndarray:
        return self.fn(t, np.atleast_2d(np.asarray(y, dtype=float)))

    def plus(self, delta: Callable, kind: str = "custom") -> "ControlPolicy":
        """``u + delta`` as a new policy."""
        return ControlPolicy(lambda t, y: self(t, y) + delta(t, y), kind, self.dim)

    def scaled(self, c: float) -> "ControlPolicy":
        return ControlPolicy(lambda t, y: c * self(t, y), "custom", self.dim)


def zero_control(dim: int) -> ControlPolicy:
    return ControlPolicy(lambda t, y: np.zeros_like(y), "zero", dim)


class _GridGradientPolicy(ControlPolicy):
    def __init__(self, vf: ValueField, scale: float, kind: str, cache_levels: int = 8):
        super().__init__(self._eval, kind, vf.grid.dim)
        self.vf = vf
        self.scale = scale
        self._cache: OrderedDict = OrderedDict()
        self._cache_levels = cache_levels

    def _grad(self, k):
        g = self._cache.get(k)
        if g is None:
            g = self.vf.gradient(k)
            self._cache[k] = g
            if len(self._cache) > self._cache_levels:
                self._cache.popitem(last=False)
        return g

    def _eval(self, t, y):
        k = self.vf.level(t)
        tk = self.vf.time_grid.nodes[k]
        vals, far = interpolate(self.vf.grid, self._grad(k), y)
        if far:
            if self.far_evaluations == 0:
                log.warning("control evaluated more than 2 cells outside the grid; clamping")
            self.far_evaluations += far
        return (self.scale * float(self.vf.spec.diffusion(tk)) ** 2) * vals


def optimal_control(vf: ValueField) -> ControlPolicy:
    """``u*(t, y) = sigma(t)^2 grad v(t, y) / alpha`` from the gridded value."""
    return _GridGradientPolicy(vf, 1.0 / vf.alpha, "optimal-grid")


def approx_control_grid(w: ValueField, alpha: float) -> ControlPolicy:
    """``sigma(t)^2 grad E[r(Y_T) | Y_t = y] / alpha`` from :func:`solve_expected_reward_grid`."""
    return _GridGradientPolicy(w, 1.0 / alpha, "approx-classifier")


def optimal_fk_policy(spec, r_target, alpha, n_paths: int = 20_000, seed: int = 0, n_steps: int = 512) -> ControlPolicy:
    """Pointwise Monte Carlo ``u*``; expensive, meant for spot checks."""

    def fn(t, y):
        return np.stack([fk_control_estimate(spec, r_target, alpha, t, yi, n_paths, seed, n_steps).value for yi in y])

    return ControlPolicy(fn, "optimal-fk", spec.dim)


def approx_control(spec: DiffusionSpec, r_target, alpha: float, t: float, y, n_paths: int = 100_000,
                   seed: int = 0, method: str = "malliavin", n_steps: int = 512, fd_step: float = 1e-2) -> Estimate:
    """``sigma(t)^2 grad E[r(Y_T) | Y_t = y] / alpha`` by Monte Carlo.

    ``malliavin`` averages ``grad r(Y_T)^T Z_T`` with ``dZ = (grad b) Z dt``;
    ``resimulation`` takes central differences of the mean over common
    random numbers.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    d = y.size
    sig2 = float(spec.diffusion(t)) ** 2
    scale = sig2 / alpha
    if t >= spec.horizon - 1e-12:
        return Estimate(scale * r_target.gradient(y[None])[0], np.zeros(d))
    tg = _sub_grid(spec, t, n_steps)
    if method == "malliavin":
        ens = simulate_sde(spec, tg, y, n_paths=n_paths, seed=seed, record="ends", tangent=True)
        ok = ens.valid
        g = np.einsum("nj,nji->ni", r_target.gradient(ens.terminal[ok]), ens.tangent[ok])
        return Estimate(scale * g.mean(0), scale * g.std(0, ddof=1) / np.sqrt(g.shape[0]))
    if method == "resimulation":
        mean = np.empty(d)
        se = np.empty(d)
        for j in range(d):
            e = np.zeros(d)
            e[j] = fd_step
            up = simulate_sde(spec, tg, y + e, n_paths=n_paths, seed=seed, record="ends")
            dn = simulate_sde(spec, tg, y - e, n_paths=n_paths, seed=seed, record="ends")
            ok = up.valid & dn.valid
            diff = (r_target(up.terminal[ok]) - r_target(dn.terminal[ok])) / (2 * fd_step)
            mean[j] = diff.mean()
            se[j] = diff.std(ddof=1) / np.sqrt(diff.size)
        return Estimate(scale * mean, scale * se)
    raise InvalidArgumentError(f"unknown method {method!r}")


# --------------------------------------------------------------------------
# initial law


def optimal_init_distribution(vf: ValueField, p_noise: GridDensity) -> GridDensity:
    """``exp(v(0, .) / alpha) p_noise / C'``; ``log_normalizer`` is ``log C'``."""
    require_same_grid(p_noise, GridDensity(vf.grid, np.ones(vf.grid.shape)))
    base = p_noise.normalized()
    with np.errstate(divide="ignore"):
        logv = np.log(base.values) + vf.initial / vf.alpha
    return GridDensity.from_log_values(vf.grid, logv)


def sample_init_distribution(vf: ValueField, n_paths: int, seed: int, s: Optional[float] = None,
                             noise_variance: float = 1.0, horizon: float = 1.0,
                             n_steps: Optional[int] = None, sigma_prime: Optional[Callable] = None) -> PathEnsemble:
    """Samples of the optimal initial law through an auxiliary control problem.

    A drift-free process ``dY' = sigma' dB`` with ``int sigma'^2 = s`` starts
    from ``N(0, (noise_variance - s) I)`` (a point mass at 0 when ``s``
    equals the noise variance) so that, uncontrolled, it ends at the noise
    law. The terminal reward ``v(0, .)`` is tilted in with the same
    ``alpha``; the terminal states of the returned ensemble are the samples.

    Only the point-mass start (the default) reproduces the optimal initial law
    exactly. With ``s`` below the noise variance each starting point is tilted
    separately, so the output follows ``int p_fix(x) exp(v(0, y) / alpha)
    P(y | x) / Z(x) dx`` instead; a warning is issued.
    """
    if sigma_prime is None:
        s = noise_variance if s is None else float(s)
        if not 0 < s <= noise_variance:
            raise InvalidArgumentError(f"need 0 < s <= noise variance {noise_variance:g}, got s = {s:g}")
        sp = np.sqrt(s / horizon)
        sigma_prime = lambda t: sp  # noqa: E731
    else:
        s = float(trapezoid([sigma_prime(t) ** 2 for t in np.linspace(0, horizon, 1025)], dx=horizon / 1024))
        if not 0 < s <= noise_variance + 1e-9:
            raise InvalidArgumentError(f"integrated sigma'^2 = {s:g} exceeds the noise variance {noise_variance:g}")
    d = vf.grid.dim
    aux = DiffusionSpec(d, lambda t, y: np.zeros_like(y), sigma_prime, horizon, name="init-sampler")
    tg = make_time_grid(0.0, horizon, n_steps or vf.time_grid.n_steps)
    terminal = lambda pts: interpolate(vf.grid, vf.initial, pts)[0]  # noqa: E731
    aux_field = solve_value_grid(aux, terminal, vf.alpha, vf.grid, tg, startup_steps=vf.startup_steps)
    q_star = optimal_control(aux_field)
    fix_var = noise_variance - s
    if fix_var <= 1e-12:
        init = np.zeros(d)
    else:
        warnings.warn(f"s = {s:g} < noise variance {noise_variance:g}: the terminal law is a per-start tilt, "
                      "not the optimal initial law", RuntimeWarning, stacklevel=2)
        sd = np.sqrt(fix_var)
        init = lambda rng, n: sd * rng.standard_normal((n, d))  # noqa: E731
    ens = simulate_sde(aux, tg, init, control=q_star, n_paths=n_paths, seed=seed, record="ends")
    ens.extras["aux_field"] = aux_field
    ens.extras["s"] = s
    return ens


# --------------------------------------------------------------------------
# pretrained marginals


def pretrained_marginals(spec: DiffusionSpec, grid: SpatialGrid, time_grid: TimeGrid, p_noise: GridDensity,
                         levels=None, startup_steps: int = 0) -> dict:
    """Gridded laws ``Q_t`` of the uncontrolled backward process started at ``p_noise``.

    The evolution is the exact adjoint of the backward program used by
    :func:`solve_value_grid`, so ``sum Q_k exp(v_k / alpha)`` is the same
    at every level. Returns ``{k: GridDensity}``; tiny negative values from
    the non-monotone scheme are clipped and the clipped mass logged.
    """
    masses = _pde.forward_sweep(spec, grid, time_grid, p_noise.probabilities.reshape(grid.shape),
                                startup=startup_steps, keep=levels)
    out = {}
    for k, q in masses.items():
        neg = float(-q[q < 0].sum())
        if neg > 1e-12:
            log.debug("clipped %.3g negative mass at level %d", neg, k)
        out[k] = GridDensity(grid, np.clip(q, 0, None) / grid.cell_volume)
    return out

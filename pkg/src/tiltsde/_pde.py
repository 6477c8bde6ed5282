"""Finite-difference machinery for backward Kolmogorov equations.

The generator ``L = 1/2 sigma(t)^2 Laplacian + b(t, y) . grad`` is split
into one tridiagonal operator per axis (central differences, reflecting
ghost nodes, rows summing to zero). A backward step is a short program of
``mul`` (``f += s L_a f``) and ``solve`` (``f = (I - s L_a)^-1 f``)
instructions: Crank-Nicolson in 1-D, Peaceman-Rachford in 2-D, and pairs
of implicit half steps, on request, for the first steps after the terminal
time (useful for rough terminal data).

Running the transposed program forward in time gives the discrete
Fokker-Planck evolution that is exactly dual to the backward one.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.linalg import solve_banded

from .diffusion_core import DiffusionSpec, TimeGrid
from .errors import InvalidArgumentError, NumericalRangeError
from .grids import SpatialGrid

log = logging.getLogger(__name__)


class AxisOperator:
    """Tridiagonal piece of the generator acting along one axis.

    Coefficient arrays are stored with that axis moved last.
    """

    def __init__(self, axis: int, lo: np.ndarray, di: np.ndarray, up: np.ndarray):
        self.axis = axis
        self.lo, self.di, self.up = lo, di, up

    @classmethod
    def build(cls, grid: SpatialGrid, axis: int, half_var: float, drift_comp: np.ndarray) -> "AxisOperator":
        h = grid.spacing[axis]
        diff = half_var / h**2
        adv = np.moveaxis(drift_comp, axis, -1) / (2 * h)
        lo = diff - adv
        up = diff + adv
        di = np.full_like(lo, -2 * diff)
        up[..., 0] += lo[..., 0]
        lo[..., 0] = 0.0
        lo[..., -1] += up[..., -1]
        up[..., -1] = 0.0
        return cls(axis, lo, di, up)

    def transposed(self) -> "AxisOperator":
        lo = np.zeros_like(self.lo)
        up = np.zeros_like(self.up)
        lo[..., 1:] = self.up[..., :-1]
        up[..., :-1] = self.lo[..., 1:]
        return AxisOperator(self.axis, lo, self.di, up)

    def _apply_last(self, f):
        out = self.di * f
        out[..., 1:] += self.lo[..., 1:] * f[..., :-1]
        out[..., :-1] += self.up[..., :-1] * f[..., 1:]
        return out

    def mul(self, f: np.ndarray, s: float) -> np.ndarray:
        g = np.moveaxis(f, self.axis, -1)
        return np.moveaxis(g + s * self._apply_last(g), -1, self.axis)

    def solve(self, f: np.ndarray, s: float) -> np.ndarray:
        g = np.moveaxis(f, self.axis, -1)
        shape = g.shape
        rhs = g.reshape(-1)
        lo = self.lo.reshape(-1)
        up = self.up.reshape(-1)
        ab = np.empty((3, rhs.size))
        ab[0, 0] = 0.0
        ab[0, 1:] = -s * up[:-1]
        ab[1] = 1.0 - s * self.di.reshape(-1)
        ab[2, :-1] = -s * lo[1:]
        ab[2, -1] = 0.0
        x = solve_banded((1, 1), ab, rhs, check_finite=False)
        return np.moveaxis(x.reshape(shape), -1, self.axis)


def generator(spec: DiffusionSpec, grid: SpatialGrid, t: float, points: Optional[np.ndarray] = None) -> list:
    if points is None:
        points = grid.points()
    sig = float(spec.diffusion(t))
    drift = np.asarray(spec.drift(t, points), dtype=float).reshape(grid.shape + (grid.dim,))
    return [AxisOperator.build(grid, a, 0.5 * sig**2, drift[..., a]) for a in range(grid.dim)]


def step_program(spec, grid, tgrid: TimeGrid, k: int, startup: int, points=None) -> list:
    """Instructions mapping level ``k + 1`` to level ``k``."""
    dt = tgrid.dt
    t_k = tgrid.nodes[k]
    if k >= tgrid.n_steps - startup:
        prog = []
        for t in (t_k + 0.5 * dt, t_k):
            ops = generator(spec, grid, t, points)
            prog += [("solve", op, 0.5 * dt) for op in ops]
        return prog
    ops = generator(spec, grid, t_k + 0.5 * dt, points)
    if len(ops) == 1:
        return [("mul", ops[0], 0.5 * dt), ("solve", ops[0], 0.5 * dt)]
    if len(ops) == 2:
        lx, ly = ops
        return [("mul", ly, 0.5 * dt), ("solve", lx, 0.5 * dt), ("mul", lx, 0.5 * dt), ("solve", ly, 0.5 * dt)]
    raise InvalidArgumentError("grid solver supports 1-D and 2-D lattices only")


def transpose_program(prog: list) -> list:
    return [(kind, op.transposed(), s) for kind, op, s in reversed(prog)]


def run_program(prog: list, f: np.ndarray) -> np.ndarray:
    for kind, op, s in prog:
        f = op.mul(f, s) if kind == "mul" else op.solve(f, s)
    return f


def _check_sigma(spec, tgrid):
    sig = np.array([float(spec.diffusion(t)) for t in tgrid.nodes])
    if np.any(sig <= 0):
        raise InvalidArgumentError("the grid solver needs a strictly positive diffusion coefficient")
    return sig


def log_cfl(spec, grid, tgrid):
    sig = _check_sigma(spec, tgrid)
    h = grid.spacing.min()
    log.debug("parabolic CFL number %.3g (implicit scheme, informational)", tgrid.dt * sig.max() ** 2 / h**2)


def backward_sweep(spec: DiffusionSpec, grid: SpatialGrid, tgrid: TimeGrid, terminal: np.ndarray,
                   startup: int = 0, positive: bool = False, rescale: bool = False):
    """Integrate ``dF/dt + L F = 0`` from ``terminal`` at ``t_end`` down to ``t_start``.

    Returns ``(levels, log_shift)`` with ``levels`` of shape ``(n + 1,) + grid.shape``.
    With ``rescale`` every level is divided by its maximum and the log of
    the factor accumulated in ``log_shift`` (so ``F_k = levels[k] * exp(log_shift[k])``).
    """
    log_cfl(spec, grid, tgrid)
    n = tgrid.n_steps
    points = grid.points()
    levels = np.empty((n + 1,) + grid.shape)
    shift = np.zeros(n + 1)
    f = np.asarray(terminal, dtype=float).reshape(grid.shape).copy()
    levels[n] = f
    for k in range(n - 1, -1, -1):
        f = run_program(step_program(spec, grid, tgrid, k, startup, points), f)
        shift[k] = shift[k + 1]
        if positive:
            fmin = f.min()
            if not fmin > 0 or not np.all(np.isfinite(f)):
                raise NumericalRangeError(
                    f"Cole-Hopf field lost positivity at time {tgrid.nodes[k]:.6g} (min {fmin:.3g}); "
                    "raise n_steps or alpha, or widen the grid if the tilted law reaches its edge"
                )
        if rescale:
            m = f.max()
            f = f / m
            shift[k] += np.log(m)
        levels[k] = f
    return levels, shift


def forward_sweep(spec: DiffusionSpec, grid: SpatialGrid, tgrid: TimeGrid, initial: np.ndarray,
                  startup: int = 0, keep: Optional[Iterable[int]] = None) -> dict:
    """Evolve cell masses with the transposed backward program; returns ``{k: masses}``."""
    n = tgrid.n_steps
    keep = set(range(n + 1)) if keep is None else {int(k) for k in keep}
    points = grid.points()
    q = np.asarray(initial, dtype=float).reshape(grid.shape).copy()
    out = {0: q.copy()} if 0 in keep else {}
    for k in range(n):
        q = run_program(transpose_program(step_program(spec, grid, tgrid, k, startup, points)), q)
        if k + 1 in keep:
            out[k + 1] = q.copy()
    return out


def central_gradient(grid: SpatialGrid, f: np.ndarray) -> np.ndarray:
    """Centered differences inside, second-order one-sided at the edges; shape ``grid.shape + (d,)``."""
    gs = np.gradient(f, *grid.spacing, edge_order=2)
    if grid.dim == 1:
        gs = [gs]
    return np.stack(gs, axis=-1)


def fourth_order_gradient(grid: SpatialGrid, f: np.ndarray) -> np.ndarray:
    """Five-point centered gradient; within two nodes of an edge falls back to :func:`central_gradient`."""
    out = central_gradient(grid, f)
    for a, h in enumerate(grid.spacing):
        g = np.moveaxis(f, a, -1)
        inner = (g[..., :-4] - 8 * g[..., 1:-3] + 8 * g[..., 3:-1] - g[..., 4:]) / (12 * h)
        view = np.moveaxis(out[..., a], a, -1)
        view[..., 2:-2] = inner
    return out


def laplacian(grid: SpatialGrid, f: np.ndarray) -> np.ndarray:
    """Centered Laplacian with reflecting ghost nodes."""
    out = np.zeros_like(f)
    for a, h in enumerate(grid.spacing):
        g = np.moveaxis(f, a, -1)
        lap = np.empty_like(g)
        lap[..., 1:-1] = g[..., 2:] - 2 * g[..., 1:-1] + g[..., :-2]
        lap[..., 0] = 2 * (g[..., 1] - g[..., 0])
        lap[..., -1] = 2 * (g[..., -2] - g[..., -1])
        out += np.moveaxis(lap, -1, a) / h**2
    return out


def explicit_hj(spec: DiffusionSpec, grid: SpatialGrid, terminal: np.ndarray, alpha: float,
                horizon: float, safety: float = 0.2) -> np.ndarray:
    """Explicit backward Euler scheme for the nonlinear HJ equation; returns ``v`` at time 0.

    Used only to cross-check the linearised solve on small grids.
    """
    h = grid.spacing.min()
    sig_max = max(float(spec.diffusion(t)) for t in np.linspace(0, horizon, 65))
    n = int(np.ceil(horizon / (safety * h**2 / sig_max**2)))
    dt = horizon / n
    points = grid.points()
    v = np.asarray(terminal, dtype=float).reshape(grid.shape).copy()
    for k in range(n, 0, -1):
        t = k * dt
        sig2 = float(spec.diffusion(t)) ** 2
        b = np.asarray(spec.drift(t, points)).reshape(grid.shape + (grid.dim,))
        g = central_gradient(grid, v)
        for a in range(grid.dim):
            edge = [slice(None)] * grid.dim
            for idx in (0, -1):
                edge[a] = idx
                g[tuple(edge) + (a,)] = 0.0
        rhs = 0.5 * sig2 * laplacian(grid, v) + np.sum(b * g, axis=-1) + sig2 / (2 * alpha) * np.sum(g * g, axis=-1)
        v = v + dt * rhs
    return v

"""Uniform spatial lattices, gridded densities and multilinear interpolation.

Nodes sit at ``lower + i * h`` for ``i = 0 .. n - 1``; node ``i`` owns the
cell ``[x_i - h/2, x_i + h/2]``, so ``sum(values) * cell_volume`` is the
total mass of a gridded density.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidArgumentError

__all__ = ["SpatialGrid", "GridDensity", "interpolate", "grid_from_extent"]


@dataclass(frozen=True)
class SpatialGrid:
    lower: tuple
    upper: tuple
    shape: tuple

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        shape = tuple(int(v) for v in np.atleast_1d(self.shape))
        if not (len(lower) == len(upper) == len(shape)):
            raise InvalidArgumentError("lower, upper and shape must have equal length")
        if not all(np.isfinite(lower + upper)):
            raise InvalidArgumentError("grid extents must be finite")
        if any(u <= l for l, u in zip(lower, upper)):
            raise InvalidArgumentError("grid upper bounds must exceed lower bounds")
        if any(n < 3 for n in shape):
            raise InvalidArgumentError("each grid axis needs at least 3 nodes")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "shape", shape)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> np.ndarray:
        return (np.asarray(self.upper) - np.asarray(self.lower)) / (np.asarray(self.shape) - 1)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def axes(self) -> list:
        return [np.linspace(l, u, n) for l, u, n in zip(self.lower, self.upper, self.shape)]

    def points(self) -> np.ndarray:
        """All nodes as an ``(size, dim)`` array in C (row-major) order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def interior_mask(self, fraction: float = 0.5) -> np.ndarray:
        """Nodes inside the central ``fraction`` of every axis."""
        mask = np.ones(self.shape, dtype=bool)
        for a, ax in enumerate(self.axes):
            centre = 0.5 * (self.lower[a] + self.upper[a])
            half = 0.5 * fraction * (self.upper[a] - self.lower[a])
            keep = np.abs(ax - centre) <= half + 1e-12
            bshape = [1] * self.dim
            bshape[a] = -1
            mask &= keep.reshape(bshape)
        return mask

    def coarsened(self, factor: int) -> "SpatialGrid":
        shape = tuple((n - 1) // factor + 1 for n in self.shape)
        return SpatialGrid(self.lower, self.upper, shape)

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper), "shape": list(self.shape)}


def grid_from_extent(lower, upper, shape) -> SpatialGrid:
    return SpatialGrid(tuple(np.atleast_1d(lower)), tuple(np.atleast_1d(upper)), tuple(np.atleast_1d(shape)))


def interpolate(grid: SpatialGrid, values: np.ndarray, points: np.ndarray, far_cells: float = 2.0):
    """Multilinear interpolation of a nodal field at arbitrary points.

    ``values`` has shape ``grid.shape + tail``. Points outside the lattice
    are clamped to the boundary. Returns ``(interpolated, n_far)`` where
    ``n_far`` counts points lying more than ``far_cells`` cells outside.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    d = grid.dim
    if points.shape[1] != d:
        raise InvalidArgumentError(f"points have dimension {points.shape[1]}, grid has {d}")
    tail = values.shape[d:]
    flat = values.reshape((grid.size,) + tail)
    n = points.shape[0]
    far = np.zeros(n, dtype=bool)
    base = np.zeros(n, dtype=np.int64)
    frac = []
    strides = []
    for a in range(d):
        m = grid.shape[a]
        pos = (points[:, a] - grid.lower[a]) / grid.spacing[a]
        with np.errstate(invalid="ignore"):
            far |= (pos < -far_cells) | (pos > m - 1 + far_cells)
        pos = np.clip(pos, 0.0, m - 1)
        i0 = np.minimum(pos.astype(np.int64), m - 2)
        stride = int(np.prod(grid.shape[a + 1:]))
        base += i0 * stride
        frac.append(pos - i0)
        strides.append(stride)
    out = np.zeros((n,) + tail)
    for corner in itertools.product((0, 1), repeat=d):
        weight = np.ones(n)
        idx = base.copy()
        for a, c in enumerate(corner):
            weight *= frac[a] if c else 1.0 - frac[a]
            if c:
                idx += strides[a]
        out += weight.reshape((-1,) + (1,) * len(tail)) * flat[idx]
    return out, int(np.count_nonzero(far))


@dataclass
class GridDensity:
    """Nonnegative nodal density on a :class:`SpatialGrid`.

    ``log_normalizer`` is set when the density was produced by normalising
    an unnormalised log-density; it holds ``log`` of the pre-normalisation
    mass (the ``C`` of an exponential tilt, for instance).
    """

    grid: SpatialGrid
    values: np.ndarray
    log_normalizer: Optional[float] = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("density values must be finite and nonnegative")

    @classmethod
    def from_log_values(cls, grid: SpatialGrid, log_values: np.ndarray) -> "GridDensity":
        log_values = np.asarray(log_values, dtype=float).reshape(grid.shape)
        log_mass = float(logsumexp(log_values)) + np.log(grid.cell_volume)
        return cls(grid, np.exp(log_values - log_mass), log_normalizer=log_mass)

    @classmethod
    def from_logpdf(cls, grid: SpatialGrid, logpdf: Callable[[np.ndarray], np.ndarray]) -> "GridDensity":
        return cls.from_log_values(grid, logpdf(grid.points()))

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def normalized(self) -> "GridDensity":
        return GridDensity(self.grid, self.values / self.mass, self.log_normalizer)

    @property
    def probabilities(self) -> np.ndarray:
        """Cell masses (flattened, C order)."""
        return (self.values * self.grid.cell_volume).ravel()

    @property
    def log_values(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.values)

    def pdf(self, points) -> np.ndarray:
        return interpolate(self.grid, self.values, points)[0]

    def log_pdf(self, points) -> np.ndarray:
        lv = self.log_values
        finite = np.isfinite(lv)
        if finite.all():
            return interpolate(self.grid, lv, points)[0]
        floor = lv[finite].min() - 1e3
        out = interpolate(self.grid, np.where(finite, lv, floor), points)[0]
        with np.errstate(divide="ignore"):
            zero = self.pdf(points) <= 0
        out[zero] = -np.inf
        return out

    def expect(self, node_values: np.ndarray) -> float:
        node_values = np.asarray(node_values, dtype=float).reshape(self.grid.shape)
        return float(np.sum(node_values * self.values) * self.grid.cell_volume)

    def mean(self) -> np.ndarray:
        pts = self.grid.points()
        return (self.probabilities[:, None] * pts).sum(axis=0) / self.probabilities.sum()

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` points: a cell by its mass, then uniformly inside it."""
        probs = self.probabilities
        cdf = np.cumsum(probs)
        cdf /= cdf[-1]
        idx = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), probs.size - 1)
        centres = self.grid.points()[idx]
        jitter = rng.random((n, self.grid.dim)) - 0.5
        return centres + jitter * self.grid.spacing


def same_grid(a: SpatialGrid, b: SpatialGrid) -> bool:
    return a.lower == b.lower and a.upper == b.upper and a.shape == b.shape


def require_same_grid(*densities: Sequence[GridDensity]) -> SpatialGrid:
    grid = densities[0].grid
    for d in densities[1:]:
        if not same_grid(grid, d.grid):
            raise InvalidArgumentError("densities live on different grids")
    return grid

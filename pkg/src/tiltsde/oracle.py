"""Brute-force ground truth for tilted laws.

Sampling from ``exp(r_f) p_pre / C_f`` needs only pretrained samples and
the transformed reward, so importance resampling and rejection sampling
give references that share no code with the control machinery. Empirical
laws are compared by histogram total variation with a bootstrap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import logsumexp

from .errors import BoundViolationError, DegenerateWeightsError, InvalidArgumentError
from .grids import GridDensity, SpatialGrid

__all__ = [
    "WeightedSample",
    "TVEstimate",
    "importance_resample",
    "rejection_sample",
    "empirical_tv",
    "histogram_bins",
]

BINS_1D = 128
BINS_2D = 32


@dataclass
class WeightedSample:
    points: np.ndarray
    log_weights: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.log_weights = np.asarray(self.log_weights, dtype=float).ravel()
        if self.points.shape[0] != self.log_weights.size:
            raise InvalidArgumentError("one log-weight per point required")
        if not np.all(np.isfinite(self.log_weights)):
            raise InvalidArgumentError("log-weights must be finite")

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    @property
    def n_eff(self) -> float:
        w = self.weights
        return float(1.0 / np.sum(w * w))

    def mean(self) -> np.ndarray:
        return self.weights @ self.points


@dataclass
class ResampleResult:
    points: np.ndarray
    n_eff: float
    sample: WeightedSample


def importance_resample(pretrained_samples, r_f_field: Callable, n_out: int, seed: int,
                        min_ess: float = 100.0) -> ResampleResult:
    """Multinomial resampling of pretrained samples with weights ``exp(r_f)``."""
    pts = np.atleast_2d(np.asarray(pretrained_samples, dtype=float))
    if pts.shape[0] == 0 or n_out < 1:
        raise InvalidArgumentError("need a nonempty input and a positive n_out")
    ws = WeightedSample(pts, r_f_field(pts))
    ess = ws.n_eff
    if ess < min_ess:
        raise DegenerateWeightsError(
            f"effective sample size {ess:.1f} < {min_ess:g}; draw a larger pretrained ensemble"
        )
    rng = np.random.default_rng(seed)
    idx = rng.choice(pts.shape[0], size=n_out, replace=True, p=ws.weights)
    return ResampleResult(pts[idx], ess, ws)


@dataclass
class RejectionResult:
    points: np.ndarray
    n_proposed: int
    acceptance: float
    expected_acceptance: Optional[float] = None

    @property
    def acceptance_se(self) -> float:
        p = self.expected_acceptance if self.expected_acceptance is not None else self.acceptance
        return float(np.sqrt(p * (1 - p) / self.n_proposed))

    @property
    def acceptance_z(self) -> Optional[float]:
        if self.expected_acceptance is None:
            return None
        se = self.acceptance_se
        return 0.0 if se == 0 else (self.acceptance - self.expected_acceptance) / se


def rejection_sample(pretrained_sampler: Callable, r_f_field: Callable, bound: float, n_out: int, seed: int,
                     p_pre: Optional[GridDensity] = None, batch: int = 65536) -> RejectionResult:
    """Exact draws from ``exp(r_f) p_pre`` given ``exp(r_f) <= bound``.

    ``pretrained_sampler(rng, n)`` proposes. When ``p_pre`` is supplied the
    bound is first checked on its grid and the expected acceptance
    ``C_f / bound`` is reported next to the observed one.
    """
    if not bound > 0:
        raise InvalidArgumentError("bound must be positive")
    log_m = np.log(bound)
    expected = None
    if p_pre is not None:
        lg = r_f_field(p_pre.grid.points())
        if lg.max() > log_m + 1e-12:
            raise BoundViolationError(f"sup exp(r_f) = {np.exp(lg.max()):.6g} on the grid exceeds M = {bound:g}")
        with np.errstate(divide="ignore"):
            expected = float(np.exp(logsumexp(lg + np.log(p_pre.probabilities)) - log_m))
    rng = np.random.default_rng(seed)
    kept = []
    n_kept = 0
    proposed = 0
    while n_kept < n_out:
        y = np.atleast_2d(pretrained_sampler(rng, batch))
        lg = r_f_field(y)
        if lg.max() > log_m + 1e-12:
            raise BoundViolationError(f"exp(r_f) = {np.exp(lg.max()):.6g} exceeds M = {bound:g}")
        acc = np.log(rng.random(y.shape[0])) < lg - log_m
        take = y[acc][: n_out - n_kept]
        # proposals are counted up to the last one accepted
        proposed += y.shape[0] if n_kept + acc.sum() < n_out else int(np.flatnonzero(acc)[take.shape[0] - 1]) + 1
        kept.append(take)
        n_kept += take.shape[0]
    return RejectionResult(np.concatenate(kept), proposed, n_out / proposed, expected)


# --------------------------------------------------------------------------
# histogram total variation


@dataclass
class Binning:
    """Axis-aligned bins; points outside every bin land in one overflow bin."""

    edges: list

    @property
    def shape(self) -> tuple:
        return tuple(len(e) - 1 for e in self.edges)

    @property
    def n_bins(self) -> int:
        return int(np.prod(self.shape)) + 1

    def index(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        flat = np.zeros(pts.shape[0], dtype=np.int64)
        outside = np.zeros(pts.shape[0], dtype=bool)
        for a, e in enumerate(self.edges):
            i = np.searchsorted(e, pts[:, a], side="right") - 1
            outside |= (i < 0) | (i >= len(e) - 1) | ~np.isfinite(pts[:, a])
            flat = flat * (len(e) - 1) + np.clip(i, 0, len(e) - 2)
        flat[outside] = self.n_bins - 1
        return flat

    def counts(self, pts) -> np.ndarray:
        return np.bincount(self.index(pts), minlength=self.n_bins).astype(float)


def histogram_bins(grid: SpatialGrid, cells_per_bin: Optional[int] = None) -> Binning:
    """Bins made of ``cells_per_bin`` whole grid cells along every axis."""
    edges = []
    for a, n in enumerate(grid.shape):
        m = cells_per_bin or max(1, n // (BINS_1D if grid.dim == 1 else BINS_2D))
        h = grid.spacing[a]
        lo = grid.lower[a] - 0.5 * h
        n_full = n // m
        e = lo + h * m * np.arange(n_full + 1)
        if n_full * m < n:
            e = np.append(e, grid.upper[a] + 0.5 * h)
        edges.append(e)
    return Binning(edges)


def _grid_bin_masses(density: GridDensity, binning: Binning) -> np.ndarray:
    probs = density.probabilities / density.probabilities.sum()
    return np.bincount(binning.index(density.grid.points()), weights=probs, minlength=binning.n_bins)


def _sample_bins(a: np.ndarray, b: np.ndarray) -> Binning:
    pooled = np.concatenate([a, b])
    d = pooled.shape[1]
    k = BINS_1D if d == 1 else BINS_2D
    edges = []
    for j in range(d):
        lo, hi = pooled[:, j].min(), pooled[:, j].max()
        if hi <= lo:
            hi = lo + 1.0
        e = np.linspace(lo, hi, k + 1)
        e[-1] = np.nextafter(hi, np.inf)
        edges.append(e)
    return Binning(edges)


@dataclass
class TVEstimate:
    value: float
    ci: tuple
    boot_sd: float
    noise_floor: float
    n_bins: int
    sensitivity: dict = field(default_factory=dict)

    @property
    def std_error(self) -> float:
        """Bootstrap spread combined with the expected finite-sample bias."""
        return float(np.hypot(self.boot_sd, self.noise_floor))

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "ci": list(self.ci),
            "boot_sd": self.boot_sd,
            "noise_floor": self.noise_floor,
            "std_error": self.std_error,
            "n_bins": self.n_bins,
            "sensitivity": {str(k): v for k, v in self.sensitivity.items()},
        }


def _tv_once(pa, pb):
    return 0.5 * float(np.abs(pa - pb).sum())


def empirical_tv(points_a, other: Union[np.ndarray, GridDensity], binning: Optional[Binning] = None,
                 n_boot: int = 200, seed: int = 0, sensitivity: bool = True) -> TVEstimate:
    """Histogram TV between samples and either samples or a gridded density.

    Against a grid, bins are unions of whole grid cells (128 bins in 1-D,
    32 per axis in 2-D by default) and the result is additionally reported
    for bins twice and half as wide. ``noise_floor`` is the expected TV of
    a perfect sample of the same size.
    """
    a = np.atleast_2d(np.asarray(points_a, dtype=float))
    if a.shape[0] == 0:
        raise InvalidArgumentError("empty sample set")
    a = a[np.all(np.isfinite(a), axis=1)]
    rng = np.random.default_rng(seed)
    na = a.shape[0]
    if isinstance(other, GridDensity):
        grid = other.grid
        binning = binning or histogram_bins(grid)
        q = _grid_bin_masses(other, binning)
        pa = binning.counts(a) / na
        value = _tv_once(pa, q)
        boots = rng.multinomial(na, pa, size=n_boot) / na
        tvs = 0.5 * np.abs(boots - q).sum(axis=1)
        floor = 0.5 * float(np.sum(np.sqrt(2 * q * (1 - q) / (np.pi * na))))
        sens = {}
        if sensitivity:
            m = max(1, grid.shape[0] // (BINS_1D if grid.dim == 1 else BINS_2D))
            for factor, cells in (("2x", 2 * m), ("0.5x", max(1, m // 2))):
                bb = histogram_bins(grid, cells)
                sens[factor] = _tv_once(bb.counts(a) / na, _grid_bin_masses(other, bb))
    else:
        b = np.atleast_2d(np.asarray(other, dtype=float))
        if b.shape[0] == 0:
            raise InvalidArgumentError("empty sample set")
        b = b[np.all(np.isfinite(b), axis=1)]
        nb = b.shape[0]
        binning = binning or _sample_bins(a, b)
        pa = binning.counts(a) / na
        pb = binning.counts(b) / nb
        value = _tv_once(pa, pb)
        ba = rng.multinomial(na, pa, size=n_boot) / na
        bb_ = rng.multinomial(nb, pb, size=n_boot) / nb
        tvs = 0.5 * np.abs(ba - bb_).sum(axis=1)
        pool = (pa * na + pb * nb) / (na + nb)
        floor = 0.5 * float(np.sum(np.sqrt(2 / np.pi * pool * (1 - pool) * (1 / na + 1 / nb))))
        sens = {}
    lo, hi = np.percentile(tvs, [2.5, 97.5])
    return TVEstimate(value, (float(lo), float(hi)), float(np.std(tvs, ddof=1)), floor, binning.n_bins, sens)

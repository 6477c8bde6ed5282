"""Time grids, reproducible Brownian increments and Euler-Maruyama integration.

Random streams are counter-based (Philox). Paths are grouped into fixed
blocks of ``BLOCK`` paths; block ``b`` draws from a generator keyed by
``(seed, b)`` only, so the increments of path ``i`` depend on ``(seed, i)``
and nothing else. Any split of the path range, simulated in any order,
reproduces the same ensemble bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DivergedPathsError, InvalidArgumentError

log = logging.getLogger(__name__)

BLOCK = 4096
CHUNK = 32
_INCREMENT_STREAM = 0
_INIT_STREAM = 1

__all__ = [
    "TimeGrid",
    "DiffusionSpec",
    "PathEnsemble",
    "make_time_grid",
    "brownian_increments",
    "simulate_sde",
    "block_rng",
]


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    n_steps: int

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return self.t_start + (self.t_end - self.t_start) * np.arange(self.n_steps + 1) / self.n_steps

    def index_of(self, t: float) -> int:
        """Index of the last node not after ``t`` (piecewise-constant lookup)."""
        k = int(np.floor((t - self.t_start) / self.dt + 1e-9))
        return min(max(k, 0), self.n_steps)


def make_time_grid(t_start: float, t_end: float, n_steps: int) -> TimeGrid:
    if not (np.isfinite(t_start) and np.isfinite(t_end)):
        raise InvalidArgumentError("time grid bounds must be finite")
    if not t_end > t_start:
        raise InvalidArgumentError("t_end must exceed t_start")
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidArgumentError("n_steps must be a positive integer")
    return TimeGrid(float(t_start), float(t_end), int(n_steps))


@dataclass
class DiffusionSpec:
    """An SDE ``dX = drift(t, X) dt + diffusion(t) dW`` on ``[0, horizon]``.

    ``drift`` maps ``(t, x)`` with ``x`` of shape ``(n, dim)`` to an
    ``(n, dim)`` array; ``diffusion`` maps ``t`` to a scalar; the optional
    ``drift_jacobian`` returns ``(n, dim, dim)``.
    """

    dim: int
    drift: Callable[[float, np.ndarray], np.ndarray]
    diffusion: Callable[[float], float]
    horizon: float
    drift_jacobian: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    name: str = ""

    def jacobian(self, t: float, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
        if self.drift_jacobian is not None:
            return self.drift_jacobian(t, x)
        n, d = x.shape
        jac = np.empty((n, d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            jac[:, :, j] = (self.drift(t, x + e) - self.drift(t, x - e)) / (2 * h)
        return jac


@dataclass
class PathEnsemble:
    """Simulated trajectories plus per-path Girsanov accumulators.

    ``log_weight`` holds ``-sum (u/sigma) dB - 1/2 sum |u/sigma|^2 dt``, the
    log density of the uncontrolled path law against the controlled one.
    ``control_energy`` holds ``1/2 sum |u/sigma|^2 dt``.
    """

    grid: TimeGrid
    seed: int
    n_paths: int
    record_index: np.ndarray
    states: np.ndarray
    log_weight: np.ndarray
    control_energy: np.ndarray
    diverged: np.ndarray
    path_offset: int = 0
    increments: Optional[np.ndarray] = None
    tangent: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes[self.record_index]

    @property
    def initial(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1]

    @property
    def valid(self) -> np.ndarray:
        return ~self.diverged

    @property
    def n_diverged(self) -> int:
        return int(np.count_nonzero(self.diverged))

    @property
    def novikov_max(self) -> float:
        """Largest per-path ``1/2 int |u/sigma|^2`` seen in the run."""
        e = self.control_energy[self.valid]
        return float(e.max()) if e.size else 0.0

    def state_at(self, node: int) -> np.ndarray:
        hits = np.flatnonzero(self.record_index == node)
        if hits.size == 0:
            raise InvalidArgumentError(f"node {node} was not recorded")
        return self.states[:, hits[0]]


def block_rng(seed: int, block: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(block), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


class _IncrementStreams:
    def __init__(self, seed: int, path_offset: int, n_paths: int, d: int, dt: float):
        self.first_block = path_offset // BLOCK
        last_block = (path_offset + n_paths - 1) // BLOCK
        self.rngs = [block_rng(seed, b, _INCREMENT_STREAM) for b in range(self.first_block, last_block + 1)]
        self.lo = path_offset - self.first_block * BLOCK
        self.hi = self.lo + n_paths
        self.d = d
        self.scale = np.sqrt(dt)
        self._chunk = -1
        self._buf = None

    def at(self, k: int) -> np.ndarray:
        chunk = k // CHUNK
        if chunk != self._chunk:
            draws = [rng.standard_normal((CHUNK, BLOCK, self.d)) for rng in self.rngs]
            self._buf = np.concatenate(draws, axis=1)[:, self.lo:self.hi] * self.scale
            self._chunk = chunk
        return self._buf[k % CHUNK]


def brownian_increments(n_paths: int, grid: TimeGrid, d: int, seed: int, path_offset: int = 0) -> np.ndarray:
    """Gaussian increments of shape ``(n_paths, n_steps, d)`` with variance ``grid.dt``."""
    if n_paths < 1 or d < 1:
        raise InvalidArgumentError("n_paths and d must be positive")
    streams = _IncrementStreams(seed, path_offset, n_paths, d, grid.dt)
    out = np.empty((n_paths, grid.n_steps, d))
    for k in range(grid.n_steps):
        out[:, k] = streams.at(k)
    return out


def _initial_states(init, n_paths, d, seed, path_offset):
    if callable(init):
        first = path_offset // BLOCK
        last = (path_offset + n_paths - 1) // BLOCK
        parts = []
        for b in range(first, last + 1):
            pts = np.asarray(init(block_rng(seed, b, _INIT_STREAM), BLOCK), dtype=float).reshape(BLOCK, d)
            parts.append(pts)
        lo = path_offset - first * BLOCK
        return np.concatenate(parts)[lo:lo + n_paths].copy()
    arr = np.asarray(init, dtype=float)
    if arr.ndim == 1:
        if arr.shape[0] != d:
            raise InvalidArgumentError(f"initial state has dimension {arr.shape[0]}, expected {d}")
        return np.tile(arr, (n_paths, 1))
    if arr.shape != (n_paths, d):
        raise InvalidArgumentError(f"initial states have shape {arr.shape}, expected {(n_paths, d)}")
    return arr.copy()


def _record_nodes(record, n_steps) -> np.ndarray:
    if isinstance(record, str):
        if record == "all":
            return np.arange(n_steps + 1)
        if record == "ends":
            return np.array([0, n_steps])
        raise InvalidArgumentError(f"unknown record mode {record!r}")
    if isinstance(record, (int, np.integer)):
        nodes = set(range(0, n_steps + 1, max(int(record), 1)))
    else:
        nodes = {int(k) for k in record}
    nodes |= {0, n_steps}
    if min(nodes) < 0 or max(nodes) > n_steps:
        raise InvalidArgumentError("recorded node out of range")
    return np.array(sorted(nodes))


def simulate_sde(
    spec: DiffusionSpec,
    grid: TimeGrid,
    init,
    control: Optional[Callable[[float, np.ndarray], np.ndarray]] = None,
    n_paths: int = 1,
    seed: int = 0,
    record: Union[str, int, Sequence[int]] = "all",
    path_offset: int = 0,
    keep_increments: bool = False,
    tangent: bool = False,
    max_diverged_fraction: float = 0.01,
    observe: Optional[Callable[[int, float, np.ndarray], None]] = None,
) -> PathEnsemble:
    """Euler-Maruyama for ``dY = (drift + control) dt + diffusion dB``.

    Parameters
    ----------
    init : array or callable
        Either initial states (``(n_paths, d)`` or a single ``(d,)`` point)
        or ``init(rng, n)`` called once per RNG block.
    control : callable, optional
        Feedback control ``u(t, y)``; when present the Girsanov exponent and
        the control energy are accumulated per path.
    record : "all", "ends", int stride or node indices
        Which time nodes to keep in ``states``; 0 and ``n_steps`` always are.
    tangent : bool
        Also integrate the first-variation process ``dZ = (grad drift) Z dt``,
        ``Z_0 = I``; ``Z_T`` lands in ``ensemble.tangent``.
    observe : callable, optional
        ``observe(k, t_k, states)`` at every node ``k = 0 .. n_steps``, for
        running statistics that should not keep the whole trajectory.

    Non-finite states mark a path as diverged (it is kept, frozen at NaN).
    More than ``max_diverged_fraction`` diverged paths raises
    :class:`DivergedPathsError`.
    """
    if n_paths < 1:
        raise InvalidArgumentError("n_paths must be positive")
    if grid.t_end > spec.horizon + 1e-12 or grid.t_start < -1e-12:
        raise InvalidArgumentError("time grid exceeds the SDE horizon")
    d = spec.dim
    dt = grid.dt
    nodes = grid.nodes
    rec = _record_nodes(record, grid.n_steps)
    slot = {int(k): j for j, k in enumerate(rec)}

    x = _initial_states(init, n_paths, d, seed, path_offset)
    states = np.empty((n_paths, rec.size, d))
    states[:, 0] = x
    log_w = np.zeros(n_paths)
    energy = np.zeros(n_paths)
    diverged = ~np.all(np.isfinite(x), axis=1)
    incs = np.empty((n_paths, grid.n_steps, d)) if keep_increments else None
    z = np.broadcast_to(np.eye(d), (n_paths, d, d)).copy() if tangent else None
    streams = _IncrementStreams(seed, path_offset, n_paths, d, dt)

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(grid.n_steps):
            t = nodes[k]
            if observe is not None:
                observe(k, t, x)
            db = streams.at(k)
            if incs is not None:
                incs[:, k] = db
            sig = float(spec.diffusion(t))
            b = spec.drift(t, x)
            if z is not None:
                z = z + dt * np.einsum("nij,njk->nik", spec.jacobian(t, x), z)
            if control is not None:
                if sig <= 0:
                    raise InvalidArgumentError("a control requires a positive diffusion coefficient")
                u = control(t, x)
                b = b + u
                lam = u / sig
                lam2 = np.einsum("ni,ni->n", lam, lam)
                log_w -= np.einsum("ni,ni->n", lam, db) + 0.5 * lam2 * dt
                energy += 0.5 * lam2 * dt
            x = x + b * dt + sig * db
            bad = ~np.all(np.isfinite(x), axis=1)
            if bad.any():
                x[bad] = np.nan
                diverged |= bad
            j = slot.get(k + 1)
            if j is not None:
                states[:, j] = x
        if observe is not None:
            observe(grid.n_steps, nodes[-1], x)

    n_bad = int(np.count_nonzero(diverged))
    if n_bad:
        log.warning("%d of %d paths diverged", n_bad, n_paths)
        if n_bad > max_diverged_fraction * n_paths:
            raise DivergedPathsError(
                f"{n_bad} of {n_paths} paths diverged (limit {max_diverged_fraction:.1%})", n_bad, n_paths
            )
    return PathEnsemble(
        grid=grid,
        seed=int(seed),
        n_paths=n_paths,
        record_index=rec,
        states=states,
        log_weight=log_w,
        control_energy=energy,
        diverged=diverged,
        path_offset=path_offset,
        increments=incs,
        tangent=z,
    )

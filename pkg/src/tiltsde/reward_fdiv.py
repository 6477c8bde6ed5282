"""Rewards, the f-divergence catalog, transformed rewards and tilted targets.

All tilts are formed in the log domain and normalised with log-sum-exp on
the grid. A reward maps points of shape ``(n, d)`` to ``(n,)`` values.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    DegenerateTiltError,
    DomainError,
    InfeasibleConstraintError,
    InvalidArgumentError,
    NumericalRangeError,
    UnsupportedDivergenceError,
)
from .grids import GridDensity

__all__ = [
    "Reward",
    "FDivergence",
    "TransformedReward",
    "KKTSolution",
    "make_reward",
    "get_divergence",
    "f_prime_inverse_signed",
    "transformed_reward",
    "tilted_density_kl",
    "tilted_density_f",
    "kkt_lambda_solve",
]


# --------------------------------------------------------------------------
# rewards


@dataclass
class Reward:
    fn: Callable[[np.ndarray], np.ndarray]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lower: Optional[float] = None
    upper: Optional[float] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __call__(self, y) -> np.ndarray:
        return np.asarray(self.fn(np.atleast_2d(np.asarray(y, dtype=float))), dtype=float)

    def gradient(self, y, h: float = 1e-5) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if self.grad is not None:
            return np.asarray(self.grad(y), dtype=float)
        out = np.empty_like(y)
        for j in range(y.shape[1]):
            e = np.zeros(y.shape[1])
            e[j] = h
            out[:, j] = (self(y + e) - self(y - e)) / (2 * h)
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "params": _jsonable(self.params)}


def _jsonable(params):
    return {k: (np.asarray(v).tolist() if isinstance(v, (np.ndarray, list, tuple)) else v) for k, v in params.items()}


def _vec(v, d=None):
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if d is not None and v.size == 1 and d > 1:
        v = np.full(d, float(v[0]))
    return v


def linear_reward(coef, offset: float = 0.0) -> Reward:
    c = _vec(coef)
    bounded = bool(np.all(c == 0))
    return Reward(
        fn=lambda y: y @ c + offset,
        grad=lambda y: np.broadcast_to(c, y.shape).copy(),
        lower=offset if bounded else None,
        upper=offset if bounded else None,
        name="linear",
        params={"coef": c.tolist(), "offset": offset},
    )


def constant_reward(value: float) -> Reward:
    return Reward(
        fn=lambda y: np.full(y.shape[0], float(value)),
        grad=lambda y: np.zeros_like(y),
        lower=float(value),
        upper=float(value),
        name="constant",
        params={"value": float(value)},
    )


def quadratic_reward(offset: float = 0.0, scale: float = 1.0, center=0.0) -> Reward:
    c = _vec(center)
    return Reward(
        fn=lambda y: offset + scale * np.sum((y - c) ** 2, axis=1),
        grad=lambda y: 2 * scale * (y - c),
        lower=offset if scale >= 0 else None,
        upper=offset if scale <= 0 else None,
        name="quadratic",
        params={"offset": offset, "scale": scale, "center": c.tolist()},
    )


def gaussian_bump_reward(height: float = 1.0, center=0.0, width: float = 1.0, lower: float = 0.0) -> Reward:
    c = _vec(center)

    def fn(y):
        return lower + height * np.exp(-0.5 * np.sum((y - c) ** 2, axis=1) / width**2)

    def grad(y):
        bump = height * np.exp(-0.5 * np.sum((y - c) ** 2, axis=1) / width**2)
        return -bump[:, None] * (y - c) / width**2

    lo, hi = sorted((lower, lower + height))
    return Reward(fn, grad, lo, hi, "gaussian-bump",
                  {"height": height, "center": c.tolist(), "width": width, "lower": lower})


def sigmoid_reward(height: float = 1.0, direction=1.0, shift: float = 0.0, lower: float = 0.0) -> Reward:
    a = _vec(direction)

    def fn(y):
        return lower + height / (1.0 + np.exp(-(y @ a - shift)))

    def grad(y):
        s = 1.0 / (1.0 + np.exp(-(y @ a - shift)))
        return (height * s * (1 - s))[:, None] * a

    lo, hi = sorted((lower, lower + height))
    return Reward(fn, grad, lo, hi, "sigmoid",
                  {"height": height, "direction": a.tolist(), "shift": shift, "lower": lower})


_REWARDS = {
    "linear": linear_reward,
    "constant": constant_reward,
    "quadratic": quadratic_reward,
    "gaussian-bump": gaussian_bump_reward,
    "sigmoid": sigmoid_reward,
}


def make_reward(name: str, params: Optional[dict] = None) -> Reward:
    try:
        factory = _REWARDS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown reward {name!r}; choose from {sorted(_REWARDS)}") from None
    return factory(**(params or {}))


# --------------------------------------------------------------------------
# f-divergences

_BRANCHES = ("+", "-")


@dataclass(frozen=True)
class FDivergence:
    """Catalog entry: ``kl`` (f = t ln t), ``forward-kl`` (f = -ln t),
    ``gamma`` and ``tv`` (f = |t - 1| / 2)."""

    name: str
    gamma: Optional[float] = None

    def __post_init__(self):
        if self.name not in ("kl", "forward-kl", "gamma", "tv"):
            raise InvalidArgumentError(f"unknown divergence {self.name!r}")
        if self.name == "gamma":
            if self.gamma is None or not 0 < self.gamma <= 1:
                raise InvalidArgumentError("gamma must lie in (0, 1]")

    @property
    def label(self) -> str:
        return f"gamma({self.gamma:g})" if self.name == "gamma" else self.name

    def f(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.name == "kl":
                return np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
            if self.name == "forward-kl":
                return -np.log(t)
            if self.name == "tv":
                return 0.5 * np.abs(t - 1.0)
            g = self.gamma
            if g == 1.0:
                return t - 1.0 - np.log(t)
            return (t ** (1 - g) - (1 - g) * t - g) / (g * (g - 1))

    def f_prime(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            if self.name == "kl":
                return np.log(t) + 1.0
            if self.name == "forward-kl":
                return -1.0 / t
            if self.name == "tv":
                return 0.5 * np.sign(t - 1.0)
            return (1.0 - t ** (-self.gamma)) / self.gamma

    @property
    def f_at_zero(self) -> float:
        if self.name == "kl":
            return 0.0
        if self.name == "tv":
            return 0.5
        if self.name == "forward-kl" or self.gamma == 1.0:
            return np.inf
        return 1.0 / (1.0 - self.gamma)

    @property
    def f_prime_at_infinity(self) -> float:
        """``lim f(t) / t``: the per-unit cost of mass where the reference has none."""
        if self.name == "kl":
            return np.inf
        if self.name == "forward-kl":
            return 0.0
        if self.name == "tv":
            return 0.5
        return 1.0 / self.gamma

    @property
    def f_prime_sup(self) -> float:
        """Supremum of the range of ``f'`` on ``(0, inf)``."""
        return {"kl": np.inf, "forward-kl": 0.0, "tv": 0.5}.get(self.name, 1.0 / (self.gamma or 1.0))

    def branch_derivative(self, branch: str) -> Callable:
        """The map whose inverse :func:`f_prime_inverse_signed` evaluates.

        ``+`` is ``f'`` itself. ``-`` is ``-f'`` for forward KL and
        ``t -> (1 + t^-gamma) / gamma`` for the gamma family, which is the
        map underlying the ``(gamma t - 1)^(-1/gamma)`` branch.
        """
        if branch == "+":
            return self.f_prime
        if self.name == "forward-kl":
            return lambda t: 1.0 / np.asarray(t, dtype=float)
        if self.name == "gamma":
            g = self.gamma
            return lambda t: (1.0 + np.asarray(t, dtype=float) ** (-g)) / g
        raise DomainError(f"{self.label} has no '-' branch")

    def inverse_f_prime(self, s):
        """``(f')^{-1}`` on the range of ``f'`` (strictly increasing cases)."""
        return f_prime_inverse_signed(self, s, branch="+")[0]


def get_divergence(name: str, gamma: Optional[float] = None) -> FDivergence:
    name = name.lower().replace("_", "-")
    if name in ("forward", "forwardkl"):
        name = "forward-kl"
    return FDivergence(name, gamma if name == "gamma" else None)


def _auto_branch(div: FDivergence, t: np.ndarray) -> str:
    if div.name == "kl":
        return "+"
    if div.name == "forward-kl":
        if np.all(t > 0):
            return "-"
        if np.all(t < 0):
            return "+"
        raise DomainError("forward-kl inverse needs t of one sign (t > 0 for the '-' branch)")
    thr = 1.0 / div.gamma
    if np.all(t > thr):
        return "-"
    if np.all(t < thr):
        return "+"
    raise DomainError(f"gamma inverse needs t entirely above or below 1/gamma = {thr:g}")


def _check_branch_domain(div: FDivergence, t: np.ndarray, branch: str):
    """Return a boolean mask of admissible ``t`` and the bound description."""
    if div.name == "kl":
        return np.isfinite(t), "t finite"
    if div.name == "forward-kl":
        return (t > 0, "t > 0") if branch == "-" else (t < 0, "t < 0")
    thr = 1.0 / div.gamma
    return (t > thr, f"t > 1/gamma = {thr:g}") if branch == "-" else (t < thr, f"t < 1/gamma = {thr:g}")


def log_f_prime_inverse_signed(div: FDivergence, t, branch: Optional[str] = None):
    """``log (f'_pm)^{-1}(t)`` and the branch used."""
    if div.name == "tv":
        raise UnsupportedDivergenceError("the signed inverse derivative is not well-defined for total variation")
    t = np.asarray(t, dtype=float)
    if branch is None:
        branch = _auto_branch(div, t)
    if branch not in _BRANCHES:
        raise InvalidArgumentError(f"branch must be '+' or '-', got {branch!r}")
    if div.name == "kl" and branch == "-":
        raise DomainError("kl has no '-' branch")
    ok, bound = _check_branch_domain(div, t, branch)
    if not np.all(ok):
        bad = t[~ok] if t.ndim else t
        raise DomainError(f"{div.label} '{branch}' branch requires {bound}; got t = {np.ravel(bad)[0]:g}")
    if div.name == "kl":
        return t - 1.0, branch
    if div.name == "forward-kl":
        return -np.log(np.abs(t)), branch
    g = div.gamma
    if branch == "-":
        return -np.log(g * t - 1.0) / g, branch
    return -np.log1p(-g * t) / g, branch


def f_prime_inverse_signed(div: FDivergence, t, branch: Optional[str] = None):
    """Evaluate ``(f'_pm)^{-1}(t)``.

    Returns ``(value, branch)``. KL gives ``exp(t - 1)``; forward KL gives
    ``1/t`` on the ``-`` branch; gamma gives ``(gamma t - 1)^(-1/gamma)``
    (``-``, ``t > 1/gamma``) or ``(1 - gamma t)^(-1/gamma)`` (``+``,
    ``t < 1/gamma``). With ``branch=None`` the branch is inferred from ``t``.
    """
    logv, branch = log_f_prime_inverse_signed(div, t, branch)
    t = np.asarray(t, dtype=float)
    if div.name == "forward-kl":
        val = 1.0 / t if branch == "-" else -1.0 / t
    elif div.name == "gamma":
        g = div.gamma
        base = g * t - 1.0 if branch == "-" else 1.0 - g * t
        val = base ** (-1.0 / g)
    else:
        val = np.exp(logv)
    return (float(val) if np.ndim(val) == 0 else val), branch


@dataclass
class TransformedReward:
    """``r_f(y) = ln (f'_pm)^{-1}(r(y) / alpha)`` on a fixed branch."""

    div: FDivergence
    reward: Reward
    alpha: float
    branch: str

    def __call__(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        t = self.reward(y) / self.alpha
        ok, bound = _check_branch_domain(self.div, t, self.branch)
        if not np.all(ok):
            i = int(np.flatnonzero(~ok)[0])
            raise DomainError(
                f"r(y)/alpha = {t[i]:g} at y = {y[i].tolist()} violates {bound} "
                f"({self.div.label}, alpha = {self.alpha:g})"
            )
        return log_f_prime_inverse_signed(self.div, t, self.branch)[0]

    def gradient(self, y, h: float = 1e-5) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        t = self.reward(y) / self.alpha
        g = self.div.gamma
        if self.div.name == "kl":
            dlog = np.ones_like(t)
        elif self.div.name == "forward-kl":
            dlog = -1.0 / t
        elif self.branch == "-":
            dlog = -1.0 / (g * t - 1.0)
        else:
            dlog = 1.0 / (1.0 - g * t)
        return (dlog / self.alpha)[:, None] * self.reward.gradient(y)

    def _at(self, r_value):
        t = np.array([r_value / self.alpha])
        return float(log_f_prime_inverse_signed(self.div, t, self.branch)[0][0])

    def _increasing(self) -> bool:
        return self.div.name == "kl" or (self.div.name != "forward-kl" and self.branch == "+")

    @property
    def infimum(self) -> float:
        """``kappa = inf r_f`` implied by the reward bounds (``-inf`` if unbounded)."""
        bound = self.reward.lower if self._increasing() else self.reward.upper
        return -np.inf if bound is None else self._at(bound)

    @property
    def supremum(self) -> float:
        bound = self.reward.upper if self._increasing() else self.reward.lower
        return np.inf if bound is None else self._at(bound)


def select_branch(div: FDivergence, reward: Reward, alpha: float) -> str:
    if div.name == "tv":
        raise UnsupportedDivergenceError("total variation has no well-defined signed inverse derivative")
    if div.name == "kl":
        return "+"
    if div.name == "forward-kl":
        # r_f = ln(alpha / r) is unbounded above as r -> 0, so the tilt may not normalise
        if reward.lower is not None and reward.lower <= 0:
            raise DomainError(f"forward-kl needs a reward bounded below by a positive constant; "
                              f"the reward's lower bound is {reward.lower:g}")
        return "-"
    thr = alpha / div.gamma
    # the inverse blows up at r = alpha/gamma, so both comparisons are strict
    if reward.lower is not None and reward.lower > thr:
        return "-"
    if reward.upper is not None and reward.upper < thr:
        return "+"
    raise DomainError(
        f"gamma branch undetermined: reward bounds [{reward.lower}, {reward.upper}] "
        f"are neither all > alpha/gamma = {thr:g} nor all < alpha/gamma"
    )


def transformed_reward(div: FDivergence, r: Reward, alpha: float, branch: Optional[str] = None) -> TransformedReward:
    if not alpha > 0:
        raise InvalidArgumentError("alpha must be positive")
    if branch is None:
        branch = select_branch(div, r, alpha)
    return TransformedReward(div, r, float(alpha), branch)


# --------------------------------------------------------------------------
# tilted densities


def _tilt(p_pre: GridDensity, log_tilt: np.ndarray) -> GridDensity:
    log_tilt = np.asarray(log_tilt, dtype=float).reshape(p_pre.grid.shape)
    with np.errstate(divide="ignore"):
        logv = np.log(p_pre.values) + log_tilt
    if np.any(np.isnan(logv)) or np.any(logv == np.inf):
        raise NumericalRangeError("tilt overflowed even in the log domain")
    if not np.any(np.isfinite(logv)):
        raise DegenerateTiltError("tilted density has no mass on the grid")
    out = GridDensity.from_log_values(p_pre.grid, logv)
    if out.log_normalizer < np.log(1e-300):
        raise DegenerateTiltError(f"normaliser exp({out.log_normalizer:.1f}) below 1e-300")
    return out


def tilted_density_kl(p_pre: GridDensity, r: Reward, alpha: float) -> GridDensity:
    """``exp(r / alpha) p_pre / C``; ``log_normalizer`` holds ``log C``."""
    if not alpha > 0:
        raise InvalidArgumentError("alpha must be positive")
    return _tilt(p_pre, r(p_pre.grid.points()) / alpha)


def tilted_density_f(p_pre: GridDensity, div: FDivergence, r: Reward, alpha: float,
                     branch: Optional[str] = None) -> GridDensity:
    """``exp(r_f) p_pre / C_f``; the KL case is routed to :func:`tilted_density_kl`."""
    if div.name == "kl":
        return tilted_density_kl(p_pre, r, alpha)
    rf = transformed_reward(div, r, alpha, branch)
    return _tilt(p_pre, rf(p_pre.grid.points()))


@dataclass
class KKTSolution:
    lam: float
    density: GridDensity
    mass: float
    trace: list
    warnings: list = field(default_factory=list)


def _kkt_mass(div, r_vals, p_mass, lam, alpha):
    s = (r_vals - lam) / alpha
    with np.errstate(over="ignore"):
        ratio, _ = f_prime_inverse_signed(div, s, branch="+")
    return float(np.sum(ratio * p_mass)), ratio


def _kkt_mass_gap(div, r_vals, p_mass, delta, alpha, r_max):
    # parametrised by delta = lambda - inf{admissible lambda}, which keeps full
    # relative precision when the root hugs the domain edge
    d = (r_max - r_vals + delta) / alpha
    with np.errstate(over="ignore", divide="ignore"):
        ratio = 1.0 / d if div.name == "forward-kl" else (div.gamma * d) ** (-1.0 / div.gamma)
    return float(np.sum(ratio * p_mass)), ratio


def kkt_lambda_solve(p_pre: GridDensity, div: FDivergence, r: Reward, alpha: float,
                     tol: float = 1e-10, max_doublings: int = 60, max_iter: int = 400) -> KKTSolution:
    """Find the multiplier ``lambda`` of the constrained optimum.

    The optimum is ``(f')^{-1}((r - lambda) / alpha) p_pre`` with ``lambda``
    fixing unit mass; ``lambda`` is bracketed, then bisected until
    ``|mass - 1| <= tol``. When ``f'`` is bounded above, ``lambda`` has a
    finite infimum and the bisection runs on the distance to it.
    """
    if div.name == "tv":
        raise UnsupportedDivergenceError("f' is not strictly increasing for total variation")
    if not alpha > 0:
        raise InvalidArgumentError("alpha must be positive")
    grid = p_pre.grid
    support = p_pre.values.ravel() > 0
    r_vals = r(grid.points())[support]
    p_mass = p_pre.probabilities[support]
    r_min, r_max = float(r_vals.min()), float(r_vals.max())
    floor = r_max - alpha * div.f_prime_sup  # lambda must exceed this
    gap = bool(np.isfinite(floor))
    trace = []

    if gap:
        def ev(x):
            return _kkt_mass_gap(div, r_vals, p_mass, x, alpha, r_max)

        def to_lam(x):
            return floor + x
    else:
        def ev(x):
            return _kkt_mass(div, r_vals, p_mass, x, alpha)

        def to_lam(x):
            return x

    def mass(x):
        m, _ = ev(x)
        trace.append((x, m))
        return m

    # x is lambda itself, or lambda - floor when the floor is finite
    k = 1.0
    hi = r_max + alpha * k - (floor if gap else 0.0)
    for _ in range(max_doublings):
        if mass(hi) < 1:
            break
        k *= 2
        hi = r_max + alpha * k - (floor if gap else 0.0)
    else:
        raise InfeasibleConstraintError("mass stays above 1 over the whole upper bracket")

    if gap:
        lo = 0.5 * hi
        for _ in range(4 * max_doublings):
            if mass(lo) > 1:
                break
            lo /= 2
        else:
            raise InfeasibleConstraintError("mass stays below 1 as lambda approaches the domain edge")
    else:
        k = 1.0
        lo = r_min - alpha * k
        for _ in range(max_doublings):
            if mass(lo) > 1:
                break
            k *= 2
            lo = r_min - alpha * k
        else:
            raise InfeasibleConstraintError("mass stays below 1 over the whole lower bracket")

    x = 0.5 * (lo + hi)
    m = mass(x)
    for _ in range(max_iter):
        if abs(m - 1.0) <= tol or hi - lo <= 4 * np.finfo(float).eps * max(abs(lo), abs(hi), 1e-300):
            break
        if m > 1:
            lo = x
        else:
            hi = x
        x = 0.5 * (lo + hi)
        m = mass(x)

    ordered = sorted(trace)
    ms = np.array([t[1] for t in ordered])
    if np.any(np.diff(ms) > 1e-12 * np.maximum(1.0, np.abs(ms[:-1]))):
        raise NumericalRangeError("KKT mass function is not decreasing along the bisection trace")
    lam = to_lam(x)
    trace = [(to_lam(a), b) for a, b in trace]

    final_mass, ratio_support = ev(x)
    ratio = np.zeros(grid.size)
    ratio[support] = ratio_support
    values = ratio.reshape(grid.shape) * p_pre.values / final_mass
    notes = []
    edge = np.zeros(grid.shape, dtype=bool)
    for a in range(grid.dim):
        sl = [slice(None)] * grid.dim
        sl[a] = slice(0, 2)
        edge[tuple(sl)] = True
        sl[a] = slice(-2, None)
        edge[tuple(sl)] = True
    edge_mass = float(values[edge].sum() * grid.cell_volume)
    if edge_mass > 0.01:
        notes.append(f"{edge_mass:.1%} of the KKT mass sits on the grid boundary; the constraint may be infeasible on R^d")
    if abs(final_mass - 1.0) > tol:
        notes.append(f"bisection stopped at floating-point resolution with |mass - 1| = {abs(final_mass - 1):.3g}")
    if ratio_support.min() < 1e-12:
        notes.append("density ratio approaches 0 somewhere on the support")
    for note in notes:
        warnings.warn(note, RuntimeWarning, stacklevel=2)
    return KKTSolution(lam, GridDensity(grid, values), final_mass, trace, notes)

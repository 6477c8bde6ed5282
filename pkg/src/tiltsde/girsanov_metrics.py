"""Path-space KL, the regularised control objective, grid divergences and TV bounds."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from .control_solver import ControlPolicy, ValueField
from .diffusion_core import DiffusionSpec, PathEnsemble, TimeGrid, simulate_sde
from .errors import InvalidArgumentError
from .grids import GridDensity, require_same_grid
from .oracle import empirical_tv
from .reward_fdiv import FDivergence, Reward, transformed_reward

__all__ = [
    "MCEstimate",
    "BoundReport",
    "path_kl",
    "control_objective",
    "grid_divergence",
    "pinsker_check",
    "check_bound_tvd",
    "check_bound_tvd2",
    "check_bound_tvbad",
    "check_marginal_tilt",
]


class MCEstimate(NamedTuple):
    value: float
    std_error: float
    per_path: np.ndarray


def _logpdf(density, pts: np.ndarray) -> np.ndarray:
    if isinstance(density, GridDensity):
        return density.log_pdf(pts)
    if hasattr(density, "logpdf"):
        return density.logpdf(pts)
    return np.asarray(density(pts), dtype=float)


def _mc(x: np.ndarray) -> MCEstimate:
    if np.any(np.isinf(x)):
        return MCEstimate(float(np.inf), float("nan"), x)
    se = float(np.std(x, ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
    return MCEstimate(float(np.mean(x)), se, x)


def _log_ratio(ens: PathEnsemble, nu, p_noise) -> np.ndarray:
    y0 = ens.initial[ens.valid]
    ln_nu = _logpdf(nu, y0)
    ln_p = _logpdf(p_noise, y0)
    out = np.where(np.isneginf(ln_p) & np.isfinite(ln_nu), np.inf, ln_nu - ln_p)
    # nu vanishing at a sample drawn from it contributes nothing
    return np.where(np.isneginf(ln_nu), 0.0, out)


def path_kl(controlled: PathEnsemble, nu, p_noise) -> MCEstimate:
    """``E[log(nu / p_noise)(Y_0) + 1/2 int |u / sigma|^2 dt]`` over valid paths.

    ``nu`` and ``p_noise`` may be :class:`GridDensity` objects, anything with
    ``logpdf`` or plain log-density callables. A zero ``p_noise`` at a
    sampled start makes the estimate ``+inf``.
    """
    per = _log_ratio(controlled, nu, p_noise) + controlled.control_energy[controlled.valid]
    return _mc(per)


@dataclass
class ObjectiveEstimate:
    value: float
    std_error: float
    per_path: np.ndarray
    mean_reward: float
    path_kl: float
    identity_gap: float


def control_objective(ensemble: PathEnsemble, r: Callable, alpha: float, nu, p_noise) -> ObjectiveEstimate:
    """``E[r(Y_T) - alpha/2 int |u/sigma|^2 - alpha log(nu/p_noise)(Y_0)]``.

    ``identity_gap`` compares the mean with ``E r(Y_T) - alpha * path_kl``
    computed from the same samples.
    """
    ok = ensemble.valid
    rew = np.asarray(r(ensemble.terminal[ok]), dtype=float)
    lr = _log_ratio(ensemble, nu, p_noise)
    energy = ensemble.control_energy[ok]
    per = rew - alpha * energy - alpha * lr
    est = _mc(per)
    kl = path_kl(ensemble, nu, p_noise)
    other = float(np.mean(rew)) - alpha * kl.value
    gap = abs(est.value - other) if np.isfinite(est.value) else 0.0
    return ObjectiveEstimate(est.value, est.std_error, per, float(np.mean(rew)), kl.value, gap)


# --------------------------------------------------------------------------
# grid divergences


def grid_divergence(p: GridDensity, q: GridDensity, kind: Union[str, FDivergence] = "tv") -> float:
    """TV, KL or an f-divergence between two densities on the same grid.

    Infinite divergences come back as ``inf``.
    """
    grid = require_same_grid(p, q)
    pv = p.values.ravel() / p.mass
    qv = q.values.ravel() / q.mass
    h = grid.cell_volume
    if isinstance(kind, str):
        kind = kind.lower()
        if kind == "tv":
            return 0.5 * float(np.abs(pv - qv).sum() * h)
        if kind != "kl":
            raise InvalidArgumentError(f"unknown divergence kind {kind!r}")
        if np.any((qv == 0) & (pv > 0)):
            return float(np.inf)
        m = pv > 0
        return max(0.0, float(np.sum(pv[m] * (np.log(pv[m]) - np.log(qv[m]))) * h))
    div = kind
    both = (pv > 0) & (qv > 0)
    total = float(np.sum(div.f(pv[both] / qv[both]) * qv[both]) * h)
    only_p = (pv > 0) & (qv == 0)
    only_q = (pv == 0) & (qv > 0)
    if only_p.any():
        slope = div.f_prime_at_infinity
        if not np.isfinite(slope):
            return float(np.inf)
        total += slope * float(pv[only_p].sum() * h)
    if only_q.any():
        f0 = div.f_at_zero
        if not np.isfinite(f0):
            return float(np.inf)
        total += f0 * float(qv[only_q].sum() * h)
    return total


def pinsker_check(p: GridDensity, q: GridDensity, tol: float = 1e-10) -> dict:
    tv = grid_divergence(p, q, "tv")
    kl = grid_divergence(p, q, "kl")
    return {"tv": tv, "kl": kl, "bound": float(np.sqrt(kl / 2)), "holds": bool(tv <= np.sqrt(kl / 2) + tol)}


# --------------------------------------------------------------------------
# bound reports


@dataclass
class BoundReport:
    name: str
    lhs: float
    rhs: float
    components: dict = field(default_factory=dict)
    mc_std_error: Optional[float] = None
    assumption_ok: bool = True
    note: str = ""

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    def holds(self, n_se: float = 3.0) -> bool:
        """Slack at least ``-n_se`` standard errors (vacuously true if the assumption fails)."""
        if not self.assumption_ok:
            return True
        return bool(self.slack >= -n_se * (self.mc_std_error or 0.0))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "slack": self.slack,
            "mc_std_error": self.mc_std_error,
            "assumption_ok": self.assumption_ok,
            "holds": self.holds(),
            "components": {k: _plain(v) for k, v in self.components.items()},
            "note": self.note,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, float) and not np.isfinite(v):
        return str(v)
    return v


def _log_mean_exp(p: GridDensity, log_vals: np.ndarray) -> float:
    with np.errstate(divide="ignore"):
        return float(logsumexp(log_vals.ravel() + np.log(p.probabilities / p.probabilities.sum())))


def check_bound_tvd(p_ftune: GridDensity, p_pre: GridDensity, p_data: GridDensity, r: Reward,
                    alpha: float) -> BoundReport:
    lhs = grid_divergence(p_ftune, p_data, "tv")
    tv_pre = grid_divergence(p_pre, p_data, "tv")
    r_vals = r(p_pre.grid.points())
    tilt = 0.5 * float(np.exp(0.5 * _log_mean_exp(p_pre, 2 * r_vals / alpha)))
    comps = {"tv_pre_data": tv_pre, "tilt_term": tilt}
    if r.upper is not None:
        comps["tilt_term_bounded"] = 0.5 * float(np.exp(r.upper / alpha))
    return BoundReport("tvd", lhs, tv_pre + tilt, comps)


def check_bound_tvd2(p_ftune_f: GridDensity, p_pre: GridDensity, p_data: GridDensity, div: FDivergence,
                     r: Reward, alpha: float) -> BoundReport:
    rf = transformed_reward(div, r, alpha)
    rf_vals = rf(p_pre.grid.points())
    kappa_grid = float(np.min(rf_vals))
    kappa_bound = rf.infimum
    lhs = grid_divergence(p_ftune_f, p_data, "tv")
    tv_pre = grid_divergence(p_pre, p_data, "tv")
    comps = {"tv_pre_data": tv_pre, "kappa": kappa_grid, "kappa_from_bounds": kappa_bound, "branch": rf.branch}
    ok = np.isfinite(kappa_grid) and np.isfinite(kappa_bound)
    if not ok:
        return BoundReport("tvd2", lhs, float(np.inf), comps, assumption_ok=False,
                           note="inf r_f is -inf; the bound's assumption fails")
    term = 0.5 * float(np.exp(-kappa_grid + 0.5 * _log_mean_exp(p_pre, 2 * rf_vals)))
    comps["tilt_term"] = term
    return BoundReport("tvd2", lhs, tv_pre + term, comps)


def _inv_var_integral(spec: DiffusionSpec, tgrid: TimeGrid) -> float:
    s2 = np.array([float(spec.diffusion(t)) ** 2 for t in tgrid.nodes])
    return float(trapezoid(1.0 / s2, tgrid.nodes))


def check_bound_tvbad(u_tilde: ControlPolicy, u_star: ControlPolicy, nu_tilde: GridDensity, nu_star: GridDensity,
                      spec: DiffusionSpec, n_paths: int, seed: int, p_ftune: GridDensity, time_grid: TimeGrid,
                      n_boot: int = 200) -> BoundReport:
    """Perturbation bound for replacing ``(u*, nu*)`` with ``(u~, nu~)``.

    ``eta^2`` is the largest, over grid times, Monte Carlo mean of
    ``|u~ - u*|^2`` along paths of ``(u*, nu*)``. The left side uses the
    terminal law of ``(u~, nu*)``; the law of ``(u~, nu~)`` is reported too.
    """
    second = np.zeros(time_grid.n_steps + 1)
    second_se = np.zeros(time_grid.n_steps + 1)

    def observe(k, t, x):
        ok = np.all(np.isfinite(x), axis=1)
        diff = u_tilde(t, x[ok]) - u_star(t, x[ok])
        sq = np.sum(diff * diff, axis=1)
        second[k] = sq.mean()
        second_se[k] = sq.std(ddof=1) / np.sqrt(sq.size)

    def init(nu):
        return lambda rng, n: nu.sample(rng, n)

    simulate_sde(spec, time_grid, init(nu_star), control=u_star, n_paths=n_paths, seed=seed,
                 record="ends", observe=observe)
    # the control at the final node is never applied
    k_max = int(np.argmax(second[:-1]))
    eta2 = float(second[k_max])
    eta = np.sqrt(eta2)
    eta_se = second_se[k_max] / (2 * eta) if eta > 0 else float(np.sqrt(second_se[k_max]))
    root = np.sqrt(_inv_var_integral(spec, time_grid))

    ens = simulate_sde(spec, time_grid, init(nu_star), control=u_tilde, n_paths=n_paths, seed=seed + 1, record="ends")
    tv = empirical_tv(ens.terminal, p_ftune, n_boot=n_boot, seed=seed)
    ens2 = simulate_sde(spec, time_grid, init(nu_tilde), control=u_tilde, n_paths=n_paths, seed=seed + 2, record="ends")
    tv2 = empirical_tv(ens2.terminal, p_ftune, n_boot=n_boot, seed=seed)
    kl_nu = grid_divergence(nu_tilde, nu_star, "kl")
    rhs = 0.5 * eta * root + float(np.sqrt(0.5 * kl_nu))
    se = float(np.hypot(tv.std_error, 0.5 * root * eta_se))
    comps = {
        "eta": eta,
        "eta_time": float(time_grid.nodes[k_max]),
        "sqrt_int_inv_var": root,
        "kl_nu_tilde_nu_star": kl_nu,
        "tv_lhs": tv.to_dict(),
        "tv_tilde_pair": tv2.value,
    }
    return BoundReport("tvbad", tv.value, rhs, comps, se)


def marginal_tilt_target(vf: ValueField, q_t: GridDensity, k: int) -> GridDensity:
    """``exp(v(t_k, .) / alpha) Q_t`` normalised; ``log_normalizer`` is its log mass."""
    with np.errstate(divide="ignore"):
        logv = np.log(q_t.values) + vf.v[k] / vf.alpha
    return GridDensity.from_log_values(vf.grid, logv)


def check_marginal_tilt(ensemble: PathEnsemble, node: int, vf: ValueField, q_t: GridDensity,
                        log_c: Optional[float] = None, tol: float = 0.05, n_boot: int = 200, seed: int = 0) -> BoundReport:
    """Histogram TV between the controlled marginal at ``node`` and the tilted pretrained marginal."""
    target = marginal_tilt_target(vf, q_t, node)
    tv = empirical_tv(ensemble.state_at(node)[ensemble.valid], target, n_boot=n_boot, seed=seed)
    comps = {"t": float(vf.time_grid.nodes[node]), "tv": tv.to_dict()}
    if log_c is not None:
        comps["mass_over_C"] = float(np.exp(target.log_normalizer - log_c))
    return BoundReport("marginal-tilt", tv.value, tol, comps, tv.std_error)

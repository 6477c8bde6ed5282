"""A fine-tuning problem bundles a pretrained sampler, a reward and a regulariser.

Expensive objects (value field, pretrained marginals, targets) are built
lazily and cached. ``CATALOG`` lists the toy instances used by the
validation suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .analytic_models import ForwardFamily, GaussianMixture, ScoreModel, backward_spec
from .control_solver import (
    ControlPolicy,
    ValueField,
    approx_control_grid,
    optimal_control,
    optimal_init_distribution,
    pretrained_marginals,
    solve_expected_reward_grid,
    solve_value_grid,
)
from .diffusion_core import PathEnsemble, make_time_grid, simulate_sde
from .grids import GridDensity, SpatialGrid
from .reward_fdiv import (
    FDivergence,
    Reward,
    get_divergence,
    make_reward,
    tilted_density_f,
    transformed_reward,
)

__all__ = ["FineTuneProblem", "CATALOG", "build_problem", "make_instance", "default_grid"]


def default_grid(dim: int) -> SpatialGrid:
    if dim == 1:
        return SpatialGrid((-10.0,), (10.0,), (4096,))
    return SpatialGrid((-8.0,) * dim, (8.0,) * dim, (256,) * dim)


@dataclass
class FineTuneProblem:
    family: ForwardFamily
    reward: Reward
    alpha: float
    divergence: FDivergence = field(default_factory=lambda: get_divergence("kl"))
    epsilon: float = 0.0
    grid: Optional[SpatialGrid] = None
    n_steps: int = 512
    noise: str = "standard"
    name: str = "custom"

    def __post_init__(self):
        if self.grid is None:
            self.grid = default_grid(self.family.dim)

    # model -----------------------------------------------------------------

    @cached_property
    def score_model(self) -> ScoreModel:
        return ScoreModel(self.family, self.epsilon)

    @cached_property
    def spec(self):
        return backward_spec(self.score_model)

    @property
    def dim(self) -> int:
        return self.family.dim

    @cached_property
    def time_grid(self):
        return make_time_grid(0.0, self.family.horizon, self.n_steps)

    @cached_property
    def noise_law(self) -> GaussianMixture:
        return self.family.noise(self.noise)

    @cached_property
    def p_noise(self) -> GridDensity:
        return GridDensity.from_logpdf(self.grid, self.noise_law.logpdf)

    @cached_property
    def p_data(self) -> GridDensity:
        return GridDensity.from_logpdf(self.grid, self.family.base.logpdf)

    # reward ----------------------------------------------------------------

    @cached_property
    def r_target(self):
        """The terminal payoff of the control problem: ``r`` for KL, ``r_f`` otherwise."""
        if self.divergence.name == "kl":
            return self.reward
        return transformed_reward(self.divergence, self.reward, self.alpha)

    @property
    def control_alpha(self) -> float:
        return self.alpha if self.divergence.name == "kl" else 1.0

    # grid solutions --------------------------------------------------------

    @cached_property
    def value_field(self) -> ValueField:
        return solve_value_grid(self.spec, self.r_target, self.control_alpha, self.grid, self.time_grid)

    @cached_property
    def expected_reward_field(self) -> ValueField:
        return solve_expected_reward_grid(self.spec, self.r_target, self.grid, self.time_grid)

    def marginals(self, levels) -> dict:
        levels = sorted({int(k) for k in levels})
        missing = [k for k in levels if k not in self._marginal_cache]
        if missing:
            self._marginal_cache.update(
                pretrained_marginals(self.spec, self.grid, self.time_grid, self.p_noise, missing)
            )
        return {k: self._marginal_cache[k] for k in levels}

    @cached_property
    def _marginal_cache(self) -> dict:
        return {}

    @property
    def p_pre(self) -> GridDensity:
        """Gridded pretrained law at the final time."""
        return self.marginals([self.n_steps])[self.n_steps]

    @cached_property
    def p_ftune(self) -> GridDensity:
        return tilted_density_f(self.p_pre, self.divergence, self.reward, self.alpha)

    @cached_property
    def nu_star(self) -> GridDensity:
        return optimal_init_distribution(self.value_field, self.p_noise)

    @property
    def log_C(self) -> float:
        """``log E_{p_pre} exp(r_target / control_alpha)`` on the grid."""
        vals = self.r_target(self.grid.points()) / self.control_alpha
        with np.errstate(divide="ignore"):
            return float(logsumexp(vals + np.log(self.p_pre.probabilities)))

    @cached_property
    def u_star(self) -> ControlPolicy:
        return optimal_control(self.value_field)

    @cached_property
    def u_tilde(self) -> ControlPolicy:
        return approx_control_grid(self.expected_reward_field, self.control_alpha)

    # sampling --------------------------------------------------------------

    def noise_sampler(self) -> Callable:
        law = self.noise_law
        return lambda rng, n: law.sample(rng, n)

    @staticmethod
    def grid_sampler(density: GridDensity) -> Callable:
        return lambda rng, n: density.sample(rng, n)

    def sample_pretrained(self, n_paths: int, seed: int, record="ends", **kw) -> PathEnsemble:
        return simulate_sde(self.spec, self.time_grid, self.noise_sampler(), n_paths=n_paths, seed=seed,
                            record=record, **kw)

    def sample_controlled(self, n_paths: int, seed: int, policy: Optional[ControlPolicy] = None,
                          init: Optional[GridDensity] = None, record="ends", **kw) -> PathEnsemble:
        """Controlled backward SDE; defaults to ``(u*, nu*)``."""
        policy = self.u_star if policy is None else policy
        init = self.nu_star if init is None else init
        return simulate_sde(self.spec, self.time_grid, self.grid_sampler(init), control=policy,
                            n_paths=n_paths, seed=seed, record=record, **kw)

    def describe(self) -> dict:
        return {
            "name": self.name,
            "divergence": self.divergence.label,
            "alpha": self.alpha,
            "epsilon": self.epsilon,
            "reward": self.reward.to_dict(),
            "grid": self.grid.to_dict(),
            "n_steps": self.n_steps,
        }


# --------------------------------------------------------------------------
# construction from plain dictionaries

_FAMILY_KEYS = ("kind", "horizon", "beta_min", "beta_max", "sigma_min", "sigma_max")


def build_problem(model: dict, reward: dict, divergence: dict, alpha: float, epsilon: float = 0.0,
                  grid: Optional[SpatialGrid] = None, n_steps: int = 512, name: str = "custom") -> FineTuneProblem:
    """Assemble a problem from the nested dictionaries used by configs and the catalog."""
    base = GaussianMixture.from_dict(model["data"])
    fam = ForwardFamily(base=base, **{k: model[k] for k in _FAMILY_KEYS if k in model})
    div = get_divergence(divergence.get("name", "kl"), divergence.get("gamma"))
    return FineTuneProblem(fam, make_reward(reward["name"], reward.get("params")), float(alpha), div, float(epsilon),
                           grid, int(n_steps), model.get("noise", "standard"), name)


_BIMODAL = {"weights": [0.6, 0.4], "means": [[-1.5], [1.5]], "variances": [[0.25], [0.25]]}
_PLANAR = {"weights": [0.5, 0.5], "means": [[-1.5, -1.0], [1.5, 1.0]], "variances": [[0.3, 0.3], [0.3, 0.3]]}
_BUMP = {"height": 2.0, "center": [1.5], "width": 0.75}


def _vp(data, horizon):
    return {"kind": "vp", "horizon": horizon, "beta_min": 1.0, "beta_max": 1.0, "noise": "standard", "data": data}


CATALOG = {
    "linear-gaussian": {
        "model": _vp({"weights": [1.0], "means": [[0.0]], "variances": [[1.0]]}, 1.0),
        "reward": {"name": "linear", "params": {"coef": [1.0], "offset": 0.0}},
        "divergence": {"name": "kl"},
        "alpha": 1.0,
    },
    "bimodal-kl": {
        "model": _vp(_BIMODAL, 5.0),
        "reward": {"name": "gaussian-bump", "params": dict(_BUMP, lower=0.0)},
        "divergence": {"name": "kl"},
        "alpha": 1.0,
    },
    "bimodal-forward-kl": {
        "model": _vp(_BIMODAL, 5.0),
        "reward": {"name": "gaussian-bump", "params": dict(_BUMP, height=1.0, lower=1.0)},
        "divergence": {"name": "forward-kl"},
        "alpha": 0.5,
    },
    "bimodal-gamma": {
        "model": _vp(_BIMODAL, 5.0),
        "reward": {"name": "gaussian-bump", "params": dict(_BUMP, lower=2.5)},
        "divergence": {"name": "gamma", "gamma": 0.5},
        "alpha": 1.0,
    },
    "planar-kl": {
        "model": _vp(_PLANAR, 5.0),
        "reward": {"name": "gaussian-bump", "params": {"height": 2.0, "center": [1.5, 1.0], "width": 1.0}},
        "divergence": {"name": "kl"},
        "alpha": 1.0,
    },
}


def make_instance(name: str, **kw) -> FineTuneProblem:
    try:
        spec = CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown instance {name!r}; choose from {sorted(CATALOG)}") from None
    return build_problem(spec["model"], spec["reward"], spec["divergence"], spec["alpha"], name=name, **kw)

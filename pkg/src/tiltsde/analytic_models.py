"""Gaussian-mixture data laws with exact VP/VE forward marginals and scores.

With a diagonal-covariance mixture as data, both forward families keep
every marginal a mixture with the same weights, so the score and its
Jacobian are available in closed form. ``ScoreModel`` adds a controllable
error field on top of the exact score.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .diffusion_core import DiffusionSpec
from .errors import InvalidArgumentError

__all__ = [
    "GaussianMixture",
    "ForwardFamily",
    "ScoreModel",
    "forward_marginal",
    "score",
    "backward_drift",
    "backward_spec",
]

_LOG_2PI = np.log(2 * np.pi)


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        k = self.weights.size
        if self.means.shape[0] != k and self.means.shape == (1, k):
            self.means = self.means.T
        if self.variances.shape[0] != k and self.variances.shape == (1, k):
            self.variances = self.variances.T
        if self.means.shape[0] != k or self.variances.shape != self.means.shape:
            raise InvalidArgumentError("means and variances must be (n_components, dim)")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise InvalidArgumentError("mixture weights must be nonnegative and sum to 1")
        if np.any(self.variances <= 0):
            raise InvalidArgumentError("mixture variances must be positive")

    @classmethod
    def gaussian(cls, mean, variance) -> "GaussianMixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        var = np.broadcast_to(np.asarray(variance, dtype=float), mean.shape)
        return cls(np.ones(1), mean[None, :], var[None, :].copy())

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixture":
        return cls(data["weights"], data["means"], data["variances"])

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def _component_logpdf(self, x):
        """Per-component log densities ``(K, n)`` and offsets ``(K, n, d)``.

        Component-major layout keeps the reductions over ``K`` and ``d``
        elementwise, which is much faster than reducing a short last axis.
        """
        x = np.atleast_2d(x)
        diff = x[None, :, :] - self.means[:, None, :]
        z = diff * diff / self.variances[:, None, :]
        quad = z[..., 0].copy()
        for j in range(1, self.dim):
            quad += z[..., j]
        logdet = np.sum(np.log(self.variances), axis=1)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return (logw - 0.5 * (logdet + self.dim * _LOG_2PI))[:, None] - 0.5 * quad, diff

    @staticmethod
    def _normalise(comp):
        top = comp.max(axis=0)
        e = np.exp(comp - top)
        tot = e.sum(axis=0)
        return e / tot, top + np.log(tot)

    def logpdf(self, x) -> np.ndarray:
        comp, _ = self._component_logpdf(x)
        if self.n_components == 1:
            return comp[0]
        return self._normalise(comp)[1]

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def responsibilities(self, x) -> np.ndarray:
        """Posterior component probabilities, shape ``(n, K)``."""
        comp, _ = self._component_logpdf(x)
        return self._normalise(comp)[0].T

    def _resp_grads(self, x):
        comp, diff = self._component_logpdf(x)
        resp = self._normalise(comp)[0] if self.n_components > 1 else np.ones_like(comp)
        return resp, -diff / self.variances[:, None, :]

    def score(self, x) -> np.ndarray:
        """Gradient of the log density, shape ``(n, dim)``."""
        resp, grads = self._resp_grads(x)
        out = resp[0][:, None] * grads[0]
        for k in range(1, self.n_components):
            out += resp[k][:, None] * grads[k]
        return out

    def hessian(self, x) -> np.ndarray:
        """Hessian of the log density, shape ``(n, dim, dim)``."""
        resp, grads = self._resp_grads(x)
        s = np.einsum("kn,knd->nd", resp, grads)
        outer = np.einsum("kn,kni,knj->nij", resp, grads, grads)
        prec = resp.T @ (1.0 / self.variances)
        h = outer - s[:, :, None] * s[:, None, :]
        idx = np.arange(self.dim)
        h[:, idx, idx] -= prec
        return h

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp]) * z

    def second_moment(self) -> float:
        """``E|X|^2``."""
        return float(np.sum(self.weights * (np.sum(self.means**2, axis=1) + np.sum(self.variances, axis=1))))

    def expected_cos(self, freq: float, phase: np.ndarray) -> np.ndarray:
        """``E cos(freq * X_i + phase_i)`` per axis, from the characteristic function."""
        damp = np.exp(-0.5 * freq**2 * self.variances)
        return np.sum(self.weights[:, None] * damp * np.cos(freq * self.means + phase[None]), axis=0)


@dataclass
class ForwardFamily:
    """Forward noising SDE of VP or VE type on ``[0, horizon]``.

    VP: ``b = -beta(t) x / 2``, ``sigma = sqrt(beta(t))`` with ``beta`` linear
    from ``beta_min`` to ``beta_max``. VE: ``b = 0`` and the added variance
    ``g(t) = sigma_min^2 ((sigma_max / sigma_min)^(2t/T) - 1)``.
    """

    kind: str
    base: GaussianMixture
    horizon: float
    beta_min: float = 1.0
    beta_max: float = 1.0
    sigma_min: float = 0.01
    sigma_max: float = 10.0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("vp", "ve"):
            raise InvalidArgumentError(f"unknown forward family {self.kind!r}")
        if not self.horizon > 0:
            raise InvalidArgumentError("horizon must be positive")
        if self.kind == "vp" and (self.beta_min <= 0 or self.beta_max <= 0):
            raise InvalidArgumentError("beta schedule must be positive")
        if self.kind == "ve" and not 0 < self.sigma_min < self.sigma_max:
            raise InvalidArgumentError("VE needs 0 < sigma_min < sigma_max")

    @property
    def dim(self) -> int:
        return self.base.dim

    def beta(self, t):
        return self.beta_min + (self.beta_max - self.beta_min) * t / self.horizon

    def integrated_beta(self, t):
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t**2 / self.horizon

    def added_variance(self, t):
        """VE only: ``g(t)``, the variance injected by time ``t``."""
        ratio = self.sigma_max / self.sigma_min
        return self.sigma_min**2 * (ratio ** (2 * t / self.horizon) - 1.0)

    def diffusion(self, t) -> float:
        if self.kind == "vp":
            return float(np.sqrt(self.beta(t)))
        ratio = self.sigma_max / self.sigma_min
        g_prime = self.sigma_min**2 * 2 * np.log(ratio) / self.horizon * ratio ** (2 * t / self.horizon)
        return float(np.sqrt(g_prime))

    def drift(self, t, x):
        if self.kind == "vp":
            return -0.5 * self.beta(t) * x
        return np.zeros_like(x)

    def drift_gradient(self, t) -> float:
        """``b`` is linear and isotropic in both families; this is its slope."""
        return -0.5 * self.beta(t) if self.kind == "vp" else 0.0

    def propagate(self, mix: GaussianMixture, t1: float, t2: float) -> GaussianMixture:
        """Law at ``t2`` of the forward SDE started from ``mix`` at ``t1``."""
        if self.kind == "vp":
            db = self.integrated_beta(t2) - self.integrated_beta(t1)
            scale = np.exp(-0.5 * db)
            return GaussianMixture(mix.weights, mix.means * scale, mix.variances * scale**2 + 1.0 - scale**2)
        added = self.added_variance(t2) - self.added_variance(t1)
        return GaussianMixture(mix.weights, mix.means.copy(), mix.variances + added)

    def noise(self, mode: str = "standard") -> GaussianMixture:
        """Initial law of the backward sampler.

        ``standard`` is ``N(0, I)`` for VP and ``N(0, g(T) I)`` for VE;
        ``exact`` is the true terminal marginal ``p(T, .)``.
        """
        if mode == "exact":
            return forward_marginal(self, self.horizon)
        if mode != "standard":
            raise InvalidArgumentError(f"unknown noise mode {mode!r}")
        var = 1.0 if self.kind == "vp" else float(self.added_variance(self.horizon))
        return GaussianMixture.gaussian(np.zeros(self.dim), var)

    def forward_spec(self) -> DiffusionSpec:
        d = self.dim
        return DiffusionSpec(
            dim=d,
            drift=self.drift,
            diffusion=self.diffusion,
            horizon=self.horizon,
            drift_jacobian=lambda t, x: np.broadcast_to(self.drift_gradient(t) * np.eye(d), (x.shape[0], d, d)).copy(),
            name=f"forward-{self.kind}",
        )


def forward_marginal(family: ForwardFamily, t: float) -> GaussianMixture:
    if not -1e-12 <= t <= family.horizon + 1e-12:
        raise InvalidArgumentError(f"t={t} outside [0, {family.horizon}]")
    if t <= 0:
        return GaussianMixture(family.base.weights, family.base.means.copy(), family.base.variances.copy())
    return family.propagate(family.base, 0.0, t)


@dataclass
class ScoreModel:
    """Exact mixture score plus ``epsilon`` times a unit-norm sinusoidal field.

    The error field at time ``t`` is ``sin(freq * x_i + phase_i)`` per axis,
    divided by its ``L^2(p(t, .))`` norm, which is computed in closed form
    from the mixture characteristic function. Hence
    ``||score - exact||_{L^2(p_t)} = epsilon`` exactly.
    """

    family: ForwardFamily
    epsilon: float = 0.0
    freq: float = 1.3
    phase: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.epsilon < 0:
            raise InvalidArgumentError("epsilon must be nonnegative")
        if self.phase is None:
            self.phase = 0.4 + 0.9 * np.arange(self.family.dim)
        self.phase = np.asarray(self.phase, dtype=float)

    @property
    def horizon(self) -> float:
        return self.family.horizon

    def marginal(self, t) -> GaussianMixture:
        return forward_marginal(self.family, t)

    def perturbation_norm(self, t) -> float:
        m = self.marginal(t)
        ecos = m.expected_cos(2 * self.freq, 2 * self.phase)
        return float(np.sqrt(np.sum(0.5 * (1.0 - ecos))))

    def perturbation(self, t, x) -> np.ndarray:
        if self.epsilon == 0:
            return np.zeros_like(x)
        return self.epsilon * np.sin(self.freq * x + self.phase) / self.perturbation_norm(t)

    def perturbation_jacobian_diag(self, t, x) -> np.ndarray:
        if self.epsilon == 0:
            return np.zeros_like(x)
        return self.epsilon * self.freq * np.cos(self.freq * x + self.phase) / self.perturbation_norm(t)


def score(model: ScoreModel, t: float, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return model.marginal(t).score(x) + model.perturbation(t, x)


def backward_drift(model: ScoreModel, t: float, y) -> np.ndarray:
    """``-b(T - t, y) + sigma(T - t)^2 s(T - t, y)``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    s = model.horizon - t
    fam = model.family
    return -fam.drift(s, y) + fam.diffusion(s) ** 2 * score(model, s, y)


def _backward_jacobian(model: ScoreModel, t: float, y) -> np.ndarray:
    s = model.horizon - t
    fam = model.family
    d = fam.dim
    jac = fam.diffusion(s) ** 2 * model.marginal(s).hessian(y)
    idx = np.arange(d)
    jac[:, idx, idx] += fam.diffusion(s) ** 2 * model.perturbation_jacobian_diag(s, y) - fam.drift_gradient(s)
    return jac


def backward_spec(model: ScoreModel) -> DiffusionSpec:
    """The pretrained sampler: drift ``b_bar(t, y)``, diffusion ``sigma(T - t)``."""
    fam = model.family
    return DiffusionSpec(
        dim=fam.dim,
        drift=lambda t, y: backward_drift(model, t, y),
        diffusion=lambda t: fam.diffusion(model.horizon - t),
        horizon=model.horizon,
        drift_jacobian=lambda t, y: _backward_jacobian(model, t, y),
        name=f"backward-{fam.kind}-eps{model.epsilon:g}",
    )

"""Randomised invariants (hypothesis)."""

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tiltsde.diffusion_core import brownian_increments, make_time_grid
from tiltsde.girsanov_metrics import grid_divergence, pinsker_check
from tiltsde.grids import GridDensity, SpatialGrid
from tiltsde.harness import ExperimentConfig
from tiltsde.oracle import empirical_tv
from tiltsde.reward_fdiv import (
    Reward,
    f_prime_inverse_signed,
    get_divergence,
    kkt_lambda_solve,
    tilted_density_kl,
)

# random densities put mass on the grid edge on purpose
pytestmark = [
    pytest.mark.filterwarnings("ignore:.*grid boundary:RuntimeWarning"),
    pytest.mark.filterwarnings("ignore:density ratio approaches 0:RuntimeWarning"),
]

SMALL = SpatialGrid((-4.0,), (4.0,), (65,))
finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)
log_values = arrays(np.float64, SMALL.shape, elements=finite)
bounded = arrays(np.float64, SMALL.shape, elements=st.floats(0, 3, allow_nan=False))


def density(lv):
    return GridDensity.from_log_values(SMALL, lv)


def table_reward(vals):
    # reward given by its values at the grid nodes
    vals = np.asarray(vals, dtype=float)
    idx = lambda y: np.clip(np.rint((y[:, 0] - SMALL.lower[0]) / SMALL.spacing[0]).astype(int), 0, vals.size - 1)  # noqa: E731
    return Reward(lambda y: vals[idx(y)], lower=float(vals.min()), upper=float(vals.max()))


@given(log_values)
def test_from_log_values_normalises(lv):
    p = density(lv)
    assert p.mass == pytest.approx(1.0, abs=1e-12)
    assert p.probabilities.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.isfinite(p.log_normalizer)


@given(log_values, log_values)
def test_tv_is_a_bounded_symmetric_pinsker_distance(a, b):
    p, q = density(a), density(b)
    tv = grid_divergence(p, q)
    assert 0.0 <= tv <= 1.0 + 1e-12
    assert tv == pytest.approx(grid_divergence(q, p), abs=1e-12)
    assert grid_divergence(p, q, "kl") >= 0.0
    assert pinsker_check(p, q, tol=1e-9)["holds"]


@given(log_values, bounded, bounded, st.floats(0.2, 5.0))
def test_tilts_compose(lv, r1, r2, alpha):
    p = density(lv)
    two = tilted_density_kl(tilted_density_kl(p, table_reward(r1), alpha), table_reward(r2), alpha)
    one = tilted_density_kl(p, table_reward(r1 + r2), alpha)
    np.testing.assert_allclose(two.values, one.values, rtol=1e-9, atol=1e-300)


BRANCHES = [
    (get_divergence("kl"), "+", st.floats(-30, 30)),
    (get_divergence("forward-kl"), "-", st.floats(1e-3, 1e3)),
    (get_divergence("gamma", 0.5), "-", st.floats(2.0 + 1e-6, 1e3)),
    (get_divergence("gamma", 0.5), "+", st.floats(-1e3, 2.0 - 1e-6)),
    (get_divergence("gamma", 1.0), "+", st.floats(-1e3, 1.0 - 1e-6)),
]


@pytest.mark.parametrize("div, branch, ts", BRANCHES, ids=lambda x: getattr(x, "label", str(x)))
@given(data=st.data())
def test_branch_inverse_round_trip(div, branch, ts, data):
    t = data.draw(ts)
    x, used = f_prime_inverse_signed(div, t, branch=branch)
    assert used == branch and x > 0
    assert float(div.branch_derivative(branch)(x)) == pytest.approx(t, rel=1e-9, abs=1e-9)


@given(log_values, bounded, st.floats(0.3, 3.0), st.floats(-5, 5))
def test_kkt_shift_equivariance(lv, r, alpha, c):
    p = density(lv)
    div = get_divergence("forward-kl")
    base = table_reward(r + 1.0)
    shifted = table_reward(r + 1.0 + c)
    a = kkt_lambda_solve(p, div, base, alpha)
    b = kkt_lambda_solve(p, div, shifted, alpha)
    assert abs(a.mass - 1) <= 1e-10 and abs(b.mass - 1) <= 1e-10
    assert b.lam == pytest.approx(a.lam + c, abs=1e-7)
    np.testing.assert_allclose(a.density.values, b.density.values, rtol=1e-6, atol=1e-12)


@given(log_values, bounded, st.floats(0.3, 3.0))
def test_kkt_mass_decreases_in_lambda(lv, r, alpha):
    sol = kkt_lambda_solve(density(lv), get_divergence("gamma", 0.5), table_reward(r), alpha)
    lam, mass = np.array(sorted(set(sol.trace))).T
    assert np.all(np.diff(mass) <= 0)


@given(st.integers(0, 2**64 - 1), st.integers(1, 3), st.integers(0, 9000), st.integers(1, 300))
def test_increment_slices_are_deterministic(seed, dim, offset, n):
    g = make_time_grid(0.0, 1.0, 3)
    whole = brownian_increments(offset + n, g, dim, seed=seed)
    part = brownian_increments(n, g, dim, seed=seed, path_offset=offset)
    np.testing.assert_array_equal(part, whole[offset:])


@given(
    st.sampled_from(["linear-gaussian", "bimodal-kl", "bimodal-forward-kl", "bimodal-gamma"]),
    st.floats(0.05, 50.0),
    st.floats(0.0, 1.0),
    st.integers(0, 2**64 - 1),
    st.integers(1, 10**6),
)
def test_config_round_trip(name, alpha, eps, seed, n_paths):
    cfg = ExperimentConfig.from_instance(name)
    cfg.alpha, cfg.epsilon = alpha, eps
    cfg.simulation.seed, cfg.simulation.n_paths = seed, n_paths
    assume(name != "bimodal-gamma" or cfg.reward.params.get("lower", 0) > alpha / cfg.divergence.gamma
           or cfg.reward.params.get("lower", 0) + cfg.reward.params.get("height", 0) < alpha / cfg.divergence.gamma)
    again = ExperimentConfig.from_dict(ExperimentConfig.from_dict(cfg.to_dict()).to_dict())
    assert again == cfg and again.digest() == cfg.digest()


@given(st.integers(0, 2**32 - 1), st.integers(50, 2000))
def test_histogram_tv_in_unit_interval(seed, n):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, 1))
    b = rng.standard_normal((n, 1)) * 2 + 1
    est = empirical_tv(a, b, n_boot=20)
    assert 0.0 <= est.value <= 1.0
    assert est.ci[0] <= est.ci[1]

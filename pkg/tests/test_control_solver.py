import numpy as np
import pytest
from scipy.special import logsumexp

from tiltsde import _pde
from tiltsde.control_solver import (
    approx_control,
    fk_value_estimate,
    hj_residual,
    nonlinear_hj_value,
    optimal_control,
    optimal_init_distribution,
    pretrained_marginals,
    sample_init_distribution,
    solve_value_grid,
    zero_control,
)
from tiltsde.diffusion_core import make_time_grid
from tiltsde.errors import InvalidArgumentError
from tiltsde.girsanov_metrics import grid_divergence
from tiltsde.grids import SpatialGrid
from tiltsde.oracle import empirical_tv
from tiltsde.reward_fdiv import constant_reward, linear_reward

from _util import GRID_1D, bm_spec, gaussian_density, instance, ou_spec, se_mean

LIN = linear_reward([1.0])
P_NOISE = gaussian_density(GRID_1D, 0.0, 1.0)


@pytest.fixture(scope="module")
def bm_field():
    return solve_value_grid(bm_spec(1.0), LIN, 1.0, GRID_1D, n_steps=256)


def test_zero_reward_gives_zero_value():
    vf = solve_value_grid(bm_spec(1.0), constant_reward(0.0), 1.0, GRID_1D, n_steps=64)
    np.testing.assert_allclose(vf.v, 0.0, atol=1e-12)
    np.testing.assert_allclose(vf.hopf_values, 1.0, atol=1e-12)
    u = optimal_control(vf)
    np.testing.assert_allclose(u(0.3, np.linspace(-3, 3, 7)[:, None]), 0.0, atol=1e-10)
    nu = optimal_init_distribution(vf, P_NOISE)
    np.testing.assert_allclose(nu.values, P_NOISE.normalized().values, rtol=1e-10)


def test_brownian_linear_value(bm_field):
    vf = bm_field
    mask = GRID_1D.interior_mask(0.5)
    y = GRID_1D.axes[0]
    for k in (0, 64, 200):
        t = vf.time_grid.nodes[k]
        np.testing.assert_allclose(vf.v[k][mask], (y + (1 - t) / 2)[mask], atol=1e-4)
    np.testing.assert_array_equal(vf.terminal, y)
    np.testing.assert_allclose(vf.hopf_values, np.exp(vf.v / vf.alpha), rtol=1e-12)


def test_brownian_linear_control_and_initial_law(bm_field):
    u = optimal_control(bm_field)
    y = np.linspace(-4, 4, 17)[:, None]
    for t in (0.0, 0.5, 0.99):
        np.testing.assert_allclose(u(t, y), 1.0, atol=1e-4)
    nu = optimal_init_distribution(bm_field, P_NOISE)
    target = gaussian_density(GRID_1D, 1.0, 1.0)
    assert grid_divergence(nu, target) < 1e-3
    assert nu.log_normalizer == pytest.approx(1.0, abs=1e-4)


def test_fk_edge_cases():
    spec = bm_spec(1.0)
    est = fk_value_estimate(spec, LIN, 1.0, 1.0, [0.3], n_paths=10)
    assert (est.value, est.std_error) == (pytest.approx(0.3), 0.0)
    est = fk_value_estimate(spec, constant_reward(2.5), 0.7, 0.2, [1.0], n_paths=1000)
    assert est.value == pytest.approx(2.5, abs=1e-12)
    with pytest.raises(InvalidArgumentError):
        fk_value_estimate(spec, LIN, 1.0, 1.5, [0.0])


def test_fk_brownian_mgf():
    est = fk_value_estimate(bm_spec(1.0), LIN, 1.0, 0.0, [0.0], n_paths=100_000, seed=1)
    assert abs(est.value - 0.5) <= 3 * est.std_error


def test_cole_hopf_matches_nonlinear_solve():
    p = instance("bimodal-kl")
    grid = SpatialGrid((-8.0,), (8.0,), (257,))
    lin = solve_value_grid(p.spec, p.reward, 1.0, grid, n_steps=512).initial
    direct = nonlinear_hj_value(p.spec, p.reward, 1.0, grid)
    mask = grid.interior_mask(0.5)
    assert np.sqrt(np.mean((lin - direct)[mask] ** 2)) <= 1e-3


def test_residual_small_for_linear_instance():
    res = hj_residual(instance("linear-gaussian").value_field)
    assert res["rms"] <= 1e-3


def test_gradient_orders_agree():
    vf = instance("bimodal-kl").value_field
    mask = GRID_1D.interior_mask(0.5)
    for k in (0, 256, 511):
        d2 = vf.gradient(k)[mask]
        d4 = vf.gradient(k, order=4)[mask]
        assert np.sqrt(np.mean((d2 - d4) ** 2)) <= 1e-4


def test_linear_reward_controls_coincide():
    p = instance("linear-gaussian")
    y = np.linspace(-3, 3, 13)[:, None]
    for t in (0.0, 0.5, 0.9):
        np.testing.assert_allclose(p.u_star(t, y), p.u_tilde(t, y), atol=1e-3)


def test_approx_control_linear_reward_exact():
    spec = bm_spec(1.0)
    for method in ("malliavin", "resimulation"):
        est = approx_control(spec, linear_reward([2.0]), 0.5, 0.3, [0.1], n_paths=2000, method=method)
        np.testing.assert_allclose(est.value, 4.0, rtol=1e-10)


def test_malliavin_tangent_on_linear_drift():
    k, T, t = 0.8, 1.0, 0.25
    est = approx_control(ou_spec(k, T), linear_reward([1.0]), 1.0, t, [0.5], n_paths=500, n_steps=2048)
    assert est.value[0] == pytest.approx(np.exp(-k * (T - t)), rel=1e-3)


def test_approx_control_methods_agree():
    p = instance("bimodal-kl")
    kw = dict(n_paths=100_000, seed=5, n_steps=512)
    a = approx_control(p.spec, p.reward, 1.0, 2.5, [0.8], method="malliavin", **kw)
    b = approx_control(p.spec, p.reward, 1.0, 2.5, [0.8], method="resimulation", **kw)
    assert abs(a.value[0] - b.value[0]) <= 3 * np.hypot(a.std_error[0], b.std_error[0])
    # and both agree with the gridded expected-reward gradient
    assert abs(a.value[0] - p.u_tilde(2.5, [[0.8]])[0, 0]) <= 3 * a.std_error[0] + 1e-3


def test_init_sampler_zero_reward():
    vf = solve_value_grid(bm_spec(1.0), constant_reward(0.0), 1.0, GRID_1D, n_steps=64)
    with pytest.warns(RuntimeWarning):
        ens = sample_init_distribution(vf, 50_000, seed=1, s=0.5)
    assert np.abs(ens.extras["aux_field"].v).max() < 1e-12
    assert empirical_tv(ens.terminal, P_NOISE, sensitivity=False).value < 0.05


def test_init_sampler_linear_reward(bm_field):
    ens = sample_init_distribution(bm_field, 100_000, seed=2)
    m, se = se_mean(ens.terminal[:, 0])
    assert abs(m - 1.0) <= 3 * se
    assert ens.extras["s"] == 1.0


def test_init_sampler_schedule_errors(bm_field):
    with pytest.raises(InvalidArgumentError):
        sample_init_distribution(bm_field, 10, seed=0, s=1.5)
    with pytest.raises(InvalidArgumentError):
        sample_init_distribution(bm_field, 10, seed=0, sigma_prime=lambda t: 2.0)


def test_init_sampler_custom_schedule(bm_field):
    # a spread start tilts each start point on its own: for v(0, y) = y + c,
    # N(x, s) becomes N(x + s, s) and x ~ N(0, 1 - s) gives N(s, 1), not N(1, 1)
    with pytest.warns(RuntimeWarning, match="per-start"):
        ens = sample_init_distribution(bm_field, 100_000, seed=3, sigma_prime=lambda t: np.sqrt(0.3 + 0.6 * t))
    assert ens.extras["s"] == pytest.approx(0.6, rel=1e-6)
    assert empirical_tv(ens.terminal, gaussian_density(GRID_1D, 0.6, 1.0), sensitivity=False).value < 0.05
    m, se = se_mean(ens.terminal[:, 0])
    assert abs(m - 0.6) <= 3 * se + 1e-2


def test_marginal_duality_is_exact():
    p = instance("bimodal-kl")
    vf = p.value_field
    ks = [0, 100, 256, 400, 512]
    qs = pretrained_marginals(p.spec, p.grid, p.time_grid, p.p_noise, ks)
    logs = [logsumexp(vf.v[k].ravel() / vf.alpha, b=qs[k].probabilities.ravel()) for k in ks]
    np.testing.assert_allclose(logs, p.log_C, atol=1e-9)
    for k in ks:
        assert qs[k].mass == pytest.approx(1.0, abs=1e-9)


def test_dimension_checks():
    with pytest.raises(InvalidArgumentError):
        solve_value_grid(bm_spec(1.0, d=2), LIN, 1.0, GRID_1D)
    with pytest.raises(InvalidArgumentError):
        solve_value_grid(bm_spec(1.0), LIN, 0.0, GRID_1D)
    assert zero_control(2)(0.0, np.ones((3, 2))).shape == (3, 2)


def test_backward_operator_rows_conserve():
    grid = SpatialGrid((-3.0,), (3.0,), (65,))
    spec = ou_spec(0.7)
    tg = make_time_grid(0, 1, 8)
    ones = np.ones(grid.shape)
    levels, _ = _pde.backward_sweep(spec, grid, tg, ones)
    np.testing.assert_allclose(levels, 1.0, atol=1e-13)

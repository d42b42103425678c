import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import dense_gp

from lightplace.environment import Measurement
from lightplace.gp_baseline import GPParams, ResidualGPBelief, fit_residuals, gp_fit, gp_predict
from lightplace.grid import GridMap
from lightplace.lighting import LightField


def test_defaults_follow_grid():
    p = GPParams.for_grid(0.35)
    assert p.length_scale == pytest.approx(0.7)
    assert p.sigma_f == pytest.approx(0.2)
    assert p.sigma_n == pytest.approx(0.02)


def test_no_data_returns_prior(open_grid):
    model = gp_fit([], np.zeros(0), open_grid)
    analytic = LightField.from_free(open_grid, np.linspace(0, 1, open_grid.num_free))
    b = gp_predict(model, analytic)
    assert np.allclose(b.mu, analytic.free_values)
    assert np.allclose(b.sigma, 0.2)


def test_interpolates_with_tiny_noise(open_grid):
    p = GPParams(0.7, 0.2, 1e-6)
    model = gp_fit([Measurement(0, (3, 4), 1.3)], np.array([1.0]), open_grid, p)
    mean, var = model.predict(open_grid.center((3, 4)))
    assert mean[0] == pytest.approx(0.3, abs=1e-6)
    assert var[0] < 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_matches_dense_oracle(seed, open_grid):
    rng = np.random.default_rng(seed)
    p = GPParams.for_grid(open_grid.spacing)
    cells = [open_grid.free_cells[i] for i in rng.choice(open_grid.num_free, 3, replace=False)]
    ms = [Measurement(0, c, float(rng.uniform(0, 2))) for c in cells]
    analytic = LightField.from_free(open_grid, rng.uniform(0, 1, open_grid.num_free))
    model = gp_fit(ms, np.array([analytic.at(c) for c in cells]), open_grid, p)
    b = gp_predict(model, analytic)
    X = np.array([open_grid.center(c) for c in cells])
    y = np.array([m.value - analytic.at(m.cell) for m in ms])
    mean, var = dense_gp(X, y, open_grid.free_centers(), p.length_scale, p.sigma_f, p.sigma_n)
    assert np.allclose(b.mu_u, mean, atol=1e-8, rtol=0)
    assert np.allclose(b.sigma_u**2, var, atol=1e-8, rtol=0)


def test_far_field_reverts_to_analytic():
    g = GridMap.build(40, 3, 0.35)
    analytic = LightField.from_free(g, np.full(g.num_free, 0.4))
    model = gp_fit([Measurement(0, (1, 0), 2.0)], np.array([0.4]), g)
    b = gp_predict(model, analytic)
    far = g.free_index()[1, 39]
    assert b.mu[far] == pytest.approx(0.4, abs=1e-9)
    assert b.sigma[far] == pytest.approx(0.2, abs=1e-9)


def test_kernel_ignores_walls(walled_grid):
    gp = ResidualGPBelief(walled_grid)
    gp.rebuild_priors(LightField.zeros(walled_grid))
    base = gp.solve().mu.copy()
    gp.add_measurement(Measurement(0, (2, 1), 1.0))
    after = gp.solve().mu
    across = walled_grid.free_index()[2, 3]
    assert abs(after[across] - base[across]) > 1e-3


@given(st.integers(0, 10_000))
def test_variance_bounded_and_monotone(seed):
    rng = np.random.default_rng(seed)
    p = GPParams(0.7, 0.2, 0.02)
    X = rng.uniform(0, 4.5, (6, 2))
    y = rng.normal(0, 0.3, 6)
    q = rng.uniform(0, 4.5, (10, 2))
    prev = np.full(10, np.inf)
    for k in range(7):
        _, var = fit_residuals(X[:k], y[:k], p).predict(q)
        assert np.all(var <= p.sigma_f**2 + p.sigma_n**2 + 1e-12)
        assert np.all(var <= prev + 1e-12)
        prev = var


def test_residuals_frozen_against_measurement_time_prior(small_grid):
    gp = ResidualGPBelief(small_grid, GPParams(0.7, 0.2, 1e-6))
    gp.rebuild_priors(LightField.from_free(small_grid, np.full(small_grid.num_free, 1.0)))
    gp.add_measurement(Measurement(0, (2, 2), 1.5))
    gp.on_reconfigure(LightField.from_free(small_grid, np.full(small_grid.num_free, 3.0)))
    b = gp.solve()
    i = small_grid.free_index()[2, 2]
    assert b.mu_u[i] == pytest.approx(0.5, abs=1e-5)
    assert b.mu[i] == pytest.approx(3.5, abs=1e-5)


def test_dense_measurements_recover_truth(small_grid):
    truth = np.sin(small_grid.free_centers()[:, 0]) + 0.3
    analytic = LightField.zeros(small_grid)
    ms = [Measurement(0, c, float(t)) for c, t in zip(small_grid.free_cells, truth)]
    b = gp_predict(gp_fit(ms, np.zeros(len(ms)), small_grid, GPParams(0.7, 1.0, 1e-5)), analytic)
    assert np.sqrt(np.mean((b.mu - truth) ** 2)) < 1e-4

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import dense_factor_graph

from lightplace.belief import BeliefError, BeliefField, BeliefParams, FactorGraphBelief
from lightplace.environment import Measurement
from lightplace.grid import GridMap, ObstacleSet, Rect
from lightplace.lighting import LightField

S = 0.35


def random_case(rng, max_side=5, link_mode="residual"):
    w, h = rng.integers(2, max_side + 1, 2)
    rects = []
    for _ in range(rng.integers(0, 3)):
        c, r = rng.integers(0, w), rng.integers(0, h)
        rects.append(Rect(c * S, r * S, (c + 1) * S, (r + 1) * S, 0.5))
    grid = GridMap.build(int(w), int(h), S, ObstacleSet(tuple(rects)))
    params = BeliefParams(
        sigma_analytic=rng.uniform(0.05, 0.3),
        sigma_meas=rng.uniform(0.01, 0.1),
        sigma_link=rng.uniform(0.02, 0.3),
        sigma_weak=rng.uniform(2, 20),
        link_mode=link_mode,
    )
    analytic = rng.uniform(0, 2, grid.num_free)
    k = rng.integers(0, grid.num_free + 1)
    cells = rng.choice(grid.num_free, size=k, replace=False)
    meas = {int(i): float(rng.uniform(0, 3)) for i in cells}
    return grid, params, analytic, meas


def load(grid, params, analytic, meas):
    fg = FactorGraphBelief(grid, params)
    fg.rebuild_priors(LightField.from_free(grid, analytic))
    cells = grid.free_cells
    for i, y in meas.items():
        fg.add_measurement(Measurement(0, cells[i], y))
    return fg


def assert_matches_oracle(field, oracle, tol=1e-6):
    mu_s, mu_u, var_s, var_u, cov_su = oracle
    assert np.allclose(field.mu_s, mu_s, atol=tol, rtol=0)
    assert np.allclose(field.mu_u, mu_u, atol=tol, rtol=0)
    assert np.allclose(field.sigma_s, np.sqrt(var_s), atol=tol, rtol=0)
    assert np.allclose(field.sigma_u, np.sqrt(var_u), atol=tol, rtol=0)
    assert np.allclose(field.cov_su, cov_su, atol=tol, rtol=0)


@pytest.mark.parametrize("mode", ["residual", "plain"])
def test_matches_dense_oracle_4x4(mode):
    rng = np.random.default_rng(4)
    grid = GridMap.build(4, 4, S, ObstacleSet((Rect(S, S, 2 * S, 3 * S),)))
    params = BeliefParams(link_mode=mode)
    analytic = rng.uniform(0, 2, grid.num_free)
    meas = {1: 0.4, 5: 1.9, 9: 0.0}
    field = load(grid, params, analytic, meas).solve()
    assert_matches_oracle(field, dense_factor_graph(grid, [(analytic, meas)], params))


def test_no_measurements_gives_priors(small_grid):
    analytic = np.linspace(0.1, 3.0, small_grid.num_free)
    field = load(small_grid, BeliefParams(), analytic, {}).solve()
    assert np.allclose(field.mu_s, analytic, atol=1e-12)
    assert np.allclose(field.mu_u, 0.0, atol=1e-12)


def test_strong_link_pulls_plain_neighbors_together():
    grid = GridMap.build(2, 1, S)
    p = BeliefParams(sigma_analytic=1.0, sigma_link=0.1, link_mode="plain")
    field = load(grid, p, np.array([0.0, 4.0]), {}).solve()
    wa, wl = 1.0, 1 / 0.1**2
    J = np.array([[wa + wl, -wl], [-wl, wa + wl]])
    expected = np.linalg.solve(J, wa * np.array([0.0, 4.0]))
    assert np.allclose(field.mu_s, expected)
    assert 0 < field.mu_s[0] < field.mu_s[1] < 4.0


def test_residual_links_keep_analytic_shape():
    grid = GridMap.build(2, 1, S)
    field = load(grid, BeliefParams(sigma_link=0.01), np.array([0.0, 4.0]), {}).solve()
    assert np.allclose(field.mu_s, [0.0, 4.0])


def test_two_variable_chain_symmetric():
    grid = GridMap.build(2, 1, S)
    p = BeliefParams(sigma_analytic=1.0, sigma_link=1.0, link_mode="plain")
    mu = load(grid, p, np.array([0.0, 2.0]), {}).solve().mu_s
    assert 0 < mu[0] < 1 < mu[1] < 2
    assert mu[0] + mu[1] == pytest.approx(2.0)


def test_single_cell_three_factor_system():
    grid = GridMap.build(1, 1, S)
    p = BeliefParams(sigma_analytic=0.2, sigma_meas=0.05, sigma_weak=3.0)
    a, y = 0.8, 1.5
    field = load(grid, p, np.array([a]), {0: y}).solve()
    wa, ww, wm = 1 / 0.2**2, 1 / 3.0**2, 1 / 0.05**2
    J = np.array([[wa + wm, wm], [wm, ww + wm]])
    h = np.array([wa * a + wm * y, wm * y])
    mu = np.linalg.solve(J, h)
    cov = np.linalg.inv(J)
    assert field.mu_s[0] == pytest.approx(mu[0], abs=1e-12)
    assert field.mu_u[0] == pytest.approx(mu[1], abs=1e-12)
    assert field.sigma[0] ** 2 == pytest.approx(cov.sum(), abs=1e-12)


def test_measurement_equal_to_prior_leaves_no_residual():
    grid = GridMap.build(1, 1, S)
    field = load(grid, BeliefParams(sigma_weak=1e6), np.array([0.7]), {0: 0.7}).solve()
    assert field.mu_u[0] == pytest.approx(0.0, abs=1e-9)


def test_uninformative_measurement_keeps_prior(small_grid):
    analytic = np.full(small_grid.num_free, 0.5)
    prior = load(small_grid, BeliefParams(), analytic, {}).solve()
    post = load(small_grid, BeliefParams(sigma_meas=1e8), analytic, {3: 9.0}).solve()
    assert np.allclose(post.mu, prior.mu, atol=1e-9)
    assert np.allclose(post.sigma, prior.sigma, atol=1e-9)


@given(st.integers(0, 10_000))
def test_measurement_strictly_shrinks_sigma(seed):
    rng = np.random.default_rng(seed)
    grid, params, analytic, meas = random_case(rng, 4)
    fg = load(grid, params, analytic, meas)
    before = fg.solve().sigma
    i = int(rng.integers(grid.num_free))
    fg.add_measurement(Measurement(1, grid.free_cells[i], 1.0))
    after = fg.solve().sigma
    if i in meas:  # replaced within the epoch: information unchanged
        assert after[i] == pytest.approx(before[i])
    else:
        assert after[i] < before[i]
    assert np.all(after <= before + 1e-12)


def test_epoch_consistency_same_config(small_grid):
    rng = np.random.default_rng(7)
    analytic = rng.uniform(0, 2, small_grid.num_free)
    fg = load(small_grid, BeliefParams(), analytic, {0: 2.0, 6: 0.3, 12: 1.1})
    before = fg.solve()
    fg.on_reconfigure(LightField.from_free(small_grid, analytic))
    after = fg.solve()
    assert np.max(np.abs(after.mu_u - before.mu_u)) < 1e-9


def test_surplus_survives_reconfigure_two_epoch_oracle():
    grid = GridMap.build(2, 2, S)
    p = BeliefParams()
    a1 = np.array([0.2, 0.3, 0.4, 0.5])
    a2 = np.array([1.0, 0.1, 0.6, 0.2])
    m1 = {0: 2.2}
    m2 = {3: 0.9}
    fg = load(grid, p, a1, m1)
    first = fg.solve()
    fg.on_reconfigure(LightField.from_free(grid, a2))
    mid = fg.solve()
    assert mid.mu_u[0] == pytest.approx(first.mu_u[0], abs=1e-9)
    assert mid.mu_u[0] > 1.5
    fg.add_measurement(Measurement(5, grid.free_cells[3], m2[3]))
    field = fg.solve()
    assert_matches_oracle(field, dense_factor_graph(grid, [(a1, m1), (a2, m2)], p), tol=1e-9)


def test_previous_factors_only_on_measured_cells(small_grid):
    fg = load(small_grid, BeliefParams(), np.zeros(small_grid.num_free), {2: 1.0, 7: 0.5})
    fg.solve()
    fg.on_reconfigure(LightField.zeros(small_grid))
    prev = [f for f in fg.factors() if f["type"] == "previous_config"]
    assert len(prev) == 1
    assert prev[0]["vars"] == ["u2", "u7"]


def test_marginal_previous_factor_mode(small_grid):
    p = BeliefParams(previous_factor="marginal")
    fg = load(small_grid, p, np.zeros(small_grid.num_free), {4: 1.0})
    first = fg.solve()
    fg.on_reconfigure(LightField.zeros(small_grid))
    second = fg.solve()
    kinds = [f["type"] for f in fg.factors() if f["vars"] == ["u4"]]
    assert kinds == ["previous_config"]
    assert second.sigma_u[4] <= first.sigma_u[4] + 1e-12
    assert second.mu_u[4] > 0


def test_reconfigure_requires_fresh_solve(small_grid):
    fg = load(small_grid, BeliefParams(), np.zeros(small_grid.num_free), {1: 1.0})
    with pytest.raises(BeliefError):
        fg.on_reconfigure(LightField.zeros(small_grid))


def test_measurement_on_obstacle_rejected(walled_grid):
    fg = FactorGraphBelief(walled_grid)
    fg.rebuild_priors(LightField.zeros(walled_grid))
    with pytest.raises(BeliefError):
        fg.add_measurement(Measurement(0, (0, 2), 1.0))


def test_wall_decouples_sides(walled_grid):
    analytic = np.zeros(walled_grid.num_free)
    left = walled_grid.free_centers()[:, 0] < 0.7
    base = load(walled_grid, BeliefParams(), analytic, {}).solve()
    i = int(np.nonzero(left)[0][3])
    field = load(walled_grid, BeliefParams(), analytic, {i: 5.0}).solve()
    assert np.max(np.abs(field.mu[~left] - base.mu[~left])) < 1e-12
    assert np.max(np.abs(field.sigma[~left] - base.sigma[~left])) < 1e-12
    assert np.max(np.abs(field.mu[left] - base.mu[left])) > 0.1


def _field(mu, sigma):
    grid = GridMap.build(len(mu), 1, S)
    z = np.zeros(len(mu))
    return BeliefField(grid, np.asarray(mu, float), np.zeros(len(mu)), z, np.asarray(sigma, float), z)


def test_log_likelihood_standard_normal():
    f = _field([0.0], [1.0])
    assert f.log_likelihood_of(LightField(f.grid, np.zeros((1, 1)))) == pytest.approx(-0.5 * math.log(2 * math.pi))
    assert f.log_likelihood_of(LightField(f.grid, np.zeros((1, 1)))) == pytest.approx(-0.9189, abs=1e-4)


def test_log_likelihood_maximal_at_mean():
    mu, sigma = np.array([0.2, 1.0, 3.0]), np.array([0.5, 0.1, 2.0])
    f = _field(mu, sigma)
    top = f.log_likelihood_of(LightField(f.grid, mu[None, :]))
    assert top == pytest.approx(np.sum(-np.log(sigma * math.sqrt(2 * math.pi))))
    for k in range(3):
        for delta in (-0.3, 0.01, 2.0):
            t = mu.copy()
            t[k] += delta
            assert f.log_likelihood_of(LightField(f.grid, t[None, :])) < top


def test_log_likelihood_needs_positive_sigma():
    f = _field([0.0], [0.0])
    with pytest.raises(BeliefError):
        f.log_likelihood_of(LightField(f.grid, np.zeros((1, 1))))


def test_csv_and_json_dumps(tmp_path, small_grid):
    fg = load(small_grid, BeliefParams(), np.ones(small_grid.num_free), {0: 1.2})
    fg.solve().to_csv(tmp_path / "b.csv")
    fg.dump_json(tmp_path / "g.json")
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "row,col,mu_s,sigma_s,mu_u,sigma_u,mu,sigma"
    assert '"additive_measurement"' in (tmp_path / "g.json").read_text()

"""Residual Gaussian-process baseline.

Models ``y - analytic(x)`` with a squared-exponential kernel on cell centres.
The kernel only sees Euclidean distance, so it correlates cells on opposite
sides of a wall; that is the weakness the factor graph addresses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .belief import BeliefError, BeliefField
from .environment import Measurement
from .grid import GridMap
from .lighting import LightField


@dataclass(frozen=True)
class GPParams:
    """Fixed hyperparameters: length-scale in metres, signal and noise standard deviations."""

    length_scale: float = 0.7
    sigma_f: float = 0.2
    sigma_n: float = 0.02

    @classmethod
    def for_grid(cls, spacing: float, P: float = 1.0, sigma_meas: float | None = None) -> "GPParams":
        return cls(2 * spacing, 0.2 * P, 0.02 * P if sigma_meas is None else sigma_meas)


def se_kernel(a: np.ndarray, b: np.ndarray, params: GPParams) -> np.ndarray:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return params.sigma_f**2 * np.exp(-d2 / (2 * params.length_scale**2))


@dataclass(frozen=True, eq=False)
class ResidualGP:
    inputs: np.ndarray  # (n, 2) metres
    targets: np.ndarray  # (n,) residuals
    params: GPParams
    _chol: tuple | None = None
    _alpha: np.ndarray | None = None

    def predict(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and latent variance of the residual at ``points``."""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        prior_var = np.full(len(points), self.params.sigma_f**2)
        if len(self.inputs) == 0:
            return np.zeros(len(points)), prior_var
        Ks = se_kernel(points, self.inputs, self.params)
        mean = Ks @ self._alpha
        v = cho_solve(self._chol, Ks.T)
        var = prior_var - np.einsum("ij,ji->i", Ks, v)
        return mean, np.maximum(var, 1e-300)


def gp_fit(
    measurements: list[Measurement],
    analytic_at_measurements: np.ndarray,
    grid: GridMap,
    params: GPParams | None = None,
) -> ResidualGP:
    """Fit the residual ``y - analytic`` at the measured cell centres."""
    params = params or GPParams.for_grid(grid.spacing)
    inputs = np.array([grid.center(m.cell) for m in measurements]).reshape(-1, 2)
    residuals = np.array([m.value for m in measurements]) - np.asarray(analytic_at_measurements, dtype=float)
    return fit_residuals(inputs, residuals, params)


def fit_residuals(inputs: np.ndarray, residuals: np.ndarray, params: GPParams) -> ResidualGP:
    """Exact GP regression (no sparsification) on residual targets."""
    X = np.asarray(inputs, dtype=float).reshape(-1, 2)
    y = np.asarray(residuals, dtype=float).reshape(-1)
    if len(X) == 0:
        return ResidualGP(X, y, params)
    K = se_kernel(X, X, params) + params.sigma_n**2 * np.eye(len(X))
    chol = cho_factor(K, lower=True)
    return ResidualGP(X, y, params, chol, cho_solve(chol, y))


def gp_predict(model: ResidualGP, analytic: LightField) -> BeliefField:
    """Belief over total intensity: analytic render plus GP residual.

    The residual mean doubles as the unknown-light estimate; its spread is carried
    entirely by the unknown component.
    """
    grid = analytic.grid
    mean, var = model.predict(grid.free_centers())
    n = grid.num_free
    return BeliefField(
        grid=grid,
        mu_s=np.array(analytic.free_values, dtype=float),
        sigma_s=np.zeros(n),
        mu_u=mean,
        sigma_u=np.sqrt(var),
        cov_su=np.zeros(n),
    )


class ResidualGPBelief:
    """Episode-level wrapper with the same mutation interface as the factor graph.

    Residual targets are frozen against whichever analytic field was current when
    the measurement was taken.
    """

    def __init__(self, grid: GridMap, params: GPParams | None = None):
        self.grid = grid
        self.params = params or GPParams.for_grid(grid.spacing)
        self._analytic: LightField | None = None
        self._inputs: list[np.ndarray] = []
        self._residuals: list[float] = []
        self._last: BeliefField | None = None

    def rebuild_priors(self, analytic: LightField) -> None:
        self._analytic = analytic

    def add_measurement(self, m: Measurement) -> None:
        if self._analytic is None:
            raise BeliefError("rebuild_priors() before adding measurements")
        if not self.grid.is_free(tuple(m.cell)):
            raise BeliefError(f"cell {m.cell} is not a free cell")
        self._inputs.append(self.grid.center(m.cell))
        self._residuals.append(m.value - self._analytic.at(m.cell))

    def on_reconfigure(self, new_analytic: LightField) -> None:
        self._analytic = new_analytic

    def fit(self) -> ResidualGP:
        return fit_residuals(np.array(self._inputs).reshape(-1, 2), np.array(self._residuals), self.params)

    def solve(self) -> BeliefField:
        if self._analytic is None:
            raise BeliefError("rebuild_priors() before solving")
        self._last = gp_predict(self.fit(), self._analytic)
        return self._last

    @property
    def current(self) -> BeliefField | None:
        return self._last

    def log_likelihood_of(self, target: LightField) -> float:
        if self._last is None:
            raise BeliefError("solve() before asking for a likelihood")
        return self._last.log_likelihood_of(target)

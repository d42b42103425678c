"""Factor-graph belief over per-cell light intensity.

Every free cell carries two Gaussian variables: ``v_s``, the light from the
configured emitters, and ``v_u``, unknown light plus everything the analytical
model misses.  Factors:

* analytic prior on ``v_s`` from the single-reflection render,
* weak zero-mean prior on ``v_u`` (keeps the system positive definite),
* link factors between 4-neighbours with a clear line of sight, on both lattices,
* additive measurement factors ``v_s + v_u = y``,
* previous-configuration factors carrying ``v_u`` information across reconfigurations.

All factors are linear-Gaussian, so the MAP estimate is one sparse weighted
least-squares solve and the marginals come from the same factorisation.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .environment import Measurement
from .grid import GridMap
from .lighting import LightField

log = logging.getLogger(__name__)

_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


class BeliefError(RuntimeError):
    """Model misuse or a singular information matrix."""


@dataclass(frozen=True)
class BeliefParams:
    """Noise model.  Defaults are for ``P = 1``; use :meth:`for_power` to rescale.

    ``link_mode="residual"`` links the deviation of each lattice from its prior
    mean (analytic render for ``v_s``, zero for ``v_u``); ``"plain"`` links raw
    values.  ``previous_factor="joint"`` keeps the exact Gaussian message of a
    finished epoch on the unknown lattice; ``"marginal"`` keeps only each
    variable's posterior mean and variance.
    """

    sigma_analytic: float = 0.1
    sigma_meas: float = 0.02
    sigma_link: float = 0.05
    sigma_weak: float = 10.0
    link_mode: str = "residual"
    previous_factor: str = "joint"

    def __post_init__(self):
        for name in ("sigma_analytic", "sigma_meas", "sigma_link", "sigma_weak"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.link_mode not in ("residual", "plain"):
            raise ValueError(f"unknown link_mode {self.link_mode!r}")
        if self.previous_factor not in ("joint", "marginal"):
            raise ValueError(f"unknown previous_factor {self.previous_factor!r}")

    @classmethod
    def for_power(cls, P: float, **overrides) -> "BeliefParams":
        base = cls()
        scaled = replace(
            base,
            sigma_analytic=base.sigma_analytic * P,
            sigma_meas=base.sigma_meas * P,
            sigma_link=base.sigma_link * P,
            sigma_weak=base.sigma_weak * P,
        )
        return replace(scaled, **overrides)


@dataclass(frozen=True, eq=False)
class BeliefField:
    """Per-free-cell Gaussian summary; arrays follow ``grid.free_cells`` order.

    Means are raw (possibly negative); the ``*_field`` accessors clamp at 0.
    """

    grid: GridMap
    mu_s: np.ndarray
    sigma_s: np.ndarray
    mu_u: np.ndarray
    sigma_u: np.ndarray
    cov_su: np.ndarray

    @property
    def mu(self) -> np.ndarray:
        return self.mu_s + self.mu_u

    @property
    def sigma(self) -> np.ndarray:
        var = self.sigma_s**2 + self.sigma_u**2 + 2 * self.cov_su
        return np.sqrt(np.maximum(var, 0.0))

    def mean_field(self) -> LightField:
        return LightField.from_free(self.grid, np.maximum(self.mu, 0.0))

    def unknown_field(self) -> LightField:
        return LightField.from_free(self.grid, np.maximum(self.mu_u, 0.0))

    def sigma_field(self) -> LightField:
        return LightField.from_free(self.grid, self.sigma)

    def log_likelihood_of(self, target: LightField) -> float:
        """Sum over free cells of ``log N(target | mu, sigma)``, treating cells as independent."""
        sigma = self.sigma
        if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
            raise BeliefError("log-likelihood needs strictly positive standard deviations")
        z = (target.free_values - self.mu) / sigma
        return float(np.sum(-0.5 * z**2 - np.log(sigma) - _LOG_SQRT_2PI))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "mu_s", "sigma_s", "mu_u", "sigma_u", "mu", "sigma"])
            for k, (r, c) in enumerate(self.grid.free_cells):
                w.writerow(
                    [r, c]
                    + [repr(float(v[k])) for v in (self.mu_s, self.sigma_s, self.mu_u, self.sigma_u, self.mu, self.sigma)]
                )


def _s(i):
    return 2 * i


def _u(i):
    return 2 * i + 1


class FactorGraphBelief:
    """Mutable factor graph for one episode.  Mutations are single-writer; :meth:`solve`
    returns an immutable :class:`BeliefField` snapshot."""

    def __init__(self, grid: GridMap, params: BeliefParams | None = None):
        self.grid = grid
        self.params = params or BeliefParams()
        self.n = grid.num_free
        self._index = grid.free_index()
        self._links = [(a, b, self.params.sigma_link * dist / grid.spacing) for a, b, dist in grid.links()]
        self._analytic = np.zeros(self.n)
        self._measurements: dict[int, float] = {}
        self._measured_ever: set[int] = set()
        self._prev_joint: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self._prev_marginal: dict[int, tuple[float, float]] = {}
        self._last: BeliefField | None = None
        self._fresh = False  # a solve happened after the latest mutation

    # -- mutation ---------------------------------------------------------------

    def rebuild_priors(self, analytic: LightField) -> None:
        self._analytic = np.array(analytic.free_values, dtype=float)
        self._fresh = False

    def _cell_index(self, cell) -> int:
        r, c = cell
        if not self.grid.is_free((r, c)):
            raise BeliefError(f"cell {cell} is not a free cell")
        return int(self._index[r, c])

    def add_measurement(self, m: Measurement) -> None:
        i = self._cell_index(m.cell)
        if i in self._measurements:
            log.debug("replacing measurement at %s in the current epoch", m.cell)
        self._measurements[i] = float(m.value)
        self._measured_ever.add(i)
        self._fresh = False

    def on_reconfigure(self, new_analytic: LightField) -> None:
        """Fold this epoch's measurements into previous-configuration factors and
        switch the analytic prior to the new configuration."""
        if not self._fresh or self._last is None:
            raise BeliefError("on_reconfigure requires a solve after the latest measurement")
        if self.params.previous_factor == "joint":
            if self._measurements:
                self._prev_joint.append(self._epoch_message())
        else:
            last = self._last
            for i in self._measured_ever:
                self._prev_marginal[i] = (float(last.mu_u[i]), float(last.sigma_u[i] ** 2))
        self._measurements.clear()
        self.rebuild_priors(new_analytic)

    # -- assembly ------------------------------------------------------------------

    def _link_means(self, lattice: str) -> np.ndarray:
        if self.params.link_mode == "plain" or lattice == "u":
            return np.zeros(self.n)
        return self._analytic

    def _assemble(self) -> tuple[sp.csc_matrix, np.ndarray]:
        p = self.params
        n2 = 2 * self.n
        rows: list[np.ndarray] = []
        cols: list[np.ndarray] = []
        vals: list[np.ndarray] = []
        eta = np.zeros(n2)
        idx = np.arange(self.n)

        def add(r, c, v):
            rows.append(np.atleast_1d(r))
            cols.append(np.atleast_1d(c))
            vals.append(np.broadcast_to(np.asarray(v, dtype=float), np.atleast_1d(r).shape))

        wa = 1 / p.sigma_analytic**2
        add(_s(idx), _s(idx), wa)
        eta[_s(idx)] += wa * self._analytic

        weak = np.ones(self.n, dtype=bool)
        if p.previous_factor == "marginal":
            for i, (mean, var) in self._prev_marginal.items():
                weak[i] = False
                add(_u(i), _u(i), 1 / var)
                eta[_u(i)] += mean / var
        ww = 1 / p.sigma_weak**2
        add(_u(idx[weak]), _u(idx[weak]), ww)

        if self._links:
            la = np.array([l[0] for l in self._links])
            lb = np.array([l[1] for l in self._links])
            lw = 1 / np.array([l[2] for l in self._links]) ** 2
            for lattice, var in (("s", _s), ("u", _u)):
                m = self._link_means(lattice)
                a, b = var(la), var(lb)
                add(a, a, lw)
                add(b, b, lw)
                add(a, b, -lw)
                add(b, a, -lw)
                diff = lw * (m[la] - m[lb])
                np.add.at(eta, a, diff)
                np.add.at(eta, b, -diff)

        if self._measurements:
            mi = np.array(list(self._measurements))
            y = np.array([self._measurements[i] for i in mi])
            wm = 1 / p.sigma_meas**2
            for r in (_s(mi), _u(mi)):
                for c in (_s(mi), _u(mi)):
                    add(r, c, wm)
                eta[r] += wm * y

        for cells, lam, eta_msg in self._prev_joint:
            uc = _u(cells)
            rr, cc = np.meshgrid(uc, uc, indexing="ij")
            add(rr.ravel(), cc.ravel(), lam.ravel())
            eta[uc] += eta_msg

        H = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n2, n2)
        ).tocsc()
        return H, eta

    def _epoch_message(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Exact Gaussian message on the measured ``v_u`` after eliminating this epoch's ``v_s``."""
        p = self.params
        n = self.n
        wa = 1 / p.sigma_analytic**2
        wm = 1 / p.sigma_meas**2
        cells = np.array(sorted(self._measurements))
        y = np.array([self._measurements[i] for i in cells])

        diag = np.full(n, wa)
        diag[cells] += wm
        eta_s = wa * self._analytic
        eta_s[cells] += wm * y
        rows, cols, vals = [np.arange(n)], [np.arange(n)], [diag]
        if self._links:
            la = np.array([l[0] for l in self._links])
            lb = np.array([l[1] for l in self._links])
            lw = 1 / np.array([l[2] for l in self._links]) ** 2
            rows += [la, lb, la, lb]
            cols += [la, lb, lb, la]
            vals += [lw, lw, -lw, -lw]
            m = self._link_means("s")
            diff = lw * (m[la] - m[lb])
            np.add.at(eta_s, la, diff)
            np.add.at(eta_s, lb, -diff)
        Hss = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsc()
        lu = _factorize(Hss)
        E = np.zeros((n, len(cells)))
        E[cells, np.arange(len(cells))] = 1.0
        Z = lu.solve(E)[cells]
        xs = lu.solve(eta_s)[cells]
        lam = wm * np.eye(len(cells)) - wm**2 * Z
        lam = 0.5 * (lam + lam.T)
        eta_msg = wm * y - wm * xs
        return cells, lam, eta_msg

    # -- inference ----------------------------------------------------------------

    def solve(self) -> BeliefField:
        """MAP estimate and per-cell marginals.

        Raises
        ------
        BeliefError
            If the information matrix is not positive definite.
        """
        if self.n == 0:
            raise BeliefError("graph has no variables")
        H, eta = self._assemble()
        lu = _factorize(H)
        x = lu.solve(eta)
        # Marginal blocks by back-substitution against unit columns.
        cov = lu.solve(np.eye(2 * self.n))
        i = np.arange(self.n)
        var_s = cov[_s(i), _s(i)]
        var_u = cov[_u(i), _u(i)]
        if np.any(var_s <= 0) or np.any(var_u <= 0):
            raise BeliefError("non-positive marginal variance")
        field = BeliefField(
            grid=self.grid,
            mu_s=x[_s(i)],
            sigma_s=np.sqrt(var_s),
            mu_u=x[_u(i)],
            sigma_u=np.sqrt(var_u),
            cov_su=cov[_s(i), _u(i)],
        )
        self._last = field
        self._fresh = True
        return field

    @property
    def current(self) -> BeliefField | None:
        return self._last

    def log_likelihood_of(self, target: LightField) -> float:
        if self._last is None:
            raise BeliefError("solve() before asking for a likelihood")
        return self._last.log_likelihood_of(target)

    # -- diagnostics ----------------------------------------------------------------

    def factors(self) -> list[dict]:
        """Flat description of every factor, for debugging dumps."""
        p = self.params
        out = []
        cells = self.grid.free_cells
        for i in range(self.n):
            out.append({"type": "analytic_prior", "vars": [f"s{i}"], "mean": float(self._analytic[i]), "sigma": p.sigma_analytic})
            if p.previous_factor == "marginal" and i in self._prev_marginal:
                mean, var = self._prev_marginal[i]
                out.append({"type": "previous_config", "vars": [f"u{i}"], "mean": mean, "sigma": float(np.sqrt(var))})
            else:
                out.append({"type": "weak_prior", "vars": [f"u{i}"], "mean": 0.0, "sigma": p.sigma_weak})
        for a, b, sigma in self._links:
            for lattice in ("s", "u"):
                m = self._link_means(lattice)
                out.append({"type": "link", "vars": [f"{lattice}{a}", f"{lattice}{b}"], "offset": float(m[a] - m[b]), "sigma": sigma})
        for i, y in self._measurements.items():
            out.append({"type": "additive_measurement", "vars": [f"s{i}", f"u{i}"], "value": y, "sigma": p.sigma_meas})
        for k, (cm, lam, eta_msg) in enumerate(self._prev_joint):
            out.append({
                "type": "previous_config",
                "epoch": k,
                "vars": [f"u{i}" for i in cm],
                "information": lam.tolist(),
                "information_vector": eta_msg.tolist(),
            })
        return [dict(f, cells=[list(cells[int(v[1:])]) for v in f["vars"]]) for f in out]

    def dump_json(self, path: str | Path) -> None:
        doc = {
            "schema_version": 1,
            "params": self.params.__dict__,
            "variables": {"count": 2 * self.n, "cells": [list(c) for c in self.grid.free_cells]},
            "factors": self.factors(),
        }
        Path(path).write_text(json.dumps(doc, indent=1))


def _factorize(H: sp.csc_matrix):
    """Sparse LU with diagonal pivoting; positive pivots certify positive definiteness."""
    lu = spla.splu(H, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    if np.any(lu.U.diagonal() <= 0):
        raise BeliefError("information matrix is not positive definite (missing weak prior?)")
    return lu

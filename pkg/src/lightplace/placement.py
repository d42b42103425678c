"""Emitter placement: minimise the L1 gap between desired and predicted light.

The prediction is ``unknown_estimate + L_s(config)`` with ``L_s`` from the
single-reflection analytical model.  Constraints (emitters inside the workspace,
outside obstacles, brightness in [0, 1]) are handled by clamping brightness,
penalising position violations, and projecting the final answer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .grid import GridMap
from .lighting import ROBOT_REFLECTIONS, EmitterConfig, LightField, LightingParams, render_unit_fields

log = logging.getLogger(__name__)

_PROJECT_MARGIN = 1e-3


class SourceModel(Protocol):
    def unit_fields(self, positions: np.ndarray) -> np.ndarray:
        """Free-cell intensity of a brightness-1 emitter at each feasible position, ``(N, n_free)``."""


class ExactSourceModel:
    """Ray-marches every candidate position."""

    def __init__(self, grid: GridMap, params: LightingParams):
        self.grid = grid
        self.params = params

    def unit_fields(self, positions: np.ndarray) -> np.ndarray:
        return render_unit_fields(positions, self.grid.obstacles, self.grid, self.params)


_LATTICE_CACHE: dict[tuple, np.ndarray] = {}


class InterpolatedSourceModel:
    """Bilinear interpolation of unit fields pre-rendered on a half-cell lattice.

    Lattice nodes cover the workspace at ``spacing / subdivisions``; nodes inside
    obstacles are rendered at their projection onto the nearest face.  Nodes at
    cell centres are exact renders.  Lattices are cached per grid and params.
    """

    def __init__(self, grid: GridMap, params: LightingParams, subdivisions: int = 2):
        self.grid = grid
        self.params = params
        self.h = grid.spacing / subdivisions
        self.nx = grid.width_cells * subdivisions + 1
        self.ny = grid.height_cells * subdivisions + 1
        key = (repr(grid.to_dict()), params, subdivisions)
        if key not in _LATTICE_CACHE:
            if len(_LATTICE_CACHE) >= 8:
                _LATTICE_CACHE.pop(next(iter(_LATTICE_CACHE)))
            lo, _ = grid.workspace
            xs = lo[0] + self.h * np.arange(self.nx)
            ys = lo[1] + self.h * np.arange(self.ny)
            nodes = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
            nodes = grid.project_feasible(nodes, _PROJECT_MARGIN)
            fields = render_unit_fields(nodes, grid.obstacles, grid, params)
            _LATTICE_CACHE[key] = fields.reshape(self.nx, self.ny, -1)
        self.table = _LATTICE_CACHE[key]

    def unit_fields(self, positions: np.ndarray) -> np.ndarray:
        lo, _ = self.grid.workspace
        f = (np.asarray(positions, dtype=float).reshape(-1, 2) - lo) / self.h
        fx = np.clip(f[:, 0], 0, self.nx - 1)
        fy = np.clip(f[:, 1], 0, self.ny - 1)
        i = np.minimum(np.floor(fx).astype(int), self.nx - 2)
        j = np.minimum(np.floor(fy).astype(int), self.ny - 2)
        tx = (fx - i)[:, None]
        ty = (fy - j)[:, None]
        T = self.table
        return (
            (1 - tx) * (1 - ty) * T[i, j]
            + tx * (1 - ty) * T[i + 1, j]
            + (1 - tx) * ty * T[i, j + 1]
            + tx * ty * T[i + 1, j + 1]
        )


@dataclass
class PlacementProblem:
    desired: LightField
    unknown_estimate: LightField
    grid: GridMap
    n_emitters: int
    brightness_mode: str = "optimize"
    params: LightingParams = field(default_factory=lambda: LightingParams(max_reflections=ROBOT_REFLECTIONS))
    penalty_weight: float | None = None
    source_model: SourceModel | None = None

    def __post_init__(self):
        if self.n_emitters < 1:
            raise ValueError("need at least one emitter")
        if self.brightness_mode not in ("optimize", "fixed"):
            raise ValueError(f"unknown brightness_mode {self.brightness_mode!r}")
        if self.desired.grid.shape != self.grid.shape or self.unknown_estimate.grid.shape != self.grid.shape:
            raise ValueError("fields must share the problem grid")
        if self.penalty_weight is None:
            self.penalty_weight = 1e3 * self.params.P * self.grid.num_free
        if self.source_model is None:
            self.source_model = ExactSourceModel(self.grid, self.params)
        self._target = self.desired.free_values - np.maximum(self.unknown_estimate.free_values, 0.0)

    def violation(self, positions: np.ndarray) -> np.ndarray:
        """Per-emitter penetration depth into obstacles plus distance outside the workspace."""
        positions = np.asarray(positions, dtype=float).reshape(-1, 2)
        depth = np.zeros(len(positions))
        if len(self.grid.obstacles):
            depth = np.maximum(0.0, -self.grid.obstacles.sdf(positions))
        return depth + self.grid.outside_distance(positions)

    def predicted(self, config: EmitterConfig) -> np.ndarray:
        b = np.clip(config.brightness, 0.0, 1.0)
        pos = self.grid.project_feasible(config.positions, _PROJECT_MARGIN)
        return b @ self.source_model.unit_fields(pos)

    def objective(self, config: EmitterConfig) -> float:
        err = np.abs(self._target - self.predicted(config)).sum()
        # Clamping alone leaves the objective flat past the bounds, which stalls the simplex.
        b = config.brightness
        excess = np.maximum(0.0, -b) + np.maximum(0.0, b - 1.0)
        return float(err + self.penalty_weight * (self.violation(config.positions).sum() + excess.sum()))


def placement_objective(candidate: EmitterConfig, problem: PlacementProblem) -> float:
    """``sum |L_d - (mu_u + L_s(candidate))|`` over free cells plus constraint penalties."""
    if len(candidate) != problem.n_emitters:
        raise ValueError(f"expected {problem.n_emitters} emitters, got {len(candidate)}")
    return problem.objective(candidate)


# ---------------------------------------------------------------------------
# Nelder-Mead
# ---------------------------------------------------------------------------


class _Budget(Exception):
    pass


@dataclass
class NMResult:
    x: np.ndarray
    fun: float
    evaluations: int
    converged: bool


def nelder_mead(
    fun: Callable[[np.ndarray], float],
    x0: np.ndarray,
    steps: np.ndarray | float,
    max_evals: int,
    tol: float = 1e-4,
    reflect: float = 1.0,
    expand: float = 2.0,
    contract: float = 0.5,
    shrink: float = 0.5,
) -> NMResult:
    """Downhill simplex from ``x0`` with an axis-aligned initial simplex of size ``steps``.

    Stops when the budget is spent or every vertex lies within ``tol`` (max-norm)
    of the best one.  Returns the best point ever evaluated.
    """
    x0 = np.asarray(x0, dtype=float)
    n = len(x0)
    steps = np.broadcast_to(np.asarray(steps, dtype=float), (n,))
    best = {"x": x0.copy(), "f": np.inf}
    count = [0]

    def f(x):
        if count[0] >= max_evals:
            raise _Budget
        count[0] += 1
        val = float(fun(x))
        if val < best["f"]:
            best["x"], best["f"] = x.copy(), val
        return val

    converged = False
    try:
        sim = np.vstack([x0] + [x0 + steps[i] * np.eye(n)[i] for i in range(n)])
        fs = np.array([f(v) for v in sim])
        while True:
            order = np.argsort(fs, kind="stable")
            sim, fs = sim[order], fs[order]
            if np.max(np.abs(sim[1:] - sim[0])) < tol:
                converged = True
                break
            centroid = sim[:-1].mean(axis=0)
            xr = centroid + reflect * (centroid - sim[-1])
            fr = f(xr)
            if fr < fs[0]:
                xe = centroid + expand * (xr - centroid)
                fe = f(xe)
                sim[-1], fs[-1] = (xe, fe) if fe < fr else (xr, fr)
            elif fr < fs[-2]:
                sim[-1], fs[-1] = xr, fr
            else:
                if fr < fs[-1]:
                    xc = centroid + contract * (xr - centroid)
                    fc = f(xc)
                    accept = fc <= fr
                else:
                    xc = centroid + contract * (sim[-1] - centroid)
                    fc = f(xc)
                    accept = fc < fs[-1]
                if accept:
                    sim[-1], fs[-1] = xc, fc
                else:
                    for k in range(1, n + 1):
                        sim[k] = sim[0] + shrink * (sim[k] - sim[0])
                        fs[k] = f(sim[k])
    except _Budget:
        pass
    return NMResult(best["x"], best["f"], count[0], converged)


# ---------------------------------------------------------------------------
# Placement search
# ---------------------------------------------------------------------------


@dataclass
class PlacementResult:
    config: EmitterConfig
    objective: float
    initial_objective: float
    evaluations: int
    feasible: bool
    warning: str | None = None


def random_feasible_config(grid: GridMap, n: int, rng: np.random.Generator, brightness: np.ndarray | None = None) -> EmitterConfig:
    lo, hi = grid.workspace
    pts = []
    while len(pts) < n:
        p = rng.uniform(lo, hi)
        if not len(grid.obstacles) or grid.obstacles.sdf(p) > _PROJECT_MARGIN:
            pts.append(p)
    b = rng.uniform(0, 1, n) if brightness is None else brightness
    return EmitterConfig(np.array(pts), b)


def optimize_placement(
    problem: PlacementProblem,
    init: EmitterConfig,
    budget: int | None = None,
    seed: int = 0,
    restarts: int = 1,
    tol: float = 1e-4,
) -> PlacementResult:
    """Nelder-Mead over all emitters jointly, from ``init`` and ``restarts`` random feasible starts.

    ``budget`` is the evaluation allowance per start (default ``150 * N``).  The
    result never scores worse than ``init``.
    """
    n = problem.n_emitters
    if len(init) != n:
        raise ValueError(f"expected {n} emitters, got {len(init)}")
    fixed = problem.brightness_mode == "fixed"
    dim = 2 * n if fixed else 3 * n
    budget = 150 * n if budget is None else int(budget)
    if budget < dim + 1:
        raise ValueError(f"budget must be at least {dim + 1}")
    fixed_b = np.clip(init.brightness, 0, 1)
    spacing = problem.grid.spacing

    def decode(x: np.ndarray) -> EmitterConfig:
        return EmitterConfig.from_vector(x, fixed_b) if fixed else EmitterConfig.from_vector(x)

    def fun(x: np.ndarray) -> float:
        return problem.objective(decode(x))

    steps = np.full(dim, 0.5 * spacing)
    if not fixed:
        steps[2::3] = 0.1

    f_init = fun(init.to_vector(not fixed))
    best_x, best_f, total = init.to_vector(not fixed), f_init, 1
    rng = np.random.default_rng(seed)
    starts = [init] + [
        random_feasible_config(problem.grid, n, rng, fixed_b if fixed else None) for _ in range(restarts)
    ]
    for start in starts:
        res = nelder_mead(fun, start.to_vector(not fixed), steps, budget, tol)
        total += res.evaluations
        if res.fun < best_f:
            best_x, best_f = res.x, res.fun

    config = decode(best_x)
    raw_violation = problem.violation(config.positions).sum()
    config = EmitterConfig(
        problem.grid.project_feasible(config.positions, _PROJECT_MARGIN), np.clip(config.brightness, 0, 1)
    )
    final_f = problem.objective(config)
    feasible = raw_violation == 0
    warning = None
    if not feasible:
        warning = "best configuration violated constraints and was projected"
        log.warning(warning)
    if final_f > f_init:
        config, final_f = EmitterConfig(init.positions, np.clip(init.brightness, 0, 1)), problem.objective(init)
    return PlacementResult(config, final_f, f_init, total, feasible, warning)

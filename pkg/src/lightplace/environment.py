"""Scenario generation and the ground-truth light sensor.

A scenario is a pure function of ``(env_seed, start_seed, level)``.  The
environment seed fixes obstacles, unknown emitters, target emitters (and thus
the desired field) and the initial configured emitters; the start seed only
picks the robot's first cell.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .grid import Cell, GeometryError, GridMap, ObstacleSet, Rect
from .lighting import (
    TRUTH_REFLECTIONS,
    EmitterConfig,
    LightField,
    LightingParams,
    render_field,
)

SCHEMA_VERSION = 1

# (obstacles, unknown emitters, target emitters, configured emitters)
LEVEL_COUNTS: dict[str, tuple[int, int, int, int]] = {
    "A": (8, 40, 7, 10),
    "B": (12, 60, 9, 15),
    "C": (16, 70, 12, 20),
}


class ScenarioError(RuntimeError):
    """Rejection sampling ran out of attempts."""


@dataclass(frozen=True)
class ScenarioParams:
    """Knobs for scenario generation.  None of these are fixed by the experiments being reproduced."""

    width_cells: int = 13
    height_cells: int = 13
    spacing: float = 0.35
    obstacle_side_cells: tuple[int, ...] = (1, 2, 3)
    obstacle_max_area_cells: int = 4
    reflectivity_range: tuple[float, float] = (0.3, 0.9)
    min_free_fraction: float = 0.6
    target_brightness_range: tuple[float, float] = (0.5, 1.0)
    unknown_brightness: float = 0.5
    unknown_power_scale: float = 0.05
    initial_brightness: float = 0.5
    max_steps: int = 100
    max_attempts: int = 2000
    lighting: LightingParams = LightingParams(max_reflections=TRUTH_REFLECTIONS)

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["obstacle_side_cells"] = list(self.obstacle_side_cells)
        d["reflectivity_range"] = list(self.reflectivity_range)
        d["target_brightness_range"] = list(self.target_brightness_range)
        d["lighting"] = self.lighting.__dict__.copy()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioParams":
        d = dict(d)
        d["obstacle_side_cells"] = tuple(d["obstacle_side_cells"])
        d["reflectivity_range"] = tuple(d["reflectivity_range"])
        d["target_brightness_range"] = tuple(d["target_brightness_range"])
        d["lighting"] = LightingParams(**d["lighting"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Scenario:
    env_seed: int
    start_seed: int
    level: str
    counts: tuple[int, int, int, int]
    grid: GridMap
    desired_field: LightField
    target_emitters: EmitterConfig
    unknown_emitters: EmitterConfig
    unknown_field: LightField
    initial_config: EmitterConfig
    start_cell: Cell
    max_steps: int
    params: ScenarioParams = field(repr=False)

    @property
    def obstacles(self) -> ObstacleSet:
        return self.grid.obstacles

    @property
    def num_configured(self) -> int:
        return self.counts[3]

    def with_start_seed(self, start_seed: int) -> "Scenario":
        return replace(self, start_seed=start_seed, start_cell=_sample_start(self.grid, self.env_seed, start_seed))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "env_seed": self.env_seed,
            "start_seed": self.start_seed,
            "level": self.level,
            "counts": list(self.counts),
            "grid": self.grid.to_dict(),
            "desired_field": self.desired_field.values.tolist(),
            "target_emitters": self.target_emitters.to_dict(),
            "unknown_emitters": self.unknown_emitters.to_dict(),
            "unknown_field": self.unknown_field.values.tolist(),
            "initial_config": self.initial_config.to_dict(),
            "start_cell": list(self.start_cell),
            "max_steps": self.max_steps,
            "params": self.params.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported scenario schema version {d.get('schema_version')}")
        grid = GridMap.from_dict(d["grid"])
        return cls(
            env_seed=d["env_seed"],
            start_seed=d["start_seed"],
            level=d["level"],
            counts=tuple(d["counts"]),
            grid=grid,
            desired_field=LightField(grid, np.array(d["desired_field"])),
            target_emitters=EmitterConfig.from_dict(d["target_emitters"]),
            unknown_emitters=EmitterConfig.from_dict(d["unknown_emitters"]),
            unknown_field=LightField(grid, np.array(d["unknown_field"])),
            initial_config=EmitterConfig.from_dict(d["initial_config"]),
            start_cell=tuple(d["start_cell"]),
            max_steps=d["max_steps"],
            params=ScenarioParams.from_dict(d["params"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_json(Path(path).read_text())


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


# Stream tags keep the env-seeded draws independent of one another.
_OBSTACLE_STREAM, _LIGHT_STREAM, _START_STREAM = 11, 23, 37


def _sample_obstacles(rng: np.random.Generator, count: int, params: ScenarioParams) -> GridMap:
    W, H, s = params.width_cells, params.height_cells, params.spacing
    shapes = [
        (w, h)
        for w in params.obstacle_side_cells
        for h in params.obstacle_side_cells
        if w * h <= params.obstacle_max_area_cells
    ]
    for _ in range(params.max_attempts):
        occupied = np.zeros((H, W), dtype=bool)
        rects: list[Rect] = []
        for _ in range(count):
            for _ in range(100):
                w, h = shapes[rng.integers(len(shapes))]
                c0 = int(rng.integers(0, W - w + 1))
                r0 = int(rng.integers(0, H - h + 1))
                if not occupied[r0 : r0 + h, c0 : c0 + w].any():
                    break
            else:
                break
            occupied[r0 : r0 + h, c0 : c0 + w] = True
            lo, hi = params.reflectivity_range
            rects.append(Rect(c0 * s, r0 * s, (c0 + w) * s, (r0 + h) * s, float(rng.uniform(lo, hi))))
        if len(rects) < count:
            continue
        grid = GridMap.build(W, H, s, ObstacleSet(tuple(rects)))
        if grid.num_free >= params.min_free_fraction * W * H and grid.is_connected():
            return grid
    raise ScenarioError(f"could not place {count} obstacles in {params.max_attempts} attempts")


def _uniform_points(rng: np.random.Generator, n: int, grid: GridMap, avoid_obstacles: bool, margin: float = 1e-3) -> np.ndarray:
    lo, hi = grid.workspace
    pts = np.zeros((n, 2))
    for i in range(n):
        for _ in range(10_000):
            p = rng.uniform(lo, hi)
            if not avoid_obstacles or not len(grid.obstacles) or grid.obstacles.sdf(p) > margin:
                pts[i] = p
                break
        else:
            raise ScenarioError("could not sample a free emitter position")
    return pts


def _sample_start(grid: GridMap, env_seed: int, start_seed: int) -> Cell:
    cells = grid.free_cells
    return cells[int(_rng(env_seed, start_seed, _START_STREAM).integers(len(cells)))]


def generate_scenario(
    env_seed: int,
    start_seed: int,
    level: str = "A",
    params: ScenarioParams | None = None,
) -> Scenario:
    """Build the scenario for ``(env_seed, start_seed, level)``.

    Raises
    ------
    ScenarioError
        If obstacle or emitter rejection sampling exceeds ``params.max_attempts``.
    """
    if env_seed < 0 or start_seed < 0:
        raise ValueError("seeds must be non-negative")
    if level not in LEVEL_COUNTS:
        raise ValueError(f"unknown task level {level!r}")
    params = params or ScenarioParams()
    counts = LEVEL_COUNTS[level]
    n_obs, n_unknown, n_target, n_conf = counts

    grid = _sample_obstacles(_rng(env_seed, _OBSTACLE_STREAM), n_obs, params)
    rng = _rng(env_seed, _LIGHT_STREAM)
    light = params.lighting

    open_grid = grid.without_obstacles()
    lo, hi = params.target_brightness_range
    targets = EmitterConfig(_uniform_points(rng, n_target, open_grid, False), rng.uniform(lo, hi, n_target))
    desired = render_field(targets, open_grid.obstacles, open_grid, light.with_reflections(0))
    desired = LightField(grid, desired.values)

    unknown = EmitterConfig(
        _uniform_points(rng, n_unknown, grid, True), np.full(n_unknown, params.unknown_brightness)
    )
    unknown_params = replace(light, P=light.P * params.unknown_power_scale)
    unknown_field = render_field(unknown, grid.obstacles, grid, unknown_params)

    initial = EmitterConfig(_uniform_points(rng, n_conf, grid, True), np.full(n_conf, params.initial_brightness))

    return Scenario(
        env_seed=env_seed,
        start_seed=start_seed,
        level=level,
        counts=counts,
        grid=grid,
        desired_field=desired,
        target_emitters=targets,
        unknown_emitters=unknown,
        unknown_field=unknown_field,
        initial_config=initial,
        start_cell=_sample_start(grid, env_seed, start_seed),
        max_steps=params.max_steps,
        params=params,
    )


@dataclass(frozen=True)
class Measurement:
    step: int
    cell: Cell
    value: float

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("measurements are non-negative")

    def to_dict(self) -> dict:
        return {"step": self.step, "cell": list(self.cell), "value": self.value}


class Simulator:
    """Ground-truth light sensor for one scenario.

    Configured emitters are rendered with ``TRUTH_REFLECTIONS`` bounces (cached per
    configuration); the unknown field is added and Gaussian noise with standard
    deviation ``sigma_sim`` (default ``0.01 * P``) is applied before clamping at 0.
    """

    def __init__(self, scenario: Scenario, sigma_sim: float | None = None):
        self.scenario = scenario
        self.params = scenario.params.lighting
        self.sigma_sim = 0.01 * self.params.P if sigma_sim is None else float(sigma_sim)
        self._cache: dict[bytes, LightField] = {}

    def source_field(self, config: EmitterConfig) -> LightField:
        key = config.key()
        if key not in self._cache:
            if len(self._cache) > 64:
                self._cache.clear()
            sc = self.scenario
            self._cache[key] = render_field(config, sc.obstacles, sc.grid, self.params)
        return self._cache[key]

    def total_field(self, config: EmitterConfig) -> LightField:
        """Noise-free ground truth ``L = L^u + L^s``."""
        return self.source_field(config) + self.scenario.unknown_field

    def measure(self, config: EmitterConfig, cell: Cell, noise_seed: int, step: int = 0) -> Measurement:
        grid = self.scenario.grid
        if not grid.is_free(tuple(cell)):
            raise GeometryError(f"cannot measure at {cell}: not a free cell")
        value = self.total_field(config).at(cell)
        if self.sigma_sim > 0:
            value += self.sigma_sim * np.random.default_rng(noise_seed).standard_normal()
        return Measurement(step, (int(cell[0]), int(cell[1])), max(float(value), 0.0))


def measure(
    scenario: Scenario,
    config: EmitterConfig,
    cell: Cell,
    noise_seed: int,
    sigma_sim: float | None = None,
) -> Measurement:
    """One-shot sensor query; use :class:`Simulator` to reuse rendered fields."""
    return Simulator(scenario, sigma_sim).measure(config, cell, noise_seed)


def noise_seed(env_seed: int, start_seed: int, step: int) -> int:
    return int(np.random.SeedSequence([env_seed, start_seed, step, 97]).generate_state(1)[0])

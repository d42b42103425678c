"""Analytical light propagation by 2-D sphere tracing.

Each emitter casts ``rays_per_source`` rays at evenly spaced angles.  A ray is
advanced by the obstacle signed distance until it comes within ``hit_epsilon``
of a surface, where it is mirrored about the SDF gradient and attenuated by the
obstacle reflectivity.  Every straight piece of a ray (a *segment*) is walked
through the cell lattice; each free cell it crosses receives

    b * P * prod(R) / max(d, min_distance_clamp) ** 2

with ``d`` the path length from the emitter to the segment start plus the
straight distance from there to the cell centre.  Deposits are averaged per cell over the rays of one
(emitter, bounce count) class before summing classes, which keeps free-space
intensity at ``b * P / d**2`` independently of how many rays are cast.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .grid import GridMap, ObstacleSet

ROBOT_REFLECTIONS = 1
TRUTH_REFLECTIONS = 5


class RenderError(ValueError):
    """Raised when an emitter sits inside an obstacle."""


@dataclass(frozen=True, eq=False)
class EmitterConfig:
    """Positions ``(N, 2)`` in metres and brightnesses ``(N,)`` in [0, 1]."""

    positions: np.ndarray
    brightness: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).reshape(-1, 2)
        b = np.array(self.brightness, dtype=float).reshape(-1)
        if len(pos) != len(b):
            raise ValueError("positions and brightness lengths differ")
        pos.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "brightness", b)

    def __len__(self) -> int:
        return len(self.brightness)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EmitterConfig)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.brightness, other.brightness)
        )

    def key(self) -> bytes:
        return self.positions.tobytes() + self.brightness.tobytes()

    def to_vector(self, with_brightness: bool = True) -> np.ndarray:
        if with_brightness:
            return np.column_stack([self.positions, self.brightness]).ravel()
        return self.positions.ravel().copy()

    @classmethod
    def from_vector(cls, vec: np.ndarray, brightness: np.ndarray | None = None) -> "EmitterConfig":
        vec = np.asarray(vec, dtype=float)
        if brightness is None:
            arr = vec.reshape(-1, 3)
            return cls(arr[:, :2], arr[:, 2])
        return cls(vec.reshape(-1, 2), brightness)

    @classmethod
    def empty(cls) -> "EmitterConfig":
        return cls(np.zeros((0, 2)), np.zeros(0))

    def concat(self, other: "EmitterConfig") -> "EmitterConfig":
        return EmitterConfig(
            np.vstack([self.positions, other.positions]),
            np.concatenate([self.brightness, other.brightness]),
        )

    def to_dict(self) -> dict:
        return {"positions": self.positions.tolist(), "brightness": self.brightness.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "EmitterConfig":
        return cls(np.array(data["positions"], dtype=float).reshape(-1, 2), data["brightness"])


@dataclass(frozen=True)
class LightingParams:
    """Ray-marching settings.

    ``min_distance_clamp=None`` resolves to half the grid spacing at render time.
    ``P`` is the intensity of a brightness-1 emitter at unit distance.
    """

    rays_per_source: int = 360
    max_reflections: int = ROBOT_REFLECTIONS
    P: float = 1.0
    hit_epsilon: float = 1e-4
    max_path: float = 25.0
    min_distance_clamp: float | None = None
    max_march_steps: int = 400

    def __post_init__(self):
        if self.rays_per_source < 64:
            raise ValueError("rays_per_source must be >= 64")
        if self.max_reflections < 0:
            raise ValueError("max_reflections must be >= 0")
        if self.min_distance_clamp is not None and self.min_distance_clamp <= 0:
            raise ValueError("min_distance_clamp must be positive")

    def clamp_for(self, grid: GridMap) -> float:
        return self.min_distance_clamp if self.min_distance_clamp is not None else grid.spacing / 2

    def with_reflections(self, n: int) -> "LightingParams":
        return replace(self, max_reflections=n)


@dataclass(frozen=True, eq=False)
class LightField:
    """Intensity per cell on ``grid``; obstacle cells hold 0 and are ignored by metrics."""

    grid: GridMap
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ValueError(f"field shape {vals.shape} does not match grid {self.grid.shape}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_free(cls, grid: GridMap, free_values: np.ndarray) -> "LightField":
        vals = np.zeros(grid.shape)
        vals[grid.free_mask] = free_values
        return cls(grid, vals)

    @classmethod
    def zeros(cls, grid: GridMap) -> "LightField":
        return cls(grid, np.zeros(grid.shape))

    @property
    def free_values(self) -> np.ndarray:
        return self.values[self.grid.free_mask]

    def at(self, cell) -> float:
        return float(self.values[tuple(cell)])

    def __add__(self, other: "LightField") -> "LightField":
        return LightField(self.grid, self.values + other.values)

    def scaled(self, k: float) -> "LightField":
        return LightField(self.grid, self.values * k)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "col", "value"])
            for r, c in self.grid.free_cells:
                writer.writerow([r, c, repr(float(self.values[r, c]))])

    def to_pgm(self, path: str | Path) -> dict:
        """Write an 8-bit binary PGM (row 0 at the bottom of the image) plus a JSON sidecar.

        Values are min-max normalised over free cells; obstacle cells are black.
        Returns the sidecar contents.
        """
        path = Path(path)
        free = self.free_values
        vmin = float(free.min()) if free.size else 0.0
        vmax = float(free.max()) if free.size else 0.0
        span = vmax - vmin
        norm = np.zeros(self.grid.shape)
        if span > 0:
            norm = (self.values - vmin) / span
        pixels = np.where(self.grid.free_mask, np.round(np.clip(norm, 0, 1) * 255), 0).astype(np.uint8)
        pixels = pixels[::-1]
        h, w = pixels.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(pixels.tobytes())
        meta = {"min": vmin, "max": vmax, "width": w, "height": h, "spacing": self.grid.spacing}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
        return meta


# ---------------------------------------------------------------------------
# Ray marching
# ---------------------------------------------------------------------------


@dataclass
class Segments:
    """Flat arrays describing straight ray pieces."""

    start: np.ndarray  # (S, 2)
    direction: np.ndarray  # (S, 2)
    length: np.ndarray  # (S,)
    path0: np.ndarray  # path length travelled before the segment start
    gain: np.ndarray  # product of reflectivities so far
    bounce: np.ndarray  # reflections before this segment
    source: np.ndarray  # emitter index

    def __len__(self) -> int:
        return len(self.length)


def _sdf_normals(obstacles: ObstacleSet, points: np.ndarray, h: float) -> np.ndarray:
    dx = np.array([h, 0.0])
    dy = np.array([0.0, h])
    g = np.stack(
        [
            obstacles.sdf(points + dx) - obstacles.sdf(points - dx),
            obstacles.sdf(points + dy) - obstacles.sdf(points - dy),
        ],
        axis=-1,
    )
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    return np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)


def _exit_distance(pos: np.ndarray, direction: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(direction > 0, (hi - pos) / direction, np.where(direction < 0, (lo - pos) / direction, np.inf))
    return np.maximum(t.min(axis=-1), 0.0)


def trace_rays(
    origins: np.ndarray,
    directions: np.ndarray,
    sources: np.ndarray,
    obstacles: ObstacleSet,
    grid: GridMap,
    params: LightingParams,
) -> Segments:
    """Sphere-trace rays, returning the straight segments they travel."""
    lo, hi = grid.workspace
    eps = params.hit_epsilon
    refl = obstacles.reflectivities
    n = len(origins)
    pos = np.array(origins, dtype=float)
    d = np.array(directions, dtype=float)
    path = np.zeros(n)
    gain = np.ones(n)
    bounce = np.zeros(n, dtype=int)
    seg_start = pos.copy()
    seg_path = np.zeros(n)
    alive = np.arange(n)
    out: list[tuple[np.ndarray, np.ndarray]] = []  # (ray ids, segment end points)

    def close(ids: np.ndarray, ends: np.ndarray) -> None:
        out.append((ids.copy(), ends.copy(), seg_start[ids].copy(), seg_path[ids].copy(), gain[ids].copy(), bounce[ids].copy()))

    for _ in range(params.max_march_steps):
        if alive.size == 0:
            break
        p = pos[alive]
        u = d[alive]
        t_exit = _exit_distance(p, u, lo, hi)
        remaining = params.max_path - path[alive]
        if len(obstacles):
            sd, nearest = obstacles.sdf_and_index(p)
        else:
            sd = np.full(len(alive), np.inf)
            nearest = np.zeros(len(alive), dtype=int)
        step = sd.copy()

        near = sd < eps
        true_hit = np.zeros(len(alive), dtype=bool)
        if near.any():
            normals = _sdf_normals(obstacles, p[near], eps)
            approaching = np.einsum("ij,ij->i", u[near], normals) < 0
            ids_near = np.nonzero(near)[0]
            true_hit[ids_near[approaching]] = True
            # Leaving a surface: creep away without counting a hit.
            step[ids_near[~approaching]] = 2 * eps

            hit_local = ids_near[approaching]
            if hit_local.size:
                rays = alive[hit_local]
                close(rays, pos[rays])
                nrm = normals[approaching]
                r_hit = refl[nearest[hit_local]]
                stop = (bounce[rays] >= params.max_reflections) | (r_hit <= 0)
                cont = rays[~stop]
                if cont.size:
                    nc = nrm[~stop]
                    dc = d[cont]
                    d[cont] = dc - 2 * np.einsum("ij,ij->i", dc, nc)[:, None] * nc
                    gain[cont] *= r_hit[~stop]
                    bounce[cont] += 1
                    seg_start[cont] = pos[cont]
                    seg_path[cont] = path[cont]
                dead_hit = np.zeros(len(alive), dtype=bool)
                dead_hit[hit_local[stop]] = True
            else:
                dead_hit = np.zeros(len(alive), dtype=bool)
        else:
            dead_hit = np.zeros(len(alive), dtype=bool)

        moving = ~true_hit
        exits = moving & (step >= t_exit)
        capped = moving & ~exits & (step >= remaining)
        advance = moving & ~exits & ~capped

        if exits.any():
            rays = alive[exits]
            close(rays, pos[rays] + d[rays] * t_exit[exits, None])
        if capped.any():
            rays = alive[capped]
            close(rays, pos[rays] + d[rays] * remaining[capped, None])
        if advance.any():
            rays = alive[advance]
            pos[rays] += d[rays] * step[advance, None]
            path[rays] += step[advance]

        alive = alive[~(exits | capped | dead_hit)]

    if alive.size:
        close(alive, pos[alive])

    if not out:
        empty = np.zeros((0, 2))
        return Segments(empty, empty, np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0, int), np.zeros(0, int))
    ids = np.concatenate([o[0] for o in out])
    ends = np.concatenate([o[1] for o in out])
    starts = np.concatenate([o[2] for o in out])
    path0 = np.concatenate([o[3] for o in out])
    gains = np.concatenate([o[4] for o in out])
    bounces = np.concatenate([o[5] for o in out])
    vec = ends - starts
    length = np.linalg.norm(vec, axis=1)
    keep = length > 1e-12
    unit = vec[keep] / length[keep, None]
    return Segments(starts[keep], unit, length[keep], path0[keep], gains[keep], bounces[keep], np.asarray(sources)[ids[keep]])


def _traverse(seg: Segments, grid: GridMap) -> tuple[np.ndarray, np.ndarray]:
    """Grid-line (Amanatides-Woo) walk of every segment.

    Returns ``(segment_index, flat_cell_index)`` for each cell crossed with positive length.
    """
    s = grid.spacing
    ox, oy = grid.origin
    W, H = grid.width_cells, grid.height_cells
    n = len(seg)
    if n == 0:
        return np.zeros(0, int), np.zeros(0, int)
    a = seg.start
    u = seg.direction
    L = seg.length
    nudge = a + u * 1e-9
    col = np.clip(np.floor((nudge[:, 0] - ox) / s).astype(int), 0, W - 1)
    row = np.clip(np.floor((nudge[:, 1] - oy) / s).astype(int), 0, H - 1)
    step_c = np.sign(u[:, 0]).astype(int)
    step_r = np.sign(u[:, 1]).astype(int)
    with np.errstate(divide="ignore", invalid="ignore"):
        next_x = ox + (col + (step_c > 0)) * s
        next_y = oy + (row + (step_r > 0)) * s
        t_max_x = np.where(step_c != 0, (next_x - a[:, 0]) / u[:, 0], np.inf)
        t_max_y = np.where(step_r != 0, (next_y - a[:, 1]) / u[:, 1], np.inf)
        t_delta_x = np.where(step_c != 0, s / np.abs(u[:, 0]), np.inf)
        t_delta_y = np.where(step_r != 0, s / np.abs(u[:, 1]), np.inf)
    t_cur = np.zeros(n)
    active = np.arange(n)
    seg_ids: list[np.ndarray] = []
    cell_ids: list[np.ndarray] = []
    for _ in range(W + H + 2):
        if active.size == 0:
            break
        tx = t_max_x[active]
        ty = t_max_y[active]
        t_next = np.minimum(np.minimum(tx, ty), L[active])
        inside = (row[active] >= 0) & (row[active] < H) & (col[active] >= 0) & (col[active] < W)
        crossed = inside & (t_next - t_cur[active] > 1e-9)
        seg_ids.append(active[crossed])
        cell_ids.append(row[active[crossed]] * W + col[active[crossed]])
        done = (np.minimum(tx, ty) >= L[active]) | ~inside
        go = active[~done]
        tx, ty = t_max_x[go], t_max_y[go]
        move_x = tx <= ty
        move_y = ty <= tx
        t_cur[go] = np.minimum(tx, ty)
        gx, gy = go[move_x], go[move_y]
        col[gx] += step_c[gx]
        t_max_x[gx] += t_delta_x[gx]
        row[gy] += step_r[gy]
        t_max_y[gy] += t_delta_y[gy]
        active = go
    return np.concatenate(seg_ids), np.concatenate(cell_ids)


def _deposit_unit(seg: Segments, grid: GridMap, params: LightingParams, n_sources: int) -> np.ndarray:
    """Per-source unit-brightness intensity over free cells, shape ``(n_sources, n_free)``."""
    n_free = grid.num_free
    fields = np.zeros((n_sources, n_free))
    seg_ids, flat = _traverse(seg, grid)
    free_idx = grid.free_index().ravel()[flat]
    keep = free_idx >= 0
    seg_ids, free_idx = seg_ids[keep], free_idx[keep]
    if seg_ids.size == 0:
        return fields
    centers = grid.free_centers()[free_idx]
    a = seg.start[seg_ids]
    # Path to the segment start, then straight to the cell centre: exact 1/d^2 for direct
    # light, and the mirror-image distance for a ray that bounced near the cell's line of sight.
    dist = np.maximum(seg.path0[seg_ids] + np.linalg.norm(centers - a, axis=1), params.clamp_for(grid))
    value = seg.gain[seg_ids] / dist**2

    n_classes = params.max_reflections + 1
    cls = seg.source[seg_ids] * n_classes + seg.bounce[seg_ids]
    key = cls * n_free + free_idx
    size = n_sources * n_classes * n_free
    total = np.bincount(key, weights=value, minlength=size)
    count = np.bincount(key, minlength=size)
    mean = np.divide(total, count, out=np.zeros(size), where=count > 0)
    return mean.reshape(n_sources, n_classes, n_free).sum(axis=1)


def _check_emitters(positions: np.ndarray, obstacles: ObstacleSet) -> None:
    if len(obstacles) and len(positions):
        inside = obstacles.sdf(positions) < 0
        if inside.any():
            raise RenderError(f"emitter inside obstacle at {positions[inside][0].tolist()}")


def _ray_directions(n: int) -> np.ndarray:
    theta = 2 * np.pi * (np.arange(n) + 0.5) / n
    return np.column_stack([np.cos(theta), np.sin(theta)])


def render_unit_fields(
    positions: np.ndarray,
    obstacles: ObstacleSet,
    grid: GridMap,
    params: LightingParams,
    batch: int = 48,
) -> np.ndarray:
    """Free-cell intensity of each emitter at brightness 1 and scale ``P``, shape ``(N, n_free)``."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    _check_emitters(positions, obstacles)
    dirs = _ray_directions(params.rays_per_source)
    out = np.zeros((len(positions), grid.num_free))
    # Batches of emitters are independent; processing order does not affect the sums.
    for start in range(0, len(positions), batch):
        chunk = positions[start : start + batch]
        m = len(chunk)
        origins = np.repeat(chunk, params.rays_per_source, axis=0)
        ray_dirs = np.tile(dirs, (m, 1))
        sources = np.repeat(np.arange(m), params.rays_per_source)
        seg = trace_rays(origins, ray_dirs, sources, obstacles, grid, params)
        out[start : start + m] = _deposit_unit(seg, grid, params, m)
    return out * params.P


def render_field(
    emitters: EmitterConfig,
    obstacles: ObstacleSet,
    grid: GridMap,
    params: LightingParams,
) -> LightField:
    """Total intensity of ``emitters`` on ``grid``.

    Raises
    ------
    RenderError
        If any emitter lies inside an obstacle.
    """
    _check_emitters(emitters.positions, obstacles)
    lit = emitters.brightness > 0
    free = np.zeros(grid.num_free)
    if lit.any():
        unit = render_unit_fields(emitters.positions[lit], obstacles, grid, params)
        # Fixed summation order keeps the result independent of batching.
        for b, f in zip(emitters.brightness[lit], unit):
            free += b * f
    return LightField.from_free(grid, free)


def render_source_field(
    config: EmitterConfig,
    obstacles: ObstacleSet,
    grid: GridMap,
    params: LightingParams | None = None,
) -> LightField:
    """The robot's prediction of configured-emitter light (single reflection by default)."""
    params = params or LightingParams(max_reflections=ROBOT_REFLECTIONS)
    return render_field(config, obstacles, grid, params)

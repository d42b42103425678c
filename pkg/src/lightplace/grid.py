"""Grid world geometry: rectangular obstacles, their signed distance, and the cell lattice.

Coordinate convention
---------------------
World coordinates ``(x, y)`` are metres, x to the right and y up.  Cell
``(row, col)`` has its centre at ``origin + ((col + 0.5) * spacing,
(row + 0.5) * spacing)``, so row grows with y.  The workspace is the closed box
spanned by the outer cell edges.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

Cell = tuple[int, int]

# Fixed action order doubles as the planner's tie-break order.
ACTIONS: dict[str, Cell] = {
    "up": (1, 0),
    "down": (-1, 0),
    "left": (0, -1),
    "right": (0, 1),
}
ACTION_ORDER: tuple[str, ...] = tuple(ACTIONS)


class GeometryError(ValueError):
    """Raised for invalid geometry queries (cell inside an obstacle, bad rectangle)."""


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangular obstacle with a specular reflectivity in [0, 1]."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float
    reflectivity: float = 0.5

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise GeometryError(f"rectangle must have positive area: {self}")
        if not 0.0 <= self.reflectivity <= 1.0:
            raise GeometryError(f"reflectivity must lie in [0, 1]: {self.reflectivity}")

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.xmin + self.xmax) / 2, (self.ymin + self.ymax) / 2])

    @property
    def half_extent(self) -> np.ndarray:
        return np.array([(self.xmax - self.xmin) / 2, (self.ymax - self.ymin) / 2])

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Exact signed distance, negative inside.  ``points`` has shape ``(..., 2)``."""
        q = np.abs(np.asarray(points, dtype=float) - self.center) - self.half_extent
        outside = np.hypot(np.maximum(q[..., 0], 0.0), np.maximum(q[..., 1], 0.0))
        inside = np.minimum(np.maximum(q[..., 0], q[..., 1]), 0.0)
        return outside + inside

    def to_dict(self) -> dict:
        return {
            "xmin": self.xmin,
            "ymin": self.ymin,
            "xmax": self.xmax,
            "ymax": self.ymax,
            "reflectivity": self.reflectivity,
        }


@dataclass(frozen=True)
class ObstacleSet:
    """A collection of rectangles; the set SDF is the minimum over members."""

    rects: tuple[Rect, ...] = ()

    def __len__(self) -> int:
        return len(self.rects)

    def __iter__(self):
        return iter(self.rects)

    @property
    def reflectivities(self) -> np.ndarray:
        return np.array([r.reflectivity for r in self.rects], dtype=float)

    def all_sdf(self, points: np.ndarray) -> np.ndarray:
        """Per-rectangle signed distances, shape ``(len(self), ...)``."""
        points = np.asarray(points, dtype=float)
        if not self.rects:
            return np.full((0,) + points.shape[:-1], np.inf)
        return np.stack([r.sdf(points) for r in self.rects])

    def sdf(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if not self.rects:
            return np.full(points.shape[:-1], np.inf)
        return self.all_sdf(points).min(axis=0)

    def sdf_and_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Set SDF together with the index of the nearest rectangle."""
        d = self.all_sdf(points)
        idx = d.argmin(axis=0)
        return np.take_along_axis(d, idx[None], axis=0)[0], idx

    def segment_blocked(self, a: Sequence[float], b: Sequence[float]) -> bool:
        """True if the open segment ``a -> b`` passes through the interior of any obstacle."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        d = b - a
        for r in self.rects:
            t0, t1 = 0.0, 1.0
            hit = True
            for k, (lo, hi) in enumerate(((r.xmin, r.xmax), (r.ymin, r.ymax))):
                if abs(d[k]) < 1e-15:
                    if not lo < a[k] < hi:
                        hit = False
                        break
                    continue
                ta, tb = (lo - a[k]) / d[k], (hi - a[k]) / d[k]
                t0 = max(t0, min(ta, tb))
                t1 = min(t1, max(ta, tb))
            if hit and t1 - t0 > 1e-12:
                return True
        return False

    def to_list(self) -> list[dict]:
        return [r.to_dict() for r in self.rects]

    @classmethod
    def from_list(cls, items: Iterable[dict]) -> "ObstacleSet":
        return cls(tuple(Rect(**item) for item in items))


@dataclass(frozen=True, eq=False)
class GridMap:
    """Regular cell lattice over a rectangular workspace, with obstacle-aware free cells.

    Build instances with :meth:`build`; the free mask and link structure are derived
    from the obstacle set and never change afterwards.
    """

    width_cells: int
    height_cells: int
    spacing: float
    origin: tuple[float, float]
    obstacles: ObstacleSet
    free_mask: np.ndarray = field(repr=False)

    @classmethod
    def build(
        cls,
        width_cells: int = 13,
        height_cells: int = 13,
        spacing: float = 0.35,
        obstacles: ObstacleSet | None = None,
        origin: tuple[float, float] = (0.0, 0.0),
    ) -> "GridMap":
        if spacing <= 0:
            raise GeometryError("spacing must be positive")
        if width_cells < 1 or height_cells < 1:
            raise GeometryError("grid needs at least one cell")
        obstacles = obstacles or ObstacleSet()
        rows, cols = np.mgrid[0:height_cells, 0:width_cells]
        centers = np.stack(
            [origin[0] + (cols + 0.5) * spacing, origin[1] + (rows + 0.5) * spacing], axis=-1
        )
        free = obstacles.sdf(centers) > 0.0
        free.setflags(write=False)
        grid = cls(width_cells, height_cells, spacing, tuple(map(float, origin)), obstacles, free)
        lo, hi = grid.workspace
        for r in obstacles:
            if r.xmin < lo[0] - 1e-12 or r.ymin < lo[1] - 1e-12 or r.xmax > hi[0] + 1e-12 or r.ymax > hi[1] + 1e-12:
                raise GeometryError(f"obstacle outside workspace: {r}")
        return grid

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_cells, self.width_cells)

    @property
    def workspace(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array(self.origin, dtype=float)
        hi = lo + self.spacing * np.array([self.width_cells, self.height_cells], dtype=float)
        return lo, hi

    def with_obstacles(self, obstacles: ObstacleSet) -> "GridMap":
        return GridMap.build(self.width_cells, self.height_cells, self.spacing, obstacles, self.origin)

    def without_obstacles(self) -> "GridMap":
        return self.with_obstacles(ObstacleSet())

    # -- cells ---------------------------------------------------------------

    @property
    def free_cells(self) -> list[Cell]:
        return [(int(r), int(c)) for r, c in zip(*np.nonzero(self.free_mask))]

    @property
    def num_free(self) -> int:
        return int(self.free_mask.sum())

    def free_index(self) -> np.ndarray:
        """``(H, W)`` array mapping a free cell to its row-major index among free cells, -1 elsewhere."""
        idx = np.full(self.shape, -1, dtype=int)
        idx[self.free_mask] = np.arange(self.num_free)
        return idx

    def in_bounds(self, cell: Cell) -> bool:
        r, c = cell
        return 0 <= r < self.height_cells and 0 <= c < self.width_cells

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and bool(self.free_mask[cell])

    def center(self, cell: Cell) -> np.ndarray:
        r, c = cell
        return np.array(
            [self.origin[0] + (c + 0.5) * self.spacing, self.origin[1] + (r + 0.5) * self.spacing]
        )

    def centers(self) -> np.ndarray:
        """``(H, W, 2)`` array of all cell centres."""
        rows, cols = np.mgrid[0 : self.height_cells, 0 : self.width_cells]
        return np.stack(
            [self.origin[0] + (cols + 0.5) * self.spacing, self.origin[1] + (rows + 0.5) * self.spacing],
            axis=-1,
        )

    def free_centers(self) -> np.ndarray:
        return self.centers()[self.free_mask]

    def cell_of(self, point: Sequence[float]) -> Cell:
        x, y = point
        c = int(np.floor((x - self.origin[0]) / self.spacing))
        r = int(np.floor((y - self.origin[1]) / self.spacing))
        return (min(max(r, 0), self.height_cells - 1), min(max(c, 0), self.width_cells - 1))

    def step(self, cell: Cell, action: str) -> Cell:
        dr, dc = ACTIONS[action]
        return (cell[0] + dr, cell[1] + dc)

    def linked(self, a: Cell, b: Cell) -> bool:
        """Both cells free and the straight line between their centres misses every obstacle."""
        return (
            self.is_free(a)
            and self.is_free(b)
            and not self.obstacles.segment_blocked(self.center(a), self.center(b))
        )

    def legal_actions(self, cell: Cell) -> list[str]:
        if not self.is_free(cell):
            raise GeometryError(f"cell {cell} is not a free cell")
        return [a for a in ACTION_ORDER if self.linked(cell, self.step(cell, a))]

    def neighbors(self, cell: Cell) -> list[Cell]:
        """Free 4-neighbours reachable without running into an obstacle, in action order."""
        return [self.step(cell, a) for a in self.legal_actions(cell)]

    def links(self) -> list[tuple[int, int, float]]:
        """Undirected 4-neighbour links as ``(free_index_a, free_index_b, distance_m)``."""
        idx = self.free_index()
        out = []
        for r, c in self.free_cells:
            for nb in ((r + 1, c), (r, c + 1)):
                if self.linked((r, c), nb):
                    dist = float(np.linalg.norm(self.center(nb) - self.center((r, c))))
                    out.append((int(idx[r, c]), int(idx[nb]), dist))
        return out

    def is_connected(self) -> bool:
        cells = self.free_cells
        if not cells:
            return False
        seen = {cells[0]}
        queue = deque([cells[0]])
        while queue:
            cur = queue.popleft()
            for nb in self.neighbors(cur):
                if nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
        return len(seen) == len(cells)

    # -- continuous-space helpers ---------------------------------------------

    def outside_distance(self, points: np.ndarray) -> np.ndarray:
        """Euclidean distance from each point to the workspace box (0 inside)."""
        lo, hi = self.workspace
        p = np.asarray(points, dtype=float)
        excess = np.maximum(lo - p, 0.0) + np.maximum(p - hi, 0.0)
        return np.hypot(excess[..., 0], excess[..., 1])

    def project_feasible(self, points: np.ndarray, margin: float = 1e-3) -> np.ndarray:
        """Move points into the workspace and out of obstacles by at least ``margin``.

        Points already feasible are returned unchanged.
        """
        lo, hi = self.workspace
        p = np.clip(np.array(points, dtype=float, copy=True), lo, hi)
        flat = p.reshape(-1, 2)
        if not len(self.obstacles):
            return p
        bad = np.nonzero(self.obstacles.sdf(flat) < margin)[0]
        if not len(bad):
            return p
        # The nearest point outside a union of boxes sits on a combination of face offsets.
        xs = [lo[0], hi[0]] + [v for r in self.obstacles for v in (r.xmin - margin, r.xmax + margin)]
        ys = [lo[1], hi[1]] + [v for r in self.obstacles for v in (r.ymin - margin, r.ymax + margin)]
        for i in bad:
            cx = np.clip(np.array(xs + [flat[i, 0]]), lo[0], hi[0])
            cy = np.clip(np.array(ys + [flat[i, 1]]), lo[1], hi[1])
            cand = np.stack(np.meshgrid(cx, cy), axis=-1).reshape(-1, 2)
            ok = self.obstacles.sdf(cand) >= margin * (1 - 1e-9)
            if ok.any():
                cand = cand[ok]
                flat[i] = cand[np.argmin(np.hypot(*(cand - flat[i]).T))]
        return flat.reshape(p.shape)

    def to_dict(self) -> dict:
        return {
            "width_cells": self.width_cells,
            "height_cells": self.height_cells,
            "spacing": self.spacing,
            "origin": list(self.origin),
            "obstacles": self.obstacles.to_list(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GridMap":
        return cls.build(
            data["width_cells"],
            data["height_cells"],
            data["spacing"],
            ObstacleSet.from_list(data["obstacles"]),
            tuple(data["origin"]),
        )

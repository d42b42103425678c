"""Rollout-based informative path planner.

The belief is linear-Gaussian, so posterior variance does not depend on the
measured values and the planning problem is a deterministic search over cell
sequences.  We run UCT over movement actions; the reward of entering a cell is
its entropy under the belief snapshot taken when planning starts, and a cell
already visited on the current rollout path earns nothing.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .belief import BeliefField
from .grid import ACTION_ORDER, Cell, GridMap


class PlanningError(RuntimeError):
    pass


def entropy_reward(belief: BeliefField, cell: Cell) -> float:
    """Differential entropy ``0.5 * ln(2 pi e sigma^2)`` of the belief at ``cell``."""
    grid = belief.grid
    r, c = cell
    if not grid.is_free((r, c)):
        raise PlanningError(f"cell {cell} is not a free cell")
    sigma = float(belief.sigma[grid.free_index()[r, c]])
    return gaussian_entropy(sigma)


def gaussian_entropy(sigma):
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise PlanningError("entropy needs sigma > 0")
    out = 0.5 * np.log(2 * np.pi * np.e * sigma**2)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PlannerParams:
    num_rollouts: int = 50
    max_depth: int = 10
    discount: float = 0.95
    exploration: float | None = None  # None: half the spread of per-cell rewards
    t_test_alpha: float = 0.05

    def __post_init__(self):
        if self.num_rollouts < 1 or self.max_depth < 1:
            raise ValueError("num_rollouts and max_depth must be >= 1")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")


@dataclass(eq=False)
class PlanNode:
    cell: Cell
    depth: int
    action: str | None = None
    visits: int = 0
    returns: list[float] = field(default_factory=list)
    children: dict[str, "PlanNode"] = field(default_factory=dict)
    untried: list[str] = field(default_factory=list)

    @property
    def value(self) -> float:
        return float(np.mean(self.returns)) if self.returns else 0.0

    def ranked_children(self) -> list["PlanNode"]:
        """Children by visit count, then mean return, then fixed action order."""
        return sorted(
            self.children.values(),
            key=lambda ch: (-ch.visits, -ch.value, ACTION_ORDER.index(ch.action)),
        )

    def to_dict(self) -> dict:
        return {
            "cell": list(self.cell),
            "depth": self.depth,
            "action": self.action,
            "visits": self.visits,
            "value": self.value,
            "children": [self.children[a].to_dict() for a in ACTION_ORDER if a in self.children],
        }


@dataclass
class PlanResult:
    actions: list[str]
    root: PlanNode
    iterations: int
    execute: int

    def dump_trace(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"actions": self.actions, "execute": self.execute, "tree": self.root.to_dict()}))


class _Rewards:
    """Per-cell step rewards shifted so the least uncertain free cell scores 0.

    The shift makes a masked revisit (reward 0) never better than a fresh cell,
    even when entropies are negative; every full-depth path gains the same constant,
    so the preference between fresh cells is unchanged.
    """

    def __init__(self, belief: BeliefField):
        ent = gaussian_entropy(belief.sigma)
        ent = np.atleast_1d(ent)
        self.index = belief.grid.free_index()
        self.values = ent - ent.min()

    def __call__(self, cell: Cell) -> float:
        return float(self.values[self.index[cell]])


def _legal(grid: GridMap, cell: Cell, cache: dict) -> list[str]:
    if cell not in cache:
        cache[cell] = grid.legal_actions(cell)
    return cache[cell]


def plan(
    belief: BeliefField,
    start_cell: Cell,
    params: PlannerParams | None = None,
    seed: int | np.random.Generator = 0,
) -> PlanResult:
    """Run exactly ``params.num_rollouts`` UCT iterations from ``start_cell``.

    Returns the greedy (most visited) action sequence and how many of its leading
    actions the t-test heuristic recommends executing.  ``belief`` is only read.
    """
    params = params or PlannerParams()
    grid = belief.grid
    start_cell = (int(start_cell[0]), int(start_cell[1]))
    legal_cache: dict = {}
    if not grid.is_free(start_cell) or not _legal(grid, start_cell, legal_cache):
        raise PlanningError(f"no legal action from {start_cell}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    reward = _Rewards(belief)
    c = params.exploration
    if c is None:
        c = 0.5 * float(reward.values.max() - reward.values.min())
    gamma = params.discount

    root = PlanNode(start_cell, 0, untried=list(_legal(grid, start_cell, legal_cache)))
    iterations = 0
    for _ in range(params.num_rollouts):
        iterations += 1
        visited = {start_cell}
        path = [root]
        rewards: list[float] = []
        node = root
        # selection
        while not node.untried and node.children and node.depth < params.max_depth:
            log_n = math.log(max(node.visits, 1))
            best, best_score = None, -math.inf
            for a in ACTION_ORDER:
                ch = node.children.get(a)
                if ch is None:
                    continue
                score = ch.value + c * math.sqrt(log_n / ch.visits)
                if score > best_score:
                    best, best_score = ch, score
            node = best
            rewards.append(0.0 if node.cell in visited else reward(node.cell))
            visited.add(node.cell)
            path.append(node)
        # expansion
        if node.untried and node.depth < params.max_depth:
            a = node.untried.pop(0)
            cell = grid.step(node.cell, a)
            child = PlanNode(cell, node.depth + 1, a, untried=list(_legal(grid, cell, legal_cache)))
            node.children[a] = child
            node = child
            rewards.append(0.0 if cell in visited else reward(cell))
            visited.add(cell)
            path.append(node)
        # rollout
        tail = 0.0
        scale = 1.0
        cell = node.cell
        for _depth in range(node.depth, params.max_depth):
            options = _legal(grid, cell, legal_cache)
            cell = grid.step(cell, options[int(rng.integers(len(options)))])
            scale *= gamma
            tail += scale * (0.0 if cell in visited else reward(cell))
            visited.add(cell)
        # backup: each node stores the discounted return from entering it
        g = tail / gamma if path[-1] is not root else tail
        if path[-1] is root:
            root.visits += 1
            root.returns.append(g)
            continue
        for k in range(len(path) - 1, 0, -1):
            g = rewards[k - 1] + gamma * g
            path[k].visits += 1
            path[k].returns.append(g)
        root.visits += 1
        root.returns.append(g)

    actions = []
    node = root
    while node.children:
        node = node.ranked_children()[0]
        actions.append(node.action)
    return PlanResult(actions, root, iterations, actions_to_execute(root, params))


def actions_to_execute(root: PlanNode, params: PlannerParams | None = None) -> int:
    """Length of the greedy prefix whose choices a Welch t-test separates from the runner-up.

    Always at least 1.
    """
    params = params or PlannerParams()
    k = 0
    node = root
    while node.children:
        ranked = node.ranked_children()
        best = ranked[0]
        if len(ranked) > 1:
            p = welch_p_value(best.returns, ranked[1].returns)
            if not p < params.t_test_alpha:
                break
        k += 1
        node = best
    return max(k, 1)


def welch_p_value(a, b) -> float:
    """Two-sided Welch t-test p-value, with the zero-variance cases made explicit."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        return 1.0
    if a.var() == 0 and b.var() == 0:
        return 1.0 if a.mean() == b.mean() else 0.0
    with warnings.catch_warnings():
        # near-identical samples trip scipy's precision-loss warning; the p-value is still usable
        warnings.simplefilter("ignore", RuntimeWarning)
        p = stats.ttest_ind(a, b, equal_var=False).pvalue
    return 1.0 if not np.isfinite(p) else float(p)

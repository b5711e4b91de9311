"""Combinatorial allocation of a divisible budget over points of [0, 1]^2.

An action is up to ``N`` pairs ``(p, beta)`` with ``sum(beta) <= B`` and points
pairwise at least ``eps`` apart in the infinity norm. Its expected reward is
``sum mu(p, beta)``.

Both learners keep one merged quadtree whose leaves carry a vector of
``(n, mean, ucb)`` statistics, one entry per allocation level. Fixed
discretization starts from a uniform dyadic grid and never refines; adaptive
discretization starts from the whole square and quarters a leaf once it has
been played often enough at some level.
"""

from __future__ import annotations

import csv
import functools
import math
import os
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from artreplay.history import Cell, cell_index
from artreplay.model import (ConfigError, InvariantViolation, RewardStack, ValidationError,
                             check_reward)

DEFAULT_LEVELS = (0.0, 0.5, 1.0)
_TOL = 1e-12


# ---------------------------------------------------------------- surfaces

def reward_pwl(p, beta):
    """Piecewise-linear surface ``beta * (p1 + p2) / 2``; best point (1, 1)."""
    return beta * (np.asarray(p[0]) + np.asarray(p[1])) / 2.0


def reward_quadratic(p, beta):
    """Concave quadratic ``beta * (1 - (p1 - .5)^2 - (p2 - .5)^2)``; best point (.5, .5)."""
    x, y = np.asarray(p[0]), np.asarray(p[1])
    return beta * (1.0 - (x - 0.5) ** 2 - (y - 0.5) ** 2)


@dataclass(frozen=True)
class Surface:
    name: str
    fn: Callable
    lipschitz: float

    def __call__(self, p, beta):
        return self.fn(p, beta)

    def mean(self, p, beta) -> float:
        return float(self.fn(p, beta))


SURFACES = {
    "pwl": Surface("pwl", reward_pwl, 1.0),
    "quadratic": Surface("quadratic", reward_quadratic, 2.0),
}


def get_surface(name: str) -> Surface:
    try:
        return SURFACES[name]
    except KeyError:
        raise ConfigError(f"unknown surface {name!r}; choose from {sorted(SURFACES)}") from None


# ---------------------------------------------------------------- bonuses

def bonus_fixed(t: int, horizon: int, delta: float) -> float:
    if t <= 0:
        return math.inf
    return 2.0 * math.sqrt(2.0 * math.log(horizon / delta) / t)


def bonus_adaptive(t: int, horizon: int, delta: float, lipschitz: float = 1.0, d_max: float = 1.0) -> float:
    if t <= 0:
        return math.inf
    return bonus_fixed(t, horizon, delta) + 2.0 * lipschitz * d_max / math.sqrt(t)


# ---------------------------------------------------------------- cells

def cell_side(cell: Cell) -> float:
    return 2.0 ** -cell[0]


def cell_bounds(cell: Cell) -> tuple[float, float, float, float]:
    d, ix, iy = cell
    s = 2.0 ** -d
    return ix * s, (ix + 1) * s, iy * s, (iy + 1) * s


def cell_center(cell: Cell) -> tuple[float, float]:
    d, ix, iy = cell
    s = 2.0 ** -d
    return (ix + 0.5) * s, (iy + 0.5) * s


_MORTON_DEPTH = 30


def morton(cell: Cell) -> int:
    """Z-order rank of the cell's lower-left corner at the finest depth; parents precede their children."""
    d, ix, iy = cell
    x, y = ix << (_MORTON_DEPTH - d), iy << (_MORTON_DEPTH - d)
    code = 0
    for b in range(_MORTON_DEPTH):
        code |= ((y >> b) & 1) << (2 * b + 1) | ((x >> b) & 1) << (2 * b)
    return code


def children_of(cell: Cell) -> list[Cell]:
    d, ix, iy = cell
    return [(d + 1, 2 * ix + dx, 2 * iy + dy) for dy in (0, 1) for dx in (0, 1)]


def dyadic_depth(gamma: float) -> int:
    if gamma <= 0 or gamma > 1:
        raise ConfigError(f"gamma={gamma} must be in (0, 1]")
    k = round(-math.log2(gamma))
    if 2.0 ** -k != gamma:
        raise ConfigError(f"gamma={gamma} is not a power of 1/2")
    return k


class Alloc(NamedTuple):
    """One component of an action: a point, its allocation and the leaf it was drawn from."""

    point: tuple[float, float]
    beta: float
    cell: Cell | None = None


# ---------------------------------------------------------------- partition

class Partition:
    """Merged quadtree over [0, 1]^2 with per-level statistics on every node."""

    def __init__(self, levels: Sequence[float] = DEFAULT_LEVELS, depth: int = 0):
        self.levels = np.asarray(levels, dtype=float)
        if len(self.levels) == 0 or np.any((self.levels < 0) | (self.levels > 1)):
            raise ConfigError(f"allocation levels {levels} must be a nonempty subset of [0, 1]")
        if len(set(self.levels.tolist())) != len(self.levels):
            raise ConfigError(f"allocation levels {levels} repeat")
        nl = len(self.levels)
        cap = 64
        self.n = np.zeros((cap, nl), dtype=np.int64)
        self.mean = np.ones((cap, nl))
        self.ucb = np.ones((cap, nl))
        self.cells: list[Cell] = []
        self.parent: list[int] = []
        self.mortons: list[int] = []
        self.leaf_of_cell: dict[Cell, int] = {}
        self.min_depth = depth
        self._level_pos = {float(b): j for j, b in enumerate(self.levels)}
        self._leaf_cache: np.ndarray | None = None
        root = self._new_node((0, 0, 0), -1)
        self.leaf_of_cell[(0, 0, 0)] = root
        frontier = [root]
        for _ in range(depth):
            frontier = [c for node in frontier for c in self.split(node)]

    def _new_node(self, cell: Cell, parent: int) -> int:
        k = len(self.cells)
        if k == len(self.n):
            grow = len(self.n)
            self.n = np.concatenate([self.n, np.zeros_like(self.n[:grow])])
            self.mean = np.concatenate([self.mean, np.ones_like(self.mean[:grow])])
            self.ucb = np.concatenate([self.ucb, np.ones_like(self.ucb[:grow])])
        if parent >= 0:
            self.n[k] = self.n[parent]
            self.mean[k] = self.mean[parent]
            self.ucb[k] = self.ucb[parent]
        self.cells.append(cell)
        self.parent.append(parent)
        self.mortons.append(morton(cell))
        return k

    def split(self, node: int) -> list[int]:
        """Quarter a leaf; each child inherits every level's statistics."""
        cell = self.cells[node]
        if self.leaf_of_cell.get(cell) != node:
            raise InvariantViolation(f"cannot split non-leaf {cell}")
        del self.leaf_of_cell[cell]
        kids = []
        for c in children_of(cell):
            k = self._new_node(c, node)
            self.leaf_of_cell[c] = k
            kids.append(k)
        self._leaf_cache = None
        return kids

    def leaves(self) -> np.ndarray:
        """Leaf node ids in z-order."""
        if self._leaf_cache is None:
            ids = np.fromiter(self.leaf_of_cell.values(), dtype=np.int64)
            keys = np.asarray([self.mortons[i] for i in ids], dtype=np.int64)
            self._leaf_cache = ids[np.argsort(keys, kind="stable")]
        return self._leaf_cache

    @property
    def leaf_count(self) -> int:
        return len(self.leaf_of_cell)

    def region_count(self) -> int:
        return self.leaf_count * len(self.levels)

    def leaf_for_point(self, p: Sequence[float]) -> int:
        x, y = float(p[0]), float(p[1])
        d = self.min_depth
        while True:
            node = self.leaf_of_cell.get((d, cell_index(x, d), cell_index(y, d)))
            if node is not None:
                return node
            d += 1
            if d > _MORTON_DEPTH:
                raise InvariantViolation(f"no leaf covers {p}")

    def level_index(self, beta: float) -> int:
        j = self._level_pos.get(beta)
        if j is not None:
            return j
        hit = np.flatnonzero(np.abs(self.levels - beta) <= 1e-9)
        if len(hit) == 0:
            raise ValidationError(f"allocation {beta} is not one of the levels {self.levels.tolist()}")
        return int(hit[0])

    def depth_at(self, p: Sequence[float]) -> int:
        return self.cells[self.leaf_for_point(p)][0]

    def max_depth_touching(self, p: Sequence[float]) -> int:
        """Deepest leaf whose closed cell contains p (a grid vertex touches up to four leaves)."""
        best = 0
        for cell in self.leaf_of_cell:
            x0, x1, y0, y1 = cell_bounds(cell)
            if x0 <= p[0] <= x1 and y0 <= p[1] <= y1:
                best = max(best, cell[0])
        return best

    def check_cover(self) -> None:
        """Leaves tile the square: areas sum to 1 and every leaf's ancestors are internal."""
        area = sum(4.0 ** -c[0] for c in self.leaf_of_cell)
        if abs(area - 1.0) > 1e-12:
            raise InvariantViolation(f"leaf areas sum to {area}")
        for cell in self.leaf_of_cell:
            d, ix, iy = cell
            for up in range(1, d + 1):
                if (d - up, ix >> up, iy >> up) in self.leaf_of_cell:
                    raise InvariantViolation(f"leaf {cell} overlaps leaf ancestor")

    def snapshot_rows(self) -> list[tuple]:
        rows = []
        for node in self.leaves():
            cell = self.cells[node]
            x0, x1, y0, y1 = cell_bounds(cell)
            for j, beta in enumerate(self.levels):
                rows.append((float(beta), x0, x1, y0, y1, int(self.n[node, j]),
                             float(self.mean[node, j]), float(self.ucb[node, j]), cell[0]))
        return rows


def fixed_discretization_init(gamma: float, levels: Sequence[float] = DEFAULT_LEVELS) -> Partition:
    """Uniform grid of ``(1/gamma)^2`` leaves, each with one state per level."""
    return Partition(levels, dyadic_depth(gamma))


def export_snapshot(partition: Partition, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["beta", "x0", "x1", "y0", "y1", "n", "mean", "ucb", "depth"])
        for row in partition.snapshot_rows():
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------- selection

def select_regions(ucb, levels, n_max: int, budget: float, order_keys=None) -> list[tuple[int, int]]:
    """Greedy bang-per-buck selection over ``(row, level)`` candidates.

    ``ucb`` has one row per leaf and one column per level. Candidates are taken
    in decreasing ``ucb / beta`` (a zero level divides by the smallest positive
    level), then increasing ``order_keys[row]``, then decreasing ``beta``. A
    candidate is skipped if its row is already used or it would overshoot the
    budget; selection stops after ``n_max`` picks.
    """
    ucb = np.asarray(ucb, dtype=float)
    levels = np.asarray(levels, dtype=float)
    m, nl = ucb.shape
    if n_max <= 0 or m == 0:
        return []
    pos = levels[levels > 0]
    base = pos.min() if len(pos) else 1.0
    cost = np.where(levels > 0, levels, base)
    ratio = (ucb / cost).ravel()
    rows = np.repeat(np.arange(m), nl)
    cols = np.tile(np.arange(nl), m)
    keys = np.arange(m) if order_keys is None else np.asarray(order_keys)
    order = np.lexsort((-levels[cols], keys[rows], -ratio))
    used = np.zeros(m, dtype=bool)
    picked: list[tuple[int, int]] = []
    spent = 0.0
    min_pos = pos.min() if len(pos) else math.inf
    for k in order:
        if budget - spent < min_pos - _TOL:
            break
        r, c = rows[k], cols[k]
        if used[r] or spent + levels[c] > budget + _TOL:
            continue
        used[r] = True
        spent += levels[c]
        picked.append((int(r), int(c)))
        if len(picked) == n_max:
            return picked
    # the remaining budget fits no positive level: only zero-cost candidates are left
    if np.any(levels == 0):
        k = order[levels[cols[order]] == 0]
        k = k[~used[rows[k]]]
        _, first = np.unique(rows[k], return_index=True)
        k = k[np.sort(first)]
        for kk in k[: n_max - len(picked)]:
            picked.append((int(rows[kk]), int(cols[kk])))
    return picked


def selection_value(ucb, picked) -> float:
    ucb = np.asarray(ucb, dtype=float)
    return float(sum(ucb[r, c] for r, c in picked))


def exhaustive_select(ucb, levels, n_max: int, budget: float) -> tuple[float, list[tuple[int, int]]]:
    """Best feasible selection by enumeration; only for a handful of candidates."""
    ucb = np.asarray(ucb, dtype=float)
    levels = np.asarray(levels, dtype=float)
    m, nl = ucb.shape
    best = (0.0, [])

    def rec(r, chosen, spent, value):
        nonlocal best
        if value > best[0] + _TOL:
            best = (value, list(chosen))
        if r == m or len(chosen) == n_max:
            return
        rec(r + 1, chosen, spent, value)
        for c in range(nl):
            if spent + levels[c] <= budget + _TOL:
                chosen.append((r, c))
                rec(r + 1, chosen, spent + levels[c], value + ucb[r, c])
                chosen.pop()

    rec(0, [], 0.0, 0.0)
    return best


# ---------------------------------------------------------------- learners

class DiscretizationUCB:
    """Monotone-UCB learner over a merged quadtree with greedy selection."""

    iidata = True
    adaptive = False

    def __init__(self, horizon: int, n_max: int = 5, budget: float = 2.0,
                 levels: Sequence[float] = DEFAULT_LEVELS, eps: float = 0.2, delta: float = 0.1,
                 lipschitz: float = 1.0, d_max: float = 1.0, depth: int = 0):
        if horizon < 1:
            raise ConfigError("T must be >= 1")
        if n_max < 0 or budget < 0:
            raise ConfigError("N and B must be >= 0")
        if not 0 < delta < 1:
            raise ConfigError("delta must be in (0, 1)")
        if eps < 0:
            raise ConfigError("eps must be >= 0")
        self.horizon = horizon
        self.n_max = n_max
        self.budget = budget
        self.eps = eps
        self.delta = delta
        self.lipschitz = lipschitz
        self.d_max = d_max
        self.partition = Partition(levels, depth)
        self.levels = self.partition.levels

    def bonus(self, t: int) -> float:
        return bonus_fixed(t, self.horizon, self.delta)

    def decide(self) -> tuple[Alloc, ...]:
        part = self.partition
        leaves = part.leaves()
        keys = np.asarray([part.mortons[i] for i in leaves], dtype=np.int64)
        picked = select_regions(part.ucb[leaves], self.levels, self.n_max, self.budget, keys)
        out = []
        for r, c in picked:
            cell = part.cells[leaves[r]]
            out.append(Alloc(cell_center(cell), float(self.levels[c]), cell))
        return tuple(out)

    def components(self, action) -> tuple[Alloc, ...]:
        return tuple(action)

    def history_key(self, component: Alloc):
        return component.beta, component.cell

    def observe(self, component: Alloc, reward: float) -> None:
        node = self.partition.leaf_of_cell.get(component.cell)
        if node is None:
            raise InvariantViolation(f"{component.cell} is not a leaf")
        self.update_region(node, self.partition.level_index(component.beta), reward)

    def ingest(self, entry) -> None:
        p1, p2, beta, reward = entry
        if not (0 <= p1 <= 1 and 0 <= p2 <= 1):
            raise ValidationError(f"point ({p1}, {p2}) outside the unit square")
        part = self.partition
        self.update_region(part.leaf_for_point((p1, p2)), part.level_index(beta), reward)

    def update_region(self, node: int, j: int, reward: float) -> None:
        reward = check_reward(reward)
        part = self.partition
        n = int(part.n[node, j]) + 1
        mean = (float(part.mean[node, j]) * (n - 1) + reward) / n
        part.n[node, j] = n
        part.mean[node, j] = mean
        cand = mean + self.bonus(n)
        if cand < part.ucb[node, j]:
            part.ucb[node, j] = cand
        self.maybe_split(node, j)

    def maybe_split(self, node: int, j: int) -> bool:
        return False

    def region_count(self) -> int:
        return self.partition.region_count()

    def snapshot(self) -> tuple:
        part = self.partition
        leaves = part.leaves()
        return (tuple(part.cells[i] for i in leaves), part.n[leaves].tolist(),
                part.mean[leaves].tolist(), part.ucb[leaves].tolist())


class FixedDiscretization(DiscretizationUCB):
    """Uniform ``gamma``-grid; history classes are (level, cell)."""

    def __init__(self, horizon: int, gamma: float = 0.25, eps: float = 0.2, **kw):
        depth = dyadic_depth(gamma)
        if gamma < eps:
            raise ConfigError(f"gamma={gamma} < eps={eps}: grid centres would violate separation")
        super().__init__(horizon, eps=eps, depth=depth, **kw)
        self.gamma = gamma


class AdaptiveDiscretization(DiscretizationUCB):
    """Zooming quadtree; history classes are whole leaves across all levels."""

    adaptive = True

    def bonus(self, t: int) -> float:
        return bonus_adaptive(t, self.horizon, self.delta, self.lipschitz, self.d_max)

    def history_key(self, component: Alloc):
        return None, component.cell

    def maybe_split(self, node: int, j: int) -> bool:
        part = self.partition
        cell = part.cells[node]
        r = self.d_max * cell_side(cell)
        if r >= 2 * self.eps and part.n[node, j] >= (self.d_max / r) ** 2:
            part.split(node)
            return True
        return False


def classify_cmab(pair, partition: Partition, per_level: bool = True):
    """History class of ``(p, beta)``: the leaf containing ``p``, tagged with ``beta`` if ``per_level``."""
    p, beta = pair
    cell = partition.cells[partition.leaf_for_point(p)]
    return (float(beta), cell) if per_level else (None, cell)


# ---------------------------------------------------------------- optimum

def _level_multisets(levels: np.ndarray, n_max: int, budget: float):
    """Nonincreasing level-index tuples of length 1..n_max within the budget."""
    order = sorted(range(len(levels)), key=lambda j: -levels[j])

    def rec(start, prefix, spent):
        if prefix:
            yield tuple(prefix)
        if len(prefix) == n_max:
            return
        for k in range(start, len(order)):
            j = order[k]
            if spent + levels[j] <= budget + _TOL:
                prefix.append(j)
                yield from rec(k, prefix, spent + levels[j])
                prefix.pop()

    yield from rec(0, [], 0.0)


def cmab_opt(surface: Surface, n_max: int, budget: float, levels: Sequence[float] = DEFAULT_LEVELS,
             eps: float = 0.2, resolution: float = 1 / 64) -> float:
    """Best action value with points restricted to the ``resolution`` grid.

    Exact on the grid (branch and bound); the continuous optimum exceeds it by
    at most ``n_max * L * resolution`` for an ``L``-Lipschitz surface.
    """
    return _cmab_opt(surface, n_max, float(budget), tuple(float(b) for b in levels), float(eps),
                     float(resolution))[0]


def cmab_opt_action(surface: Surface, n_max: int, budget: float, levels: Sequence[float] = DEFAULT_LEVELS,
                    eps: float = 0.2, resolution: float = 1 / 64) -> tuple[float, tuple[Alloc, ...]]:
    return _cmab_opt(surface, n_max, float(budget), tuple(float(b) for b in levels), float(eps),
                     float(resolution))


@functools.lru_cache(maxsize=64)
def _cmab_opt(surface, n_max, budget, levels, eps, resolution):
    steps = round(1 / resolution)
    if abs(steps * resolution - 1) > 1e-12:
        raise ConfigError(f"resolution {resolution} must divide 1")
    g = np.arange(steps + 1) / steps
    px, py = (a.ravel() for a in np.meshgrid(g, g, indexing="ij"))
    lv = np.asarray(levels)
    vals = [np.asarray(surface((px, py), b), dtype=float) * np.ones_like(px) for b in lv]
    orders = [np.argsort(-v, kind="stable") for v in vals]
    tops = [float(v.max()) for v in vals]
    best_val, best_pts = 0.0, ()

    for ms in _level_multisets(lv, n_max, budget):
        if sum(tops[j] for j in ms) <= best_val + _TOL:
            continue
        tail = [sum(tops[j] for j in ms[i + 1:]) for i in range(len(ms))]
        chosen: list[int] = []
        ranks: list[int] = []

        def rec(i, value):
            nonlocal best_val, best_pts
            if i == len(ms):
                if value > best_val + _TOL:
                    best_val = float(value)
                    best_pts = tuple(Alloc((float(px[q]), float(py[q])), float(lv[ms[k]]))
                                     for k, q in enumerate(chosen))
                return
            j = ms[i]
            v, order = vals[j], orders[j]
            start = ranks[-1] + 1 if i > 0 and ms[i - 1] == j else 0
            for rank in range(start, len(order)):
                q = order[rank]
                if value + v[q] + tail[i] <= best_val + _TOL:
                    break
                if any(max(abs(px[q] - px[o]), abs(py[q] - py[o])) < eps - _TOL for o in chosen):
                    continue
                chosen.append(q)
                ranks.append(rank)
                rec(i + 1, value + v[q])
                chosen.pop()
                ranks.pop()

        rec(0, 0.0)
    return best_val, best_pts


# ---------------------------------------------------------------- environment

class CMABEnv:
    """Allocation problem on a reward surface, with Bernoulli observations from a reward stack."""

    def __init__(self, surface: Surface, n_max: int, budget: float, levels: Sequence[float], eps: float,
                 seed: int, opt: float | None = None, resolution: float = 1 / 64):
        self.surface = surface
        self.n_max = n_max
        self.budget = budget
        self.levels = tuple(float(b) for b in levels)
        self.eps = eps
        self.opt = cmab_opt(surface, n_max, budget, self.levels, eps, resolution) if opt is None else opt
        self.stack = RewardStack(seed, self._class_mean)

    def _class_mean(self, cls) -> float:
        (x, y), beta = cls
        return self.surface.mean((x, y), beta)

    def mu(self, action) -> float:
        return float(sum(self.surface.mean(c.point, c.beta) for c in action))

    def reward_class(self, component: Alloc):
        return component.point, component.beta

    def check_action(self, action) -> None:
        check_feasible(action, self.n_max, self.budget, self.levels, self.eps)

    def random_action(self, rng: np.random.Generator, max_tries: int = 100_000) -> tuple[Alloc, ...]:
        """Uniform draw from the feasible set by rejection: ``N`` levels then ``N`` points."""
        lv = np.asarray(self.levels)
        for _ in range(max_tries):
            betas = lv[rng.integers(len(lv), size=self.n_max)]
            if betas.sum() <= self.budget + _TOL:
                break
        else:
            raise ConfigError("no budget-feasible allocation found")
        for _ in range(max_tries):
            pts = rng.random((self.n_max, 2))
            d = np.abs(pts[:, None, :] - pts[None, :, :]).max(axis=2)
            np.fill_diagonal(d, np.inf)
            if d.min() >= self.eps:
                return tuple(Alloc((float(x), float(y)), float(b)) for (x, y), b in zip(pts, betas))
        raise ConfigError(f"no {self.n_max} points {self.eps}-separated found")


def check_feasible(action, n_max: int, budget: float, levels: Sequence[float], eps: float) -> None:
    """Raise :class:`InvariantViolation` unless the action respects size, budget, levels and separation."""
    if len(action) > n_max:
        raise InvariantViolation(f"{len(action)} components exceed N={n_max}")
    spent = sum(c.beta for c in action)
    if spent > budget + 1e-9:
        raise InvariantViolation(f"allocations sum to {spent} > B={budget}")
    for c in action:
        if not any(abs(c.beta - b) <= 1e-9 for b in levels):
            raise InvariantViolation(f"allocation {c.beta} is not a level")
        if not (0 <= c.point[0] <= 1 and 0 <= c.point[1] <= 1):
            raise InvariantViolation(f"point {c.point} outside the unit square")
    for i, a in enumerate(action):
        for b in action[i + 1:]:
            d = max(abs(a.point[0] - b.point[0]), abs(a.point[1] - b.point[1]))
            if d < eps - 1e-9:
                raise InvariantViolation(f"points {a.point} and {b.point} are {d} < eps={eps} apart")

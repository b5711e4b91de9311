"""Historical datasets with FIFO per-class consumption.

:class:`HistoricalDataset` serves discrete action keys (arms). :class:`SpatialHistory`
serves CMAB-CRA entries ``(p1, p2, beta, reward)`` and answers "earliest unused
entry inside a dyadic cell" queries through a lazily built quadtree of index
lists, one per allocation channel.
"""

from __future__ import annotations

import csv
import os
from collections import defaultdict
from typing import Hashable, Iterator, Sequence

import numpy as np

from artreplay.model import IngestionError

Cell = tuple[int, int, int]  # (depth, ix, iy); side 2**-depth

_MAX_DEPTH = 30
_SCALE = 1 << _MAX_DEPTH


class HistoricalDataset:
    """Ordered ``(action, reward)`` pairs consumed FIFO per action.

    ``cursors[a]`` counts consumed entries of action ``a``; ``reads`` is their sum.
    """

    def __init__(self, entries: Sequence[tuple[Hashable, float]] = ()):
        actions, rewards = [], []
        for j, entry in enumerate(entries):
            try:
                a, r = entry
                r = float(r)
            except (TypeError, ValueError) as exc:
                raise IngestionError(f"malformed entry {entry!r}", j) from exc
            if not 0.0 <= r <= 1.0:
                raise IngestionError(f"reward {r} outside [0, 1]", j)
            actions.append(int(a) if isinstance(a, (int, np.integer)) else a)
            rewards.append(r)
        self._init(actions, rewards)

    def _init(self, actions: list, rewards: list[float]) -> None:
        self.actions = actions
        self.rewards = rewards
        self._by_key: dict[Hashable, list[int]] = defaultdict(list)
        for j, a in enumerate(actions):
            self._by_key[a].append(j)
        self.cursors: dict[Hashable, int] = {k: 0 for k in self._by_key}
        self.reads = 0

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def size(self) -> int:
        return len(self.actions)

    def entry(self, j: int) -> tuple[Hashable, float]:
        return self.actions[j], self.rewards[j]

    def count(self, key: Hashable) -> int:
        return len(self._by_key.get(key, ()))

    def unused(self, key: Hashable) -> int:
        return self.count(key) - self.cursors.get(key, 0)

    def pop_entry(self, key: Hashable) -> tuple[Hashable, float] | None:
        idx = self._by_key.get(key)
        if idx is None:
            return None
        c = self.cursors[key]
        if c >= len(idx):
            return None
        self.cursors[key] = c + 1
        self.reads += 1
        return self.entry(idx[c])

    def pop_unused(self, key: Hashable) -> float | None:
        """Reward of the earliest unconsumed entry for ``key``, or ``None``."""
        e = self.pop_entry(key)
        return None if e is None else e[1]

    def drain(self) -> Iterator[tuple[int, tuple[Hashable, float]]]:
        """Consume every unused entry in dataset order (Full Start)."""
        seen: dict[Hashable, int] = defaultdict(int)
        for j, a in enumerate(self.actions):
            seen[a] += 1
            if seen[a] > self.cursors[a]:
                self.cursors[a] = seen[a]
                self.reads += 1
                yield j, self.entry(j)

    def fresh(self) -> "HistoricalDataset":
        """Same entries, nothing consumed."""
        new = object.__new__(HistoricalDataset)
        new._init(self.actions, self.rewards)
        return new

    def action_counts(self) -> dict[Hashable, int]:
        return {k: len(v) for k, v in self._by_key.items()}

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "HistoricalDataset":
        entries = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["action", "reward"]:
                raise IngestionError(f"{path}: expected header action,reward, got {reader.fieldnames}")
            for row_no, row in enumerate(reader, start=2):
                try:
                    a, r = int(row["action"]), float(row["reward"])
                except (TypeError, ValueError) as exc:
                    raise IngestionError(f"{path}: row {row_no}: cannot parse {row}") from exc
                if not 0.0 <= r <= 1.0:
                    raise IngestionError(f"{path}: row {row_no}: reward {r} outside [0, 1]")
                entries.append((a, r))
        return cls(entries)

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["action", "reward"])
            for a, r in zip(self.actions, self.rewards):
                w.writerow([a, repr(r)])


def cell_index(x: float, depth: int) -> int:
    """Index of the half-open dyadic interval at ``depth`` containing ``x``; 1.0 joins the last one."""
    n = 1 << depth
    return min(int(x * n), n - 1)


def cell_of(p: Sequence[float], depth: int) -> Cell:
    return depth, cell_index(p[0], depth), cell_index(p[1], depth)


def parent_cell(cell: Cell) -> Cell:
    d, ix, iy = cell
    return d - 1, ix >> 1, iy >> 1


class _Bucket:
    __slots__ = ("idx", "cursor")

    def __init__(self, idx: np.ndarray):
        self.idx = idx
        self.cursor = 0


class SpatialHistory:
    """CMAB-CRA history ``(p1, p2, beta, reward)`` with cell-restricted FIFO pops.

    A key is ``(channel, cell)``: ``channel`` is an allocation level to match
    only entries at that level, or ``None`` to match every level.
    """

    def __init__(self, p1, p2, beta, reward):
        p1, p2, beta, reward = (np.asarray(v, dtype=float).ravel() for v in (p1, p2, beta, reward))
        if not (len(p1) == len(p2) == len(beta) == len(reward)):
            raise IngestionError("column lengths differ")
        for name, col in (("p1", p1), ("p2", p2), ("beta", beta), ("reward", reward)):
            bad = np.flatnonzero(~((col >= 0.0) & (col <= 1.0)))
            if len(bad):
                raise IngestionError(f"{name}={col[bad[0]]} outside [0, 1]", int(bad[0]))
        self.p1, self.p2, self.beta, self.reward = p1, p2, beta, reward
        self._cx = np.minimum((p1 * _SCALE).astype(np.int64), _SCALE - 1)
        self._cy = np.minimum((p2 * _SCALE).astype(np.int64), _SCALE - 1)
        self._idx_cache: dict[tuple[float | None, Cell], np.ndarray] = {}
        self._reset()

    def _reset(self) -> None:
        self.used = np.zeros(len(self.p1), dtype=bool)
        self.reads = 0
        self._buckets: dict[tuple[float | None, Cell], _Bucket] = {}

    @classmethod
    def from_entries(cls, entries: Sequence[Sequence[float]]) -> "SpatialHistory":
        arr = np.asarray(entries, dtype=float).reshape(-1, 4)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])

    def __len__(self) -> int:
        return len(self.p1)

    @property
    def size(self) -> int:
        return len(self.p1)

    def entry(self, j: int) -> tuple[float, float, float, float]:
        return float(self.p1[j]), float(self.p2[j]), float(self.beta[j]), float(self.reward[j])

    def _bucket(self, channel: float | None, cell: Cell) -> _Bucket:
        key = (channel, cell)
        b = self._buckets.get(key)
        if b is not None:
            return b
        idx = self._idx_cache.get(key)
        if idx is None:
            d, ix, iy = cell
            if d == 0:
                idx = np.arange(len(self.p1)) if channel is None else np.flatnonzero(self.beta == channel)
            else:
                src = self._bucket(channel, parent_cell(cell)).idx
                shift = _MAX_DEPTH - d
                idx = src[((self._cx[src] >> shift) == ix) & ((self._cy[src] >> shift) == iy)]
            self._idx_cache[key] = idx
        b = self._buckets[key] = _Bucket(idx)
        return b

    def count_unused(self, key: tuple[float | None, Cell]) -> int:
        b = self._bucket(*key)
        return int(np.count_nonzero(~self.used[b.idx[b.cursor:]]))

    def pop_index(self, key: tuple[float | None, Cell]) -> int | None:
        b = self._bucket(*key)
        idx, used = b.idx, self.used
        c = b.cursor
        while c < len(idx) and used[idx[c]]:
            c += 1
        if c == len(idx):
            b.cursor = c
            return None
        j = int(idx[c])
        b.cursor = c + 1
        used[j] = True
        self.reads += 1
        return j

    def pop_entry(self, key: tuple[float | None, Cell]) -> tuple[float, float, float, float] | None:
        j = self.pop_index(key)
        return None if j is None else self.entry(j)

    def pop_unused(self, key: tuple[float | None, Cell]) -> float | None:
        e = self.pop_entry(key)
        return None if e is None else e[3]

    def drain(self) -> Iterator[tuple[int, tuple[float, float, float, float]]]:
        for j in range(len(self.p1)):
            if not self.used[j]:
                self.used[j] = True
                self.reads += 1
                yield j, self.entry(j)

    def fresh(self) -> "SpatialHistory":
        new = object.__new__(SpatialHistory)
        new.p1, new.p2, new.beta, new.reward = self.p1, self.p2, self.beta, self.reward
        new._cx, new._cy = self._cx, self._cy
        new._idx_cache = self._idx_cache
        new._reset()
        return new

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "SpatialHistory":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["p1", "p2", "beta", "reward"]:
                raise IngestionError(f"{path}: expected header p1,p2,beta,reward, got {reader.fieldnames}")
            for row_no, row in enumerate(reader, start=2):
                try:
                    vals = [float(row[c]) for c in ("p1", "p2", "beta", "reward")]
                except (TypeError, ValueError) as exc:
                    raise IngestionError(f"{path}: row {row_no}: cannot parse {row}") from exc
                if not all(0.0 <= v <= 1.0 for v in vals):
                    raise IngestionError(f"{path}: row {row_no}: value outside [0, 1] in {row}")
                rows.append(vals)
        return cls.from_entries(rows)

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["p1", "p2", "beta", "reward"])
            for j in range(len(self.p1)):
                w.writerow([repr(v) for v in self.entry(j)])


def preprocess_history_tree(entries: Sequence[Sequence[float]]) -> SpatialHistory:
    """Build the cell index over CMAB-CRA entries."""
    return SpatialHistory.from_entries(entries)

"""Prioritized experience replay: FIFO ring plus sum/max segment trees.

Sampling probability of slot i is priority_i**alpha / sum_j priority_j**alpha;
importance-sampling weights are (N * P(i))**-beta, normalized by the batch
maximum so they never exceed 1.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class SegmentTree:
    """Array-backed binary tree reducing leaf values with a numpy ufunc."""

    def __init__(self, capacity: int, ufunc, neutral: float):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        size = 1
        while size < capacity:
            size *= 2
        self._size = size
        self._ufunc = ufunc
        self._tree = np.full(2 * size, neutral, dtype=np.float64)

    def __setitem__(self, idx: int, value: float) -> None:
        i = idx + self._size
        self._tree[i] = value
        i //= 2
        while i >= 1:
            self._tree[i] = self._ufunc(self._tree[2 * i], self._tree[2 * i + 1])
            i //= 2

    def set_many(self, idxs: np.ndarray, values: np.ndarray) -> None:
        i = np.asarray(idxs, dtype=np.int64) + self._size
        self._tree[i] = values
        parents = np.unique(i >> 1)
        parents = parents[parents >= 1]
        while parents.size:
            self._tree[parents] = self._ufunc(
                self._tree[2 * parents], self._tree[2 * parents + 1]
            )
            if parents[0] == 1:
                break
            parents = np.unique(parents >> 1)

    def __getitem__(self, idx: int) -> float:
        return float(self._tree[idx + self._size])

    @property
    def root(self) -> float:
        return float(self._tree[1])


class SumTree(SegmentTree):
    def __init__(self, capacity: int):
        super().__init__(capacity, np.add, 0.0)

    def prefix_index(self, mass: float) -> int:
        """Largest slot whose prefix sum exceeds ``mass`` (tree descent)."""
        i = 1
        tree = self._tree
        while i < self._size:
            left = 2 * i
            if tree[left] > mass:
                i = left
            else:
                mass -= tree[left]
                i = left + 1
        return i - self._size


class MaxTree(SegmentTree):
    def __init__(self, capacity: int):
        super().__init__(capacity, np.maximum, 0.0)


class PrioritizedReplayBuffer:
    """Ring buffer with proportional prioritized sampling.

    Evicts FIFO at capacity. Slots never written have zero mass and are
    therefore never sampled; overwritten (evicted) items are unreachable.
    """

    def __init__(self, capacity: int, alpha: float = 0.6):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        self.capacity = capacity
        self.alpha = alpha
        self._items: list = [None] * capacity
        self._sum = SumTree(capacity)
        self._max = MaxTree(capacity)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def max_priority(self) -> float:
        """Largest raw priority currently stored, or 0 when empty."""
        return self._max.root

    def add(self, item, priority: float | None = None) -> None:
        """Insert with the given priority; default is the current max (1 if empty)."""
        if priority is None:
            priority = self.max_priority() or 1.0
        if priority <= 0:
            raise ValueError("priority must be positive")
        slot = self._next
        self._items[slot] = item
        self._sum[slot] = priority**self.alpha
        self._max[slot] = priority
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        if hasattr(item, "priority"):
            item.priority = priority

    def sample(self, batch_size: int, beta: float, rng: np.random.Generator):
        """Draw iid proportional samples; returns (indices, items, is_weights)."""
        if self._size < batch_size:
            raise ValueError(f"buffer holds {self._size} items, need {batch_size}")
        total = self._sum.root
        # Descent can fall on a zero-mass slot when a draw hits a prefix-sum
        # boundary exactly; occupied slots are always 0.._size-1, so clamp.
        indices = np.array(
            [
                min(self._sum.prefix_index(u), self._size - 1)
                for u in rng.uniform(0.0, total, size=batch_size)
            ],
            dtype=np.int64,
        )
        probs = np.array([self._sum[i] for i in indices]) / total
        weights = (self._size * probs) ** (-beta)
        weights = weights / weights.max()
        items = [self._items[i] for i in indices]
        return indices, items, weights

    def update_priorities(self, indices: Sequence[int], priorities: Sequence[float]) -> None:
        idx = np.asarray(indices, dtype=np.int64)
        pri = np.asarray(priorities, dtype=np.float64)
        if np.any(pri <= 0):
            raise ValueError("priority must be positive")
        for i in idx:
            if self._items[i] is None:
                raise IndexError(f"slot {i} is empty")
        self._sum.set_many(idx, pri**self.alpha)
        self._max.set_many(idx, pri)
        for i, p in zip(idx, pri):
            if hasattr(self._items[i], "priority"):
                self._items[i].priority = float(p)

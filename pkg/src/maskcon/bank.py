"""Fixed-capacity FIFO memory bank of key projections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotNormalized, ShapeMismatch
from .numerics import as_matrix, row_norms

UNIT_TOL = 1e-9


@dataclass(frozen=True)
class BankSnapshot:
    """Filled bank entries, oldest first. Arrays are copies."""

    projections: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return self.projections.shape[0]


class MemoryBank:
    """Ring buffer of unit-norm projections with their coarse labels and dataset ids.

    Pushing past capacity evicts the oldest entries first.
    """

    def __init__(self, capacity: int, dim: int = 128):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._proj = np.zeros((capacity, dim))
        self._labels = np.zeros(capacity, dtype=np.int64)
        self._ids = np.full(capacity, -1, dtype=np.int64)
        self.fill = 0
        self.head = 0  # next write position

    def push(self, projections, labels, ids=None) -> "MemoryBank":
        projections = as_matrix(projections)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        n = projections.shape[0]
        ids = np.full(n, -1, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64).reshape(-1)
        if projections.shape[1] != self.dim or labels.shape[0] != n or ids.shape[0] != n:
            raise ShapeMismatch(
                f"push of {projections.shape} with {labels.shape[0]} labels into a {self.dim}-dim bank"
            )
        if n and np.any(np.abs(row_norms(projections) - 1.0) > UNIT_TOL):
            raise NotNormalized("memory bank rows must be unit-norm")
        if n >= self.capacity:
            # only the newest `capacity` rows can survive
            projections, labels, ids = projections[-self.capacity:], labels[-self.capacity:], ids[-self.capacity:]
            n = self.capacity
        pos = (self.head + np.arange(n)) % self.capacity
        self._proj[pos] = projections
        self._labels[pos] = labels
        self._ids[pos] = ids
        self.head = int((self.head + n) % self.capacity)
        self.fill = min(self.fill + n, self.capacity)
        return self

    def snapshot(self) -> BankSnapshot:
        if self.fill < self.capacity:
            order = np.arange(self.fill)
        else:
            order = (self.head + np.arange(self.capacity)) % self.capacity
        return BankSnapshot(self._proj[order].copy(), self._labels[order].copy(), self._ids[order].copy())

    def __len__(self):
        return self.fill


def empty_snapshot(dim: int = 128) -> BankSnapshot:
    return BankSnapshot(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

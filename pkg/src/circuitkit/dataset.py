"""Paired clean/corrupted prompt sets."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PairingError, UsageError
from .metrics import MetricSpec


@dataclass
class TaskDataset:
    """Clean prompts, their corrupted partners and where to measure.

    ``positions`` (n, P) index the output positions the metric reads.
    ``corrupt_pos_ids`` optionally replaces the positional ids used when
    caching the corrupted run (randomised positions for compiled tasks).
    """

    clean: np.ndarray
    corrupted: np.ndarray
    positions: np.ndarray
    metric: MetricSpec = field(default_factory=MetricSpec)
    corrupt_pos_ids: np.ndarray | None = None
    task: str = ""

    def __post_init__(self):
        self.clean = np.asarray(self.clean, dtype=np.int64)
        self.corrupted = np.asarray(self.corrupted, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.clean.ndim != 2:
            raise UsageError("clean prompts must be a 2-D array (n, T)")
        if self.clean.shape != self.corrupted.shape:
            raise PairingError(f"clean {self.clean.shape} and corrupted {self.corrupted.shape} differ in shape")
        if self.positions.ndim != 2 or self.positions.shape[0] != len(self.clean):
            raise PairingError("positions must have shape (n, P)")
        if self.positions.size and (self.positions.min() < 0 or self.positions.max() >= self.clean.shape[1]):
            raise UsageError("measured position out of range")
        if self.corrupt_pos_ids is not None:
            self.corrupt_pos_ids = np.asarray(self.corrupt_pos_ids, dtype=np.int64)
            if self.corrupt_pos_ids.shape != self.clean.shape:
                raise PairingError("corrupt_pos_ids must match the prompt shape")

    def __len__(self):
        return len(self.clean)

    def subset(self, idx) -> "TaskDataset":
        idx = np.asarray(idx)
        return TaskDataset(
            self.clean[idx],
            self.corrupted[idx],
            self.positions[idx],
            self.metric.subset(idx),
            None if self.corrupt_pos_ids is None else self.corrupt_pos_ids[idx],
            self.task,
        )

    def split(self, n_first: int) -> tuple["TaskDataset", "TaskDataset"]:
        n = len(self)
        if not 0 < n_first < n:
            raise UsageError(f"cannot split {n} examples at {n_first}")
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, n))

    def with_metric(self, metric: MetricSpec) -> "TaskDataset":
        return TaskDataset(self.clean, self.corrupted, self.positions, metric, self.corrupt_pos_ids, self.task)

    def to_dict(self) -> dict:
        d = {
            "task": self.task,
            "clean": self.clean.tolist(),
            "corrupted": self.corrupted.tolist(),
            "positions": self.positions.tolist(),
            "metric": self.metric.to_dict(),
        }
        if self.corrupt_pos_ids is not None:
            d["corrupt_pos_ids"] = self.corrupt_pos_ids.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskDataset":
        cp = d.get("corrupt_pos_ids")
        return cls(
            np.asarray(d["clean"]),
            np.asarray(d["corrupted"]),
            np.asarray(d["positions"]),
            MetricSpec.from_dict(d.get("metric", {"kind": "kl"})),
            None if cp is None else np.asarray(cp),
            d.get("task", ""),
        )

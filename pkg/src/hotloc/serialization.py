"""Z-order window partitioning of octree levels and its inverse."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BoundingRegion
from .octree import OctreeLevel, unit_to_physical


@dataclass(frozen=True)
class WindowPartition:
    """Octant ``i`` (in key order) sits in window ``i // k`` at slot ``i % k``.

    Only the tail of the last window is padding.
    """

    level_depth: int
    k: int
    n: int

    @property
    def w(self) -> int:
        return -(-self.n // self.k)

    @property
    def pad_count(self) -> int:
        return self.w * self.k - self.n

    @property
    def slot_of(self) -> np.ndarray:
        i = np.arange(self.n)
        return np.stack([i // self.k, i % self.k], axis=1)

    @property
    def valid_mask(self) -> np.ndarray:
        return (np.arange(self.w * self.k) < self.n).reshape(self.w, self.k)

    @property
    def gather_index(self) -> np.ndarray:
        """``[w, k]`` octant index per slot, ``-1`` for padding."""
        idx = np.arange(self.w * self.k)
        return np.where(idx < self.n, idx, -1).reshape(self.w, self.k)

    @property
    def valid_counts(self) -> np.ndarray:
        return self.valid_mask.sum(axis=1)


def serialize(level: OctreeLevel, k: int) -> WindowPartition:
    if k < 2:
        raise ValueError(f"window size must be >= 2, got {k}")
    if len(level) == 0:
        raise ValueError("cannot serialize an empty level")
    return WindowPartition(level.depth, int(k), len(level))


def to_windows(partition: WindowPartition, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Per-octant ``[N, ...]`` values -> ``[w, k, ...]`` with ``fill`` in padded slots."""
    values = np.asarray(values)
    if len(values) != partition.n:
        raise ValueError(f"expected {partition.n} rows, got {len(values)}")
    out = np.full((partition.w * partition.k,) + values.shape[1:], fill, dtype=values.dtype)
    out[: partition.n] = values
    return out.reshape((partition.w, partition.k) + values.shape[1:])


def unserialize(partition: WindowPartition, windowed: np.ndarray) -> np.ndarray:
    windowed = np.asarray(windowed)
    if windowed.shape[:2] != (partition.w, partition.k):
        raise ValueError(f"expected leading shape {(partition.w, partition.k)}, got {windowed.shape[:2]}")
    slots = partition.slot_of
    return windowed[slots[:, 0], slots[:, 1]]


def window_dump(partition: WindowPartition, level: OctreeLevel) -> str:
    """Lines of ``window_index code_hex cx cy cz`` (unit-cube centroids)."""
    lines = []
    for (win, _), code, c in zip(partition.slot_of, level.keys, level.centroid):
        lines.append(f"{win} {int(code):x} {c[0]:.17g} {c[1]:.17g} {c[2]:.17g}")
    return "\n".join(lines) + "\n"


def window_radial_spread(partition: WindowPartition, level: OctreeLevel, region: BoundingRegion) -> float:
    """Mean over windows of (max - min) horizontal range of octant centroids, meters."""
    xyz = unit_to_physical(level.centroid, region)
    r = np.hypot(xyz[:, 0], xyz[:, 1])
    win = partition.slot_of[:, 0]
    hi = np.full(partition.w, -np.inf)
    lo = np.full(partition.w, np.inf)
    np.maximum.at(hi, win, r)
    np.minimum.at(lo, win, r)
    return float(np.mean(hi - lo))

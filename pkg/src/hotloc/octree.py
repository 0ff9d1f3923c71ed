"""Sparse octree pyramids over Morton-coded cells."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import BoundingRegion, CoordMode, PointCloud, normalize_to_unit

MAX_DEPTH = 20

# (dz, dy, dx) in lexicographic order; index 13 is the center tap
OFFSETS = np.array([(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.int64)
CENTER = 13


class OctreeConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OctKey:
    code: int
    depth: int

    def __post_init__(self):
        if not 0 <= self.depth <= MAX_DEPTH:
            raise ValueError(f"depth {self.depth} outside [0, {MAX_DEPTH}]")
        if not 0 <= self.code < 8**self.depth:
            raise ValueError(f"code {self.code} out of range for depth {self.depth}")


def _spread(v: np.ndarray) -> np.ndarray:
    """Insert two zero bits between each of the low 21 bits."""
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def encode_array(ijk: np.ndarray) -> np.ndarray:
    """Vectorized Morton codes for integer coordinates ``[..., 3]`` (x lowest)."""
    ijk = np.asarray(ijk)
    code = _spread(ijk[..., 0]) | (_spread(ijk[..., 1]) << np.uint64(1)) | (_spread(ijk[..., 2]) << np.uint64(2))
    return code.astype(np.int64)


def decode_array(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes).astype(np.uint64)
    return np.stack([_compact(codes), _compact(codes >> np.uint64(1)), _compact(codes >> np.uint64(2))], axis=-1).astype(
        np.int64
    )


def morton_encode(ix: int, iy: int, iz: int, depth: int) -> OctKey:
    if not 0 <= depth <= MAX_DEPTH:
        raise ValueError(f"depth {depth} outside [0, {MAX_DEPTH}]")
    side = 1 << depth
    for name, v in (("ix", ix), ("iy", iy), ("iz", iz)):
        if not 0 <= v < side:
            raise ValueError(f"{name}={v} outside [0, {side}) at depth {depth}")
    return OctKey(int(encode_array(np.array([ix, iy, iz]))), depth)


def morton_decode(key: OctKey) -> tuple[int, int, int]:
    x, y, z = decode_array(np.array([key.code]))[0]
    return int(x), int(y), int(z)


# ---------------------------------------------------------------------------
# levels and pyramids


@dataclass
class OctreeLevel:
    """Occupied octants at one depth, sorted by Morton code.

    ``cov_upper`` columns are ``(xx, yy, zz, xy, xz, yz)`` of the sample
    covariance (``n - 1`` denominator, zero for single-point octants), all in
    unit-cube coordinates.
    """

    depth: int
    keys: np.ndarray
    count: np.ndarray
    centroid: np.ndarray
    cov_upper: np.ndarray

    def __len__(self) -> int:
        return len(self.keys)

    @cached_property
    def key_to_index(self) -> dict[int, int]:
        return {int(k): i for i, k in enumerate(self.keys)}

    @cached_property
    def coords(self) -> np.ndarray:
        return decode_array(self.keys)

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        """Indices of ``codes`` in this level, ``-1`` where unoccupied."""
        codes = np.asarray(codes, dtype=np.int64)
        pos = np.searchsorted(self.keys, codes)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        return np.where(self.keys[pos_c] == codes, pos_c, -1)


@dataclass
class OctreePyramid:
    coord_mode: CoordMode
    region: BoundingRegion
    levels: list[OctreeLevel]  # depths d, d-1, ..., d-L
    parent_of: list[np.ndarray]  # parent_of[i]: index into levels[i + 1] per octant of levels[i]
    child_start: list[np.ndarray] = field(default_factory=list)
    n_dropped: int = 0

    @property
    def depth(self) -> int:
        return self.levels[0].depth

    def children_of(self, level: int, idx: int) -> np.ndarray:
        """Indices into ``levels[level]`` of the children of octant ``idx`` of ``levels[level + 1]``."""
        start = self.child_start[level]
        return np.arange(start[idx], start[idx + 1])


def _cov_upper(c: np.ndarray) -> np.ndarray:
    """``[N, 3, 3] -> [N, 6]`` in ``(xx, yy, zz, xy, xz, yz)`` order."""
    return np.stack([c[:, 0, 0], c[:, 1, 1], c[:, 2, 2], c[:, 0, 1], c[:, 0, 2], c[:, 1, 2]], axis=1)


def _cov_full(u: np.ndarray) -> np.ndarray:
    xx, yy, zz, xy, xz, yz = u.T
    return np.stack([np.stack([xx, xy, xz], -1), np.stack([xy, yy, yz], -1), np.stack([xz, yz, zz], -1)], axis=1)


def _leaf_level(unit: np.ndarray, depth: int) -> OctreeLevel:
    side = 1 << depth
    ijk = np.minimum(np.floor(unit * side).astype(np.int64), side - 1)
    codes = encode_array(ijk)
    order = np.lexsort((unit[:, 2], unit[:, 1], unit[:, 0], codes))
    codes, pts = codes[order], unit[order]
    starts = np.flatnonzero(np.r_[True, codes[1:] != codes[:-1]])
    count = np.diff(np.r_[starts, len(codes)])
    centroid = np.add.reduceat(pts, starts, axis=0) / count[:, None]
    # second pass: deviations from each octant's own centroid
    dev = pts - np.repeat(centroid, count, axis=0)
    outer = dev[:, :, None] * dev[:, None, :]
    scatter = np.add.reduceat(outer, starts, axis=0)
    denom = np.maximum(count - 1, 1)[:, None, None]
    cov = np.where((count > 1)[:, None, None], scatter / denom, 0.0)
    return OctreeLevel(depth, codes[starts], count.astype(np.int64), centroid, _cov_upper(cov))


def _coarsen(level: OctreeLevel) -> tuple[OctreeLevel, np.ndarray, np.ndarray]:
    """Merge siblings; returns the parent level, child->parent map and child offsets."""
    parents = level.keys >> 3
    starts = np.flatnonzero(np.r_[True, parents[1:] != parents[:-1]])
    parent_of = np.cumsum(np.r_[False, parents[1:] != parents[:-1]]).astype(np.int64)
    n_i = level.count.astype(np.float64)
    count = np.add.reduceat(level.count, starts)
    n = count.astype(np.float64)
    centroid = np.add.reduceat(level.centroid * n_i[:, None], starts, axis=0) / n[:, None]
    d = level.centroid - centroid[parent_of]
    within = _cov_full(level.cov_upper) * (n_i - 1.0)[:, None, None]
    between = d[:, :, None] * d[:, None, :] * n_i[:, None, None]
    scatter = np.add.reduceat(within + between, starts, axis=0)
    cov = np.where((count > 1)[:, None, None], scatter / np.maximum(n - 1.0, 1.0)[:, None, None], 0.0)
    coarse = OctreeLevel(level.depth - 1, parents[starts], count, centroid, _cov_upper(cov))
    return coarse, parent_of, np.r_[starts, len(parents)].astype(np.int64)


def build_from_unit(unit: np.ndarray, depth: int, levels: int, coord_mode: CoordMode, region: BoundingRegion,
                    n_dropped: int = 0) -> OctreePyramid:
    if not 1 <= depth <= MAX_DEPTH:
        raise OctreeConfigError(f"depth {depth} outside [1, {MAX_DEPTH}]")
    if levels < 0 or depth - levels < 1:
        raise OctreeConfigError(f"need depth - levels >= 1, got depth={depth} levels={levels}")
    if len(unit) == 0:
        raise OctreeConfigError("cannot build an octree from an empty cloud")
    lv = [_leaf_level(np.asarray(unit, dtype=np.float64), depth)]
    parent_of, child_start = [], []
    for _ in range(levels):
        coarse, p_of, c_start = _coarsen(lv[-1])
        lv.append(coarse)
        parent_of.append(p_of)
        child_start.append(c_start)
    return OctreePyramid(coord_mode, region, lv, parent_of, child_start, n_dropped)


def build_pyramid(pc: PointCloud, region: BoundingRegion, depth: int, levels: int) -> OctreePyramid:
    """Quantize ``pc`` into a depth-``depth`` octree and ``levels`` coarser levels."""
    if levels < 0 or depth - levels < 1:
        raise OctreeConfigError(f"need depth - levels >= 1, got depth={depth} levels={levels}")
    unit, dropped = normalize_to_unit(pc, region)
    return build_from_unit(unit, depth, levels, region.mode, region, dropped)


# ---------------------------------------------------------------------------
# neighborhoods


def neighbor_table(level: OctreeLevel, coord_mode: CoordMode) -> np.ndarray:
    """``[N, 27]`` indices of same-depth octants at each offset (``-1`` if empty).

    Column ``CENTER`` is the octant itself. In cylindrical mode the theta
    axis (the second coordinate) wraps; rho and z never do.
    """
    side = 1 << level.depth
    shifted = level.coords[:, None, :] + OFFSETS[None, :, :]
    if coord_mode == "cylindrical":
        shifted[..., 1] %= side
    inside = np.all((shifted >= 0) & (shifted < side), axis=-1)
    codes = encode_array(np.clip(shifted, 0, side - 1))
    idx = level.lookup(codes)
    return np.where(inside, idx, -1)


def neighbors(level: OctreeLevel, idx: int, coord_mode: CoordMode) -> list[int]:
    """Distinct occupied same-depth neighbors of octant ``idx`` (itself excluded)."""
    side = 1 << level.depth
    base = np.asarray(morton_decode(OctKey(int(level.keys[idx]), level.depth)))
    found: set[int] = set()
    for off in OFFSETS:
        if not off.any():
            continue
        c = base + off
        if coord_mode == "cylindrical":
            c[1] %= side
        if np.any(c < 0) or np.any(c >= side):
            continue
        j = level.key_to_index.get(int(encode_array(c)))
        if j is not None and j != idx:
            found.add(j)
    return sorted(found)


# ---------------------------------------------------------------------------
# cell geometry


@dataclass(frozen=True)
class CellBounds:
    """Physical extent of an octant.

    Cartesian cells are boxes ``lower..upper`` per axis. Cylindrical cells
    are annular sectors with ``lower``/``upper`` holding (rho, theta, z).
    """

    mode: CoordMode
    lower: tuple[float, float, float]
    upper: tuple[float, float, float]

    @property
    def theta_span(self) -> float:
        return self.upper[1] - self.lower[1]

    def arc_length(self, rho: float | None = None) -> float:
        if self.mode != "cylindrical":
            raise ValueError("arc length is defined for cylindrical cells only")
        return (self.upper[0] if rho is None else rho) * self.theta_span

    @property
    def rho_center(self) -> float:
        return 0.5 * (self.lower[0] + self.upper[0])


def octant_cell_bounds(key: OctKey, region: BoundingRegion, coord_mode: CoordMode | None = None) -> CellBounds:
    mode = coord_mode or region.mode
    ijk = np.asarray(morton_decode(key), dtype=np.float64)
    side = float(1 << key.depth)
    lo_u, hi_u = ijk / side, (ijk + 1.0) / side
    if mode == "cartesian":
        lo, hi = np.asarray(region.lower), np.asarray(region.upper)
        a, b = lo + lo_u * (hi - lo), lo + hi_u * (hi - lo)
    else:
        scale = np.array([region.rho_max, 2.0 * np.pi, region.z_max - region.z_min])
        offset = np.array([0.0, -np.pi, region.z_min])
        a, b = offset + lo_u * scale, offset + hi_u * scale
    return CellBounds(mode, tuple(map(float, a)), tuple(map(float, b)))


def unit_to_physical(unit: np.ndarray, region: BoundingRegion) -> np.ndarray:
    """Inverse of :func:`normalize_to_unit` for in-region coordinates (Cartesian xyz out)."""
    u = np.asarray(unit, dtype=np.float64)
    if region.mode == "cartesian":
        lo, hi = np.asarray(region.lower), np.asarray(region.upper)
        return lo + u * (hi - lo)
    rho = u[..., 0] * region.rho_max
    theta = u[..., 1] * 2.0 * np.pi - np.pi
    z = region.z_min + u[..., 2] * (region.z_max - region.z_min)
    return np.stack([rho * np.cos(theta), rho * np.sin(theta), z], axis=-1)


def dump_octree(pyramid: OctreePyramid) -> str:
    """One line per octant: ``depth code_hex count cx cy cz`` (unit coords)."""
    lines = []
    for lvl in pyramid.levels:
        for k, n, c in zip(lvl.keys, lvl.count, lvl.centroid):
            lines.append(f"{lvl.depth} {int(k):x} {int(n)} {c[0]:.17g} {c[1]:.17g} {c[2]:.17g}")
    return "\n".join(lines) + "\n"

"""Binary file formats: point clouds (HOPC), descriptors (HODC) and weights (HOWT).

All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .geometry import PointCloud, Pose

CLOUD_MAGIC = b"HOPC"
DESCRIPTOR_MAGIC = b"HODC"
WEIGHT_MAGIC = b"HOWT"
VERSION = 1


class FormatError(ValueError):
    """Malformed or unreadable file."""


class IntegrityError(FormatError):
    """Checksum mismatch."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# point clouds


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_cloud(path: str | Path, pc: PointCloud) -> None:
    path = Path(path)
    pts = np.ascontiguousarray(pc.points, dtype="<f8")
    path.write_bytes(CLOUD_MAGIC + struct.pack("<IQ", VERSION, len(pts)) + pts.tobytes())
    meta = {"source_id": pc.source_id, "translation": list(pc.pose.translation), "rotation": list(pc.pose.rotation)}
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")


def read_cloud(path: str | Path) -> PointCloud:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != CLOUD_MAGIC:
        raise FormatError(f"{path}: not a point cloud file")
    version, count = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(raw) != 16 + count * 24:
        raise FormatError(f"{path}: expected {count} points, file size is {len(raw)} bytes")
    pts = np.frombuffer(raw, dtype="<f8", offset=16).reshape(count, 3).astype(np.float64)
    source_id, pose = path.stem, Pose()
    side = sidecar_path(path)
    if side.exists():
        try:
            meta = json.loads(side.read_text())
            source_id = meta.get("source_id", source_id)
            pose = Pose(tuple(meta.get("translation", (0.0, 0.0, 0.0))), tuple(meta.get("rotation", (1.0, 0.0, 0.0, 0.0))))
        except (json.JSONDecodeError, ValueError, TypeError) as exc:
            raise FormatError(f"{side}: bad sidecar ({exc})") from exc
    return PointCloud(pts, source_id, pose)


def read_csv_cloud(path: str | Path, source_id: str | None = None) -> PointCloud:
    try:
        pts = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if pts.shape[1] != 3:
        raise FormatError(f"{path}: expected 3 columns, got {pts.shape[1]}")
    return PointCloud(pts, source_id or Path(path).stem)


def load_any_cloud(path: str | Path) -> PointCloud:
    return read_csv_cloud(path) if str(path).lower().endswith(".csv") else read_cloud(path)


# ---------------------------------------------------------------------------
# descriptors


def write_descriptors(path: str | Path, ids: Iterable[int], descriptors: np.ndarray) -> None:
    desc = np.ascontiguousarray(descriptors, dtype="<f8")
    ids = [int(i) for i in ids]
    if desc.ndim != 2 or len(ids) != len(desc):
        raise ValueError("need one id per descriptor row")
    parts = [DESCRIPTOR_MAGIC, struct.pack("<IIQ", VERSION, desc.shape[1], len(desc))]
    for i, row in zip(ids, desc):
        parts.append(struct.pack("<Q", i))
        parts.append(row.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_descriptors(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != DESCRIPTOR_MAGIC:
        raise FormatError(f"{path}: not a descriptor file")
    version, dim, count = struct.unpack_from("<IIQ", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    rec = 8 + 8 * dim
    if len(raw) != 20 + count * rec:
        raise FormatError(f"{path}: truncated descriptor file")
    ids = np.empty(count, dtype=np.int64)
    desc = np.empty((count, dim))
    for r in range(count):
        off = 20 + r * rec
        ids[r] = struct.unpack_from("<Q", raw, off)[0]
        desc[r] = np.frombuffer(raw, dtype="<f8", count=dim, offset=off + 8)
    return ids, desc


# ---------------------------------------------------------------------------
# weights


def write_weights(path: str | Path, config: Mapping, params: Mapping[str, np.ndarray]) -> None:
    """Magic, version, canonical-JSON config block, named f64 tensors, CRC32 trailer."""
    cfg = canonical_json(config).encode()
    parts = [WEIGHT_MAGIC, struct.pack("<IQ", VERSION, len(cfg)), cfg, struct.pack("<Q", len(params))]
    for name, value in params.items():
        arr = np.ascontiguousarray(getattr(value, "data", value), dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_weights(path: str | Path) -> tuple[dict, str, dict[str, np.ndarray]]:
    """Returns ``(config, config_text, tensors)``; raises :class:`IntegrityError` on CRC mismatch."""
    raw = Path(path).read_bytes()
    if len(raw) < 28 or raw[:4] != WEIGHT_MAGIC:
        raise FormatError(f"{path}: not a weight file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError(f"{path}: CRC32 mismatch (file corrupted or truncated)")
    try:
        version, n_cfg = struct.unpack_from("<IQ", body, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        off = 16
        cfg_text = body[off : off + n_cfg].decode()
        off += n_cfg
        (count,) = struct.unpack_from("<Q", body, off)
        off += 8
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            name = body[off + 2 : off + 2 + nlen].decode()
            off += 2 + nlen
            (ndim,) = struct.unpack_from("<I", body, off)
            shape = struct.unpack_from(f"<{ndim}Q", body, off + 4)
            off += 4 + 8 * ndim
            size = int(np.prod(shape))
            if name in tensors:
                raise FormatError(f"{path}: duplicate tensor {name!r}")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
        if off != len(body):
            raise FormatError(f"{path}: {len(body) - off} trailing bytes")
        return json.loads(cfg_text), cfg_text, tensors
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed weight file ({exc})") from exc

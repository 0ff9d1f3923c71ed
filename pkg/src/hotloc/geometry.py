"""Point clouds, coordinate transforms, downsampling, augmentation and a
synthetic spinning-lidar forest generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

CoordMode = Literal["cartesian", "cylindrical"]


class EmptyCloudError(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    """Translation in meters and a unit quaternion ``(w, x, y, z)``."""

    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError(f"pose rotation must be a unit quaternion, got {self.rotation}")
        if len(self.translation) != 3 or not np.all(np.isfinite(self.translation)):
            raise ValueError(f"bad pose translation {self.translation}")

    @classmethod
    def from_xy_yaw(cls, x: float, y: float, yaw: float = 0.0, z: float = 0.0) -> "Pose":
        return cls((float(x), float(y), float(z)), (math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)))

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.rotation
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def to_local(self, world: np.ndarray) -> np.ndarray:
        return (np.asarray(world) - np.asarray(self.translation)) @ self.matrix()

    def to_world(self, local: np.ndarray) -> np.ndarray:
        return np.asarray(local) @ self.matrix().T + np.asarray(self.translation)

    def horizontal_distance(self, other: "Pose") -> float:
        return math.hypot(self.translation[0] - other.translation[0], self.translation[1] - other.translation[1])


@dataclass
class PointCloud:
    points: np.ndarray
    source_id: str = ""
    pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise EmptyCloudError(f"point cloud {self.source_id!r} is empty")
        if not np.all(np.isfinite(self.points)):
            raise ValueError(f"point cloud {self.source_id!r} has non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.source_id, self.pose)


@dataclass(frozen=True)
class BoundingRegion:
    mode: CoordMode = "cylindrical"
    lower: tuple[float, float, float] = (-30.0, -30.0, -2.0)
    upper: tuple[float, float, float] = (30.0, 30.0, 14.0)
    rho_max: float = 30.0
    z_min: float = -2.0
    z_max: float = 14.0

    def __post_init__(self):
        if self.mode not in ("cartesian", "cylindrical"):
            raise ValueError(f"unknown region mode {self.mode!r}")
        if self.mode == "cartesian":
            if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
                raise ValueError("region max must exceed min on every axis")
        else:
            if self.rho_max <= 0 or self.z_max <= self.z_min:
                raise ValueError("cylindrical region needs rho_max > 0 and z_max > z_min")

    @classmethod
    def cartesian(cls, lower, upper) -> "BoundingRegion":
        return cls("cartesian", tuple(map(float, lower)), tuple(map(float, upper)))

    @classmethod
    def cylindrical(cls, rho_max: float, z_min: float, z_max: float) -> "BoundingRegion":
        return cls("cylindrical", rho_max=float(rho_max), z_min=float(z_min), z_max=float(z_max))

    @classmethod
    def around_sensor(cls, mode: CoordMode, radius: float, z_min: float, z_max: float) -> "BoundingRegion":
        """Region of the given mode covering a ``radius``-meter submap."""
        if mode == "cartesian":
            return cls.cartesian((-radius, -radius, z_min), (radius, radius, z_max))
        return cls.cylindrical(radius, z_min, z_max)


def to_cylindrical(points) -> np.ndarray:
    """``(x, y, z) -> (rho, theta, z)`` with theta in ``[-pi, pi)``."""
    p = np.asarray(points, dtype=np.float64)
    rho = np.hypot(p[..., 0], p[..., 1])
    theta = np.arctan2(p[..., 1], p[..., 0])
    theta = np.where(theta >= np.pi, -np.pi, theta)
    return np.stack([rho, theta, p[..., 2]], axis=-1)


def from_cylindrical(cyl) -> np.ndarray:
    c = np.asarray(cyl, dtype=np.float64)
    return np.stack([c[..., 0] * np.cos(c[..., 1]), c[..., 0] * np.sin(c[..., 1]), c[..., 2]], axis=-1)


def normalize_to_unit(pc: PointCloud, region: BoundingRegion) -> tuple[np.ndarray, int]:
    """Map in-region points to ``[0, 1)^3``; returns ``(coords, n_dropped)``.

    Points outside the half-open region are dropped rather than clamped.
    """
    p = pc.points
    if region.mode == "cartesian":
        lo = np.asarray(region.lower)
        hi = np.asarray(region.upper)
        u = (p - lo) / (hi - lo)
        keep = np.all((p >= lo) & (p < hi), axis=1)
    else:
        cyl = to_cylindrical(p)
        u = np.stack(
            [
                cyl[:, 0] / region.rho_max,
                (cyl[:, 1] + np.pi) / (2.0 * np.pi),
                (cyl[:, 2] - region.z_min) / (region.z_max - region.z_min),
            ],
            axis=1,
        )
        keep = (cyl[:, 0] < region.rho_max) & (cyl[:, 2] >= region.z_min) & (cyl[:, 2] < region.z_max)
    # rounding can push a value just under the bound up to 1.0
    keep &= np.all((u >= 0.0) & (u < 1.0), axis=1)
    if not keep.any():
        raise EmptyCloudError(f"all {len(p)} points of {pc.source_id!r} fall outside the region")
    return u[keep], int(len(p) - keep.sum())


def voxel_downsample(pc: PointCloud, voxel: float) -> PointCloud:
    """One centroid per occupied voxel, ordered by integer voxel key."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    p = pc.points
    keys = np.floor(p / voxel).astype(np.int64)
    order = np.lexsort((p[:, 2], p[:, 1], p[:, 0], keys[:, 2], keys[:, 1], keys[:, 0]))
    p, keys = p[order], keys[order]
    starts = np.flatnonzero(np.r_[True, np.any(keys[1:] != keys[:-1], axis=1)])
    counts = np.diff(np.r_[starts, len(p)])
    centroids = np.add.reduceat(p, starts, axis=0) / counts[:, None]
    return pc.with_points(centroids)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class Landmark:
    """Vertical cylinder ("tree trunk") standing on the ground plane."""

    x: float
    y: float
    radius: float
    height: float


@dataclass(frozen=True)
class SceneSpec:
    landmarks: tuple[Landmark, ...]
    ring_points: tuple[int, ...] = (1000, 250)
    ring_radii: tuple[float, ...] = (5.0, 20.0)
    noise_sigma: float = 0.02
    seed: int = 0
    landmark_density: float = 40.0
    view_radius: float = 30.0

    def __post_init__(self):
        if len(self.landmarks) < 4:
            raise ValueError("a scene needs at least 4 landmarks")
        if any(lm.radius <= 0 or lm.height <= 0 for lm in self.landmarks):
            raise ValueError("landmark radius and height must be positive")
        if len(self.ring_points) != len(self.ring_radii) or any(r <= 0 for r in self.ring_radii):
            raise ValueError("ring profile needs matching counts and positive radii")
        if self.noise_sigma < 0 or self.view_radius <= 0:
            raise ValueError("bad noise sigma or view radius")


def random_forest(
    seed: int,
    extent: float,
    n_landmarks: int,
    radius_range=(0.2, 0.8),
    height_range=(3.0, 12.0),
    **kwargs,
) -> SceneSpec:
    """Scene with ``n_landmarks`` trunks scattered uniformly over ``[-extent, extent]^2``."""
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-extent, extent, size=(n_landmarks, 2))
    radii = rng.uniform(*radius_range, size=n_landmarks)
    heights = rng.uniform(*height_range, size=n_landmarks)
    landmarks = tuple(Landmark(float(a), float(b), float(r), float(h)) for (a, b), r, h in zip(xy, radii, heights))
    return SceneSpec(landmarks, seed=seed, **kwargs)


def two_ring_scene(seed: int = 0, noise_sigma: float = 0.05) -> SceneSpec:
    """Dense near ring and sparse far ring around the origin; landmarks parked out of view."""
    far = tuple(Landmark(100.0 + 10.0 * i, 100.0, 0.3, 5.0) for i in range(4))
    return SceneSpec(far, ring_points=(1000, 250), ring_radii=(5.0, 20.0), noise_sigma=noise_sigma, seed=seed)


def _pose_rng(scene: SceneSpec, pose: Pose, profile: str) -> np.random.Generator:
    bits = np.asarray(pose.translation + pose.rotation, dtype=np.float64).view(np.uint64)
    entropy = [scene.seed & 0xFFFFFFFF, 1 if profile == "aerial" else 0] + [int(b) for b in bits]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def synth_submap(
    scene: SceneSpec,
    pose: Pose,
    sensor_profile: Literal["ground", "aerial"] = "ground",
    source_id: str = "",
) -> PointCloud:
    """Render the scene around ``pose`` into the sensor's local frame.

    Ground: one ring of ground returns per ring entry (evenly spaced with a
    random phase) plus the sensor-facing half of every trunk in view, with
    point density falling off with range. Aerial: trunk tops and the upper
    half of each trunk's lateral surface only.
    """
    if sensor_profile not in ("ground", "aerial"):
        raise ValueError(f"unknown sensor profile {sensor_profile!r}")
    rng = _pose_rng(scene, pose, sensor_profile)
    cx, cy, cz = pose.translation
    chunks = []

    if sensor_profile == "ground":
        for n, r in zip(scene.ring_points, scene.ring_radii):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            ang = phase + 2.0 * np.pi * np.arange(n) / n
            chunks.append(np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang), np.zeros(n)], axis=1))

    for lm in scene.landmarks:
        dist = math.hypot(lm.x - cx, lm.y - cy)
        if dist - lm.radius >= scene.view_radius:
            continue
        facing = math.atan2(cy - lm.y, cx - lm.x)
        if sensor_profile == "ground":
            area = math.pi * lm.radius * lm.height
            n = max(1, int(round(scene.landmark_density * area * 10.0 / max(dist, 10.0))))
            ang = facing + rng.uniform(-np.pi / 2, np.pi / 2, n)
            z = rng.uniform(0.0, lm.height, n)
        else:
            area = 2.0 * math.pi * lm.radius * lm.height * 0.5
            n = max(1, int(round(scene.landmark_density * area)))
            ang = rng.uniform(-np.pi, np.pi, n)
            # quadratic bias toward the top, lower half occluded
            z = lm.height * (0.5 + 0.5 * np.sqrt(rng.uniform(0.0, 1.0, n)))
            n_top = max(1, int(round(scene.landmark_density * math.pi * lm.radius**2)))
            rr = lm.radius * np.sqrt(rng.uniform(0.0, 1.0, n_top))
            ta = rng.uniform(-np.pi, np.pi, n_top)
            chunks.append(np.stack([lm.x + rr * np.cos(ta), lm.y + rr * np.sin(ta), np.full(n_top, lm.height)], axis=1))
        chunks.append(np.stack([lm.x + lm.radius * np.cos(ang), lm.y + lm.radius * np.sin(ang), z], axis=1))

    world = np.concatenate(chunks, axis=0)
    if scene.noise_sigma > 0:
        world = world + rng.normal(0.0, scene.noise_sigma, world.shape)
    local = pose.to_local(world)
    local = local[np.hypot(local[:, 0], local[:, 1]) < scene.view_radius]
    return PointCloud(local, source_id, pose)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_x: bool = False
    flip_y: bool = False
    rotation: float = 0.0  # max |yaw| in radians
    translation: float = 0.0  # max |offset| per horizontal axis, meters
    jitter_sigma: float = 0.0
    block_size: float = 0.0  # edge of the removed horizontal square, meters
    block_prob: float = 0.0


def rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return np.asarray(points, dtype=np.float64) @ rot.T


def augment(pc: PointCloud, rng_seed: int, cfg: AugmentConfig) -> PointCloud:
    rng = np.random.default_rng(rng_seed)
    p = pc.points.copy()
    if cfg.flip_x and rng.random() < 0.5:
        p[:, 0] = -p[:, 0]
    if cfg.flip_y and rng.random() < 0.5:
        p[:, 1] = -p[:, 1]
    if cfg.rotation > 0:
        p = rotate_z(p, rng.uniform(-cfg.rotation, cfg.rotation))
    if cfg.translation > 0:
        p[:, :2] += rng.uniform(-cfg.translation, cfg.translation, 2)
    if cfg.jitter_sigma > 0:
        p = p + rng.normal(0.0, cfg.jitter_sigma, p.shape)
    if cfg.block_size > 0 and rng.random() < cfg.block_prob:
        center = p[rng.integers(len(p)), :2]
        inside = np.all(np.abs(p[:, :2] - center) < cfg.block_size / 2, axis=1)
        if inside.all():
            raise EmptyCloudError("block removal deleted every point")
        p = p[~inside]
    return pc.with_points(p)


import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hotloc.geometry import (
    AugmentConfig,
    BoundingRegion,
    EmptyCloudError,
    Landmark,
    PointCloud,
    Pose,
    SceneSpec,
    augment,
    from_cylindrical,
    normalize_to_unit,
    random_forest,
    rotate_z,
    synth_submap,
    to_cylindrical,
    two_ring_scene,
    voxel_downsample,
)


def far_landmarks(n=4):
    return tuple(Landmark(200.0 + 10 * i, 200.0, 0.5, 5.0) for i in range(n))


# --- to_cylindrical -------------------------------------------------------


@pytest.mark.parametrize(
    "p, expected",
    [
        ((1, 0, 0), (1, 0, 0)),
        ((0, 1, 5), (1, math.pi / 2, 5)),
        ((-1, -1, 0), (math.sqrt(2), -3 * math.pi / 4, 0)),
    ],
)
def test_to_cylindrical_examples(p, expected):
    np.testing.assert_allclose(to_cylindrical(p), expected, atol=1e-15)


def test_theta_range_is_half_open():
    # (-1, 0) sits on the branch cut: must map to -pi, never +pi
    assert to_cylindrical((-1.0, 0.0, 0.0))[1] == -math.pi
    theta = to_cylindrical(np.random.default_rng(0).normal(size=(1000, 3)))[:, 1]
    assert np.all(theta >= -math.pi) and np.all(theta < math.pi)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(1e-3, 1e3),
    st.floats(-math.pi, math.pi, exclude_max=True),
    st.floats(-100, 100),
)
def test_cylindrical_roundtrip(rho, theta, z):
    back = to_cylindrical(from_cylindrical((rho, theta, z)))
    assert abs(back[0] - rho) <= 1e-12 * max(1.0, rho)
    assert abs(back[2] - z) <= 1e-12
    dtheta = (back[1] - theta + math.pi) % (2 * math.pi) - math.pi
    assert abs(dtheta) <= 1e-12


# --- normalize_to_unit ----------------------------------------------------


def test_normalize_min_corner_is_origin():
    region = BoundingRegion.cartesian((-3, -2, -1), (3, 2, 1))
    unit, dropped = normalize_to_unit(PointCloud([[-3, -2, -1]]), region)
    np.testing.assert_array_equal(unit, [[0, 0, 0]])
    assert dropped == 0


def test_normalize_cartesian_midpoint():
    unit, _ = normalize_to_unit(PointCloud([[1, 1, 1]]), BoundingRegion.cartesian((0, 0, 0), (2, 2, 2)))
    np.testing.assert_allclose(unit, [[0.5, 0.5, 0.5]], atol=0)


def test_normalize_cylindrical_hand_value():
    # rho 3/30, theta (0 + pi) / 2pi, z (5 - 0) / 10
    unit, _ = normalize_to_unit(PointCloud([[3, 0, 5]]), BoundingRegion.cylindrical(30, 0, 10))
    np.testing.assert_allclose(unit, [[0.1, 0.5, 0.5]], atol=1e-15)


def test_normalize_drops_out_of_region_points():
    region = BoundingRegion.cartesian((0, 0, 0), (2, 2, 2))
    unit, dropped = normalize_to_unit(PointCloud([[1, 1, 1], [2, 1, 1], [-0.1, 0, 0]]), region)
    assert dropped == 2
    assert unit.shape == (1, 3)


def test_normalize_all_outside_raises():
    with pytest.raises(EmptyCloudError):
        normalize_to_unit(PointCloud([[50, 0, 0]]), BoundingRegion.cylindrical(30, 0, 10))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["cartesian", "cylindrical"]))
def test_normalized_coords_in_unit_cube(seed, mode):
    pts = np.random.default_rng(seed).uniform(-40, 40, size=(200, 3))
    pts[0] = (1.0, 1.0, 1.0)
    region = BoundingRegion.around_sensor(mode, 30, -5, 20)
    unit, dropped = normalize_to_unit(PointCloud(pts), region)
    assert np.all(unit >= 0) and np.all(unit < 1)
    assert len(unit) + dropped == len(pts)


def test_region_validation():
    with pytest.raises(ValueError):
        BoundingRegion.cartesian((0, 0, 0), (1, 0, 1))
    with pytest.raises(ValueError):
        BoundingRegion.cylindrical(0, 0, 1)
    with pytest.raises(ValueError):
        BoundingRegion.cylindrical(10, 5, 5)


def test_pointcloud_rejects_empty_and_nonfinite():
    with pytest.raises(EmptyCloudError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud([[0, np.nan, 0]])


def test_pose_requires_unit_quaternion():
    with pytest.raises(ValueError):
        Pose((0, 0, 0), (1, 1, 0, 0))


def test_pose_local_world_roundtrip():
    pose = Pose.from_xy_yaw(10, -4, 0.7, z=1.5)
    pts = np.random.default_rng(3).normal(size=(50, 3)) * 10
    np.testing.assert_allclose(pose.to_world(pose.to_local(pts)), pts, atol=1e-12)


# --- voxel_downsample -----------------------------------------------------


def test_voxel_single_point_identity():
    out = voxel_downsample(PointCloud([[0.3, -1.2, 4.0]]), 0.5)
    np.testing.assert_array_equal(out.points, [[0.3, -1.2, 4.0]])


def test_voxel_two_points_centroid():
    out = voxel_downsample(PointCloud([[0, 0, 0], [0.2, 0, 0]]), 1.0)
    np.testing.assert_allclose(out.points, [[0.1, 0, 0]], atol=1e-15)


def brute_voxel_buckets(points, voxel):
    buckets = {}
    for p in points:
        key = tuple(int(math.floor(c / voxel)) for c in p)
        buckets.setdefault(key, []).append(p)
    return {k: np.mean(v, axis=0) for k, v in buckets.items()}


def test_voxel_uniform_cube_has_eight_voxels():
    pts = np.random.default_rng(0).uniform(0, 1, size=(1000, 3))
    out = voxel_downsample(PointCloud(pts), 0.5)
    oracle = brute_voxel_buckets(pts, 0.5)
    assert len(out) == len(oracle) == 8
    for key, centroid in oracle.items():
        row = np.flatnonzero(np.all(np.floor(out.points / 0.5).astype(int) == key, axis=1))
        assert len(row) == 1
        np.testing.assert_allclose(out.points[row[0]], centroid, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 3.0))
def test_voxel_idempotent_and_order_free(seed, voxel):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-5, 5, size=(300, 3))
    once = voxel_downsample(PointCloud(pts), voxel)
    twice = voxel_downsample(once, voxel)
    np.testing.assert_array_equal(once.points, twice.points)
    shuffled = voxel_downsample(PointCloud(pts[rng.permutation(len(pts))]), voxel)
    np.testing.assert_array_equal(once.points, shuffled.points)


@pytest.mark.parametrize("cfg", [AugmentConfig(flip_x=True), AugmentConfig(flip_y=True)])
def test_voxel_counts_survive_grid_preserving_maps(cfg):
    pts = np.random.default_rng(5).uniform(-4, 4, size=(2000, 3))
    pc = PointCloud(pts)
    base = len(voxel_downsample(pc, 0.5))
    for seed in range(8):
        assert len(voxel_downsample(augment(pc, seed, cfg), 0.5)) == base
    rotated = pc.with_points(rotate_z(pts, math.pi))
    assert len(voxel_downsample(rotated, 0.5)) == base


# --- synth_submap ---------------------------------------------------------


def test_synth_is_deterministic():
    scene = random_forest(3, 60, 30)
    pose = Pose.from_xy_yaw(5, -3, 0.2)
    a = synth_submap(scene, pose, "ground")
    b = synth_submap(scene, pose, "ground")
    np.testing.assert_array_equal(a.points, b.points)
    c = synth_submap(scene, pose, "aerial")
    np.testing.assert_array_equal(c.points, synth_submap(scene, pose, "aerial").points)


def test_noise_free_landmark_points_on_cylinder():
    # one trunk in view; the other three are parked out of range
    trunk = Landmark(8.0, 3.0, 0.6, 7.0)
    scene = SceneSpec((trunk,) + far_landmarks(3), ring_points=(), ring_radii=(), noise_sigma=0.0)
    pose = Pose.from_xy_yaw(0, 0)
    pc = synth_submap(scene, pose, "ground")
    world = pose.to_world(pc.points)
    dist = np.hypot(world[:, 0] - trunk.x, world[:, 1] - trunk.y)
    assert len(pc) > 10
    np.testing.assert_allclose(dist, trunk.radius, atol=1e-12)


def test_ring_arc_density_ratio():
    # points per ring / ring circumference: (1000 / 2 pi 5) / (250 / 2 pi 20) = 16
    scene = SceneSpec(far_landmarks(), ring_points=(1000, 250), ring_radii=(5.0, 20.0), noise_sigma=0.01)
    pc = synth_submap(scene, Pose(), "ground")
    r = np.hypot(pc.points[:, 0], pc.points[:, 1])
    inner = np.sum(np.abs(r - 5) < 1)
    outer = np.sum(np.abs(r - 20) < 1)
    ratio = (inner / (2 * math.pi * 5)) / (outer / (2 * math.pi * 20))
    assert inner == 1000 and outer == 250
    assert ratio == pytest.approx(16.0, rel=1e-12)


def test_aerial_profile_sees_only_upper_trunk():
    scene = random_forest(1, 40, 20, noise_sigma=0.0)
    pc = synth_submap(scene, Pose(), "aerial")
    world = pc.points
    heights = {(lm.x, lm.y): lm.height for lm in scene.landmarks}
    assert len(pc) > 0
    # no ground ring, all returns in the upper half of some trunk
    assert np.all(world[:, 2] >= 0.5 * min(heights.values()) - 1e-9)


def test_synth_crops_to_view_radius():
    scene = random_forest(2, 100, 80)
    pc = synth_submap(scene, Pose.from_xy_yaw(10, 10), "ground")
    assert np.all(np.hypot(pc.points[:, 0], pc.points[:, 1]) < scene.view_radius)


def test_scene_needs_four_landmarks():
    with pytest.raises(ValueError):
        SceneSpec(far_landmarks(3))


def test_two_ring_scene_has_only_rings_in_view():
    pc = synth_submap(two_ring_scene(0), Pose(), "ground")
    assert len(pc) == 1250


# --- augment --------------------------------------------------------------


def test_augment_disabled_is_identity():
    pc = PointCloud(np.random.default_rng(0).normal(size=(100, 3)))
    np.testing.assert_array_equal(augment(pc, 7, AugmentConfig()).points, pc.points)


def test_rotation_by_pi():
    np.testing.assert_allclose(rotate_z([[1, 2, 3]], math.pi), [[-1, -2, 3]], atol=1e-15)


def test_jitter_standard_deviation():
    pc = PointCloud(np.zeros((10_000, 3)))
    out = augment(pc, 11, AugmentConfig(jitter_sigma=0.01))
    sd = out.points.std(axis=0, ddof=1)
    assert np.all((sd >= 0.009) & (sd <= 0.011))


def test_augment_is_seeded():
    pc = PointCloud(np.random.default_rng(0).normal(size=(300, 3)) * 5)
    cfg = AugmentConfig(rotation=1.0, translation=2.0, jitter_sigma=0.1, block_size=3.0, block_prob=1.0)
    np.testing.assert_array_equal(augment(pc, 4, cfg).points, augment(pc, 4, cfg).points)


def test_block_removal_cannot_empty_cloud():
    pc = PointCloud([[0, 0, 0], [0.1, 0.1, 0]])
    with pytest.raises(EmptyCloudError):
        augment(pc, 0, AugmentConfig(block_size=10.0, block_prob=1.0))

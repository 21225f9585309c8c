import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossground.geometry import (
    Aabb,
    GeometryError,
    Instance,
    PointCloud,
    RigidTransform,
    apply_transform,
    axis_align,
    box_from_points,
    iou3d,
    iou3d_many,
    volume,
)
from crossground.scenedata import Scene
from crossground.synth import SynthConfig, apply_random_pose, make_scene, sample_cuboid_surface

from oracles import random_grid_boxes, voxel_iou, voxel_iou_dense

finite = st.floats(-20, 20, allow_nan=False)
extent = st.floats(0.0, 5.0, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)
boxes = st.builds(Aabb, vec3, st.tuples(extent, extent, extent))
pos_boxes = st.builds(Aabb, vec3, st.tuples(*[st.floats(0.01, 5.0)] * 3))
yaws = st.floats(-math.pi, math.pi, allow_nan=False)


def test_volume_examples():
    assert volume(Aabb((0, 0, 0), (0.5, 0.5, 0.5))) == 1.0
    assert volume(Aabb((0, 0, 0), (0, 1, 1))) == 0.0
    assert volume(Aabb((1, 2, 3), (0.5, 1.0, 2.0))) == 8.0


def test_aabb_rejects_negative_or_nonfinite():
    with pytest.raises(GeometryError):
        Aabb((0, 0, 0), (-1, 1, 1))
    with pytest.raises(GeometryError):
        Aabb((0, np.nan, 0), (1, 1, 1))


def test_iou_examples():
    a = Aabb((0, 0, 0), (0.5, 0.5, 0.5))
    assert iou3d(a, a) == 1.0
    assert iou3d(a, Aabb((10, 0, 0), (0.5, 0.5, 0.5))) == 0.0
    shifted = Aabb((0.5, 0, 0), (0.5, 0.5, 0.5))
    assert iou3d(a, shifted) == pytest.approx(1 / 3, abs=1e-12)
    oracle = voxel_iou(a.lo, a.hi, shifted.lo, shifted.hi)
    assert abs(iou3d(a, shifted) - oracle) <= 1e-3


def test_degenerate_union_is_zero():
    p = Aabb((1, 1, 1), (0, 0, 0))
    assert iou3d(p, p) == 0.0


def test_factored_voxel_count_matches_dense_grid(rng):
    # the per-axis oracle must agree with an explicit 3D voxel grid
    h = 0.01
    for _ in range(30):
        a_lo, b_lo = rng.integers(0, 30, 3) * h, rng.integers(0, 30, 3) * h
        a_hi, b_hi = a_lo + rng.integers(1, 40, 3) * h, b_lo + rng.integers(1, 40, 3) * h
        sparse = voxel_iou(a_lo, a_hi, b_lo, b_hi, h=h)
        dense = voxel_iou_dense(a_lo, a_hi, b_lo, b_hi, h=h)
        assert sparse == pytest.approx(dense, abs=1e-12)


def test_iou_matches_voxel_oracle(rng):
    for a_lo, a_hi, b_lo, b_hi in random_grid_boxes(rng, 200):
        got = iou3d(Aabb.from_bounds(a_lo, a_hi), Aabb.from_bounds(b_lo, b_hi))
        assert abs(got - voxel_iou(a_lo, a_hi, b_lo, b_hi)) <= 1e-3


def test_iou_many_matches_scalar(rng):
    ref = Aabb(rng.uniform(-1, 1, 3), rng.uniform(0.1, 1, 3))
    arr = np.column_stack([rng.uniform(-1, 1, (30, 3)), rng.uniform(0, 1, (30, 3))])
    many = iou3d_many(ref, arr)
    assert np.allclose(many, [iou3d(ref, Aabb.from_array(r)) for r in arr], atol=1e-15)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou3d(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou3d(b, a), abs=1e-15)


@given(pos_boxes)
def test_iou_self_is_one(a):
    assert iou3d(a, a) == pytest.approx(1.0, abs=1e-12)


def test_transform_examples():
    box = Aabb((0, 0, 0), (1, 2, 3))
    assert apply_transform(RigidTransform.identity(), box) == box
    moved = apply_transform(RigidTransform(np.eye(3), (1, 2, 3)), box)
    assert np.allclose(moved.center, (1, 2, 3)) and np.allclose(moved.half_extents, (1, 2, 3))
    turned = apply_transform(RigidTransform.from_yaw(math.pi / 2), box)
    assert np.allclose(turned.half_extents, (2, 1, 3), atol=1e-12)
    assert np.allclose(turned.center, 0, atol=1e-12)


def test_improper_rotation_rejected():
    with pytest.raises(GeometryError, match="improper rotation"):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1.0, 1.1]))


@settings(max_examples=50)
@given(yaws, vec3, st.integers(0, 2**31 - 1))
def test_rigidity(yaw, t, seed):
    r = np.random.default_rng(seed)
    q, _ = np.linalg.qr(r.normal(size=(3, 3)))
    q *= np.sign(np.linalg.det(q))
    tr = RigidTransform(q @ RigidTransform.from_yaw(yaw).rotation, t)
    pts = r.uniform(-5, 5, (12, 3))
    normals = r.normal(size=(12, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cloud = apply_transform(tr, PointCloud(pts, None, normals))
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(cloud.positions[:, None] - cloud.positions[None], axis=-1)
    assert np.max(np.abs(d0 - d1)) <= 1e-9
    # normals are rotated, not translated
    assert np.allclose(cloud.normals, normals @ tr.rotation.T, atol=1e-12)
    back = tr.inverse() @ tr
    assert np.allclose(back.as_matrix(), np.eye(4), atol=1e-12)


def test_from_matrix_tolerance():
    m = RigidTransform.from_yaw(0.3, (1, 2, 3)).as_matrix()
    m[:3, :3] += 1e-8
    assert np.allclose(RigidTransform.from_matrix(m).as_matrix(), m, atol=1e-7)
    m[0, 0] += 1e-3
    with pytest.raises(GeometryError):
        RigidTransform.from_matrix(m)


def test_box_from_points_examples():
    single = box_from_points(np.array([[1.0, 2.0, 3.0]]))
    assert np.array_equal(single.center, [1, 2, 3]) and np.array_equal(single.half_extents, [0, 0, 0])
    pair = box_from_points(np.array([[0.0, 0, 0], [2, 4, 6]]))
    assert np.array_equal(pair.center, [1, 2, 3]) and np.array_equal(pair.half_extents, [1, 2, 3])
    with pytest.raises(GeometryError, match="empty instance"):
        box_from_points(np.zeros((0, 3)))


def test_box_from_cuboid_samples_exact(rng):
    lo, hi = np.array([0.25, -1.0, 0.0]), np.array([1.5, 0.75, 0.875])
    pts, _ = sample_cuboid_surface(rng, lo, hi, 1000, with_bottom=True)
    box = box_from_points(pts)
    assert np.array_equal(box.lo, lo) and np.array_equal(box.hi, hi)


@given(st.lists(vec3, min_size=1, max_size=30))
def test_box_from_points_contains_all(points):
    pts = np.array(points)
    assert box_from_points(pts).contains(pts, tol=1e-12).all()


# -- alignment ------------------------------------------------------------------------

def _room(seed=0, cfg=SynthConfig(n_objects=(3, 5), n_frames=4, embedding_dim=8)):
    scene, _ = make_scene(np.random.default_rng(seed), cfg, f"room{seed}")
    return scene


def test_aligned_scene_gives_identity():
    t, aligned = axis_align(_room())
    assert np.allclose(t.as_matrix(), np.eye(4), atol=1e-6)
    assert np.allclose(aligned.cloud.positions, _room().cloud.positions, atol=1e-6)


def test_yawed_and_lifted_room_recovered():
    scene = _room(1)
    pose = RigidTransform.from_yaw(math.radians(30), (0, 0, 1.7))
    from crossground.geometry import transform_scene

    t, _ = axis_align(transform_scene(scene, pose))
    assert abs(t.yaw - math.radians(-30)) <= 1e-6
    assert np.allclose(t.translation, (0, 0, -1.7), atol=1e-6)


def test_random_poses_recovered_and_idempotent():
    r = np.random.default_rng(5)
    for seed in range(5):
        pose, moved = apply_random_pose(_room(seed), r)
        t, aligned = axis_align(moved)
        assert np.allclose((t @ pose).as_matrix(), np.eye(4), atol=1e-6)
        again, _ = axis_align(aligned)
        assert np.allclose(again.as_matrix(), np.eye(4), atol=1e-6)


def _curtain_scene():
    r = np.random.default_rng(0)
    # a flat sheet in the x = 0.2 plane, running along y
    curtain = np.column_stack([np.full(400, 0.2), r.uniform(0, 3, 400), r.uniform(0, 2, 400)])
    chair, _ = sample_cuboid_surface(r, np.array([1.0, 1.0, 0.0]), np.array([1.5, 1.5, 0.9]), 200)
    pts = np.vstack([curtain, chair])
    instances = [
        Instance(1, "curtain", box_from_points(curtain), (0, len(curtain))),
        Instance(2, "chair", box_from_points(chair), (len(curtain), len(chair))),
    ]
    return Scene("curtains", PointCloud(pts), instances)


def test_curtain_fallback_anchor():
    t, aligned = axis_align(_curtain_scene())
    assert abs(t.yaw - math.pi / 2) <= 1e-6
    curtain = aligned.instance(1).box
    assert curtain.half_extents[0] > curtain.half_extents[1]


def test_no_anchor_is_an_error():
    scene = _curtain_scene()
    chair_only = Scene("bare", scene.cloud, [scene.instances[1]])
    with pytest.raises(GeometryError, match="no alignment anchor"):
        axis_align(chair_only)


def test_upside_down_scan_is_flipped():
    scene = _room(2)
    flipped_pose = RigidTransform(np.diag([1.0, -1.0, -1.0]), (0, 0, 3.0))
    from crossground.geometry import transform_scene

    t, aligned = axis_align(transform_scene(scene, flipped_pose))
    assert np.allclose(aligned.cloud.positions, scene.cloud.positions, atol=1e-6)
    assert t.rotation[2, 2] == pytest.approx(-1.0)


def test_instance_boxes_contain_points_after_alignment():
    r = np.random.default_rng(9)
    _, moved = apply_random_pose(_room(3), r)
    _, aligned = axis_align(moved)
    for inst in aligned.instances:
        if inst.n_points:
            inside = inst.box.contains(aligned.cloud.positions[inst.point_indices], tol=1e-9)
            assert inside.mean() >= 0.95

"""Rigid transforms, axis-aligned boxes, exact box IoU and scan axis alignment.

Boxes are stored as center + half extents (meters).  All functions are pure;
inputs are never mutated.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ORTHO_TOL = 1e-9
FALLBACK_ANCHORS = ("curtain", "window", "doorframe")


class GeometryError(ValueError):
    pass


def _vec3(value, name: str) -> np.ndarray:
    arr = np.array(value, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise GeometryError(f"{name} must have 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Aabb:
    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center, "center"))
        object.__setattr__(self, "half_extents", _vec3(self.half_extents, "half_extents"))
        if np.any(self.half_extents < 0):
            raise GeometryError("half_extents must be non-negative")

    @classmethod
    def from_bounds(cls, lo, hi) -> "Aabb":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        return cls((lo + hi) / 2.0, (hi - lo) / 2.0)

    @classmethod
    def from_array(cls, arr) -> "Aabb":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[:3], arr[3:6])

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.half_extents

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.half_extents

    def as_array(self) -> np.ndarray:
        """(6,) array ``[cx, cy, cz, hx, hy, hz]``."""
        return np.concatenate([self.center, self.half_extents])

    def corners(self) -> np.ndarray:
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=np.float64,
        )
        return self.center + signs * self.half_extents

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all(np.abs(points - self.center) <= self.half_extents + tol, axis=1)

    def to_json(self) -> dict:
        return {"center": self.center.tolist(), "half_extents": self.half_extents.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Aabb":
        return cls(obj["center"], obj["half_extents"])

    def __eq__(self, other):
        if not isinstance(other, Aabb):
            return NotImplemented
        return bool(
            np.array_equal(self.center, other.center)
            and np.array_equal(self.half_extents, other.half_extents)
        )

    def __hash__(self):
        return hash((tuple(self.center), tuple(self.half_extents)))

    def __repr__(self):
        c = ", ".join(f"{v:.4g}" for v in self.center)
        h = ", ".join(f"{v:.4g}" for v in self.half_extents)
        return f"Aabb(center=({c}), half_extents=({h}))"


def volume(box: Aabb) -> float:
    return float(np.prod(2.0 * box.half_extents))


def iou3d(a: Aabb, b: Aabb) -> float:
    """Intersection over union of two axis-aligned boxes.

    Returns 0 when the union has zero volume, even if the boxes coincide.
    """
    overlap = np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo)
    inter = float(np.prod(np.clip(overlap, 0.0, None)))
    union = volume(a) + volume(b) - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou3d_many(box: Aabb, boxes: np.ndarray) -> np.ndarray:
    """IoU of one box against an (N, 6) array of center/half-extent rows."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    lo = boxes[:, :3] - boxes[:, 3:]
    hi = boxes[:, :3] + boxes[:, 3:]
    overlap = np.minimum(hi, box.hi) - np.maximum(lo, box.lo)
    inter = np.prod(np.clip(overlap, 0.0, None), axis=1)
    union = volume(box) + np.prod(2.0 * boxes[:, 3:], axis=1) - inter
    out = np.zeros(len(boxes))
    ok = union > 0.0
    out[ok] = np.clip(inter[ok] / union[ok], 0.0, 1.0)
    return out


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3) or not np.all(np.isfinite(rot)):
            raise GeometryError("rotation must be a finite 3x3 matrix")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHO_TOL:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
            raise GeometryError("improper rotation (det != +1)")
        rot.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", _vec3(self.translation, "translation"))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, translation)

    @classmethod
    def from_matrix(cls, mat, tol: float = 1e-6) -> "RigidTransform":
        """Build from a 4x4 homogeneous matrix.

        Rotations within ``tol`` of orthonormal are projected onto SO(3);
        anything worse is rejected.
        """
        mat = np.asarray(mat, dtype=np.float64).reshape(4, 4)
        rot = mat[:3, :3]
        if not np.all(np.isfinite(mat)):
            raise GeometryError("pose contains non-finite values")
        if np.max(np.abs(mat[3] - [0.0, 0.0, 0.0, 1.0])) > tol:
            raise GeometryError("pose bottom row must be [0, 0, 0, 1]")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > tol:
            raise GeometryError("pose rotation is not orthonormal")
        if np.linalg.det(rot) < 0:
            raise GeometryError("improper rotation (det = -1)")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHO_TOL:
            u, _, vt = np.linalg.svd(rot)
            rot = u @ vt
        return cls(rot, mat[:3, 3])

    def as_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def rotate_vectors(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def __repr__(self):
        return (
            f"RigidTransform(yaw={math.degrees(self.yaw):.6g}deg, "
            f"translation={self.translation.tolist()})"
        )


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(pos) < 1:
            raise GeometryError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pos)):
            raise GeometryError("point positions must be finite")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        if self.colors is not None:
            col = np.array(self.colors, dtype=np.float64).reshape(-1, 3)
            if col.shape != pos.shape:
                raise GeometryError("colors must match positions")
            if not np.all(np.isfinite(col)) or col.min() < 0.0 or col.max() > 1.0:
                raise GeometryError("colors must lie in [0, 1]")
            col.setflags(write=False)
            object.__setattr__(self, "colors", col)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if nrm.shape != pos.shape:
                raise GeometryError("normals must match positions")
            if not np.all(np.isfinite(nrm)) or np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-4:
                raise GeometryError("normals must be unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True, eq=False)
class Instance:
    object_id: int
    object_name: str
    box: Aabb
    point_range: tuple[int, int] = (0, 0)  # (start, length) into the scene cloud

    @property
    def point_indices(self) -> np.ndarray:
        start, length = self.point_range
        return np.arange(start, start + length)

    @property
    def n_points(self) -> int:
        return self.point_range[1]


def apply_transform(t: RigidTransform, obj):
    """Apply ``x -> R x + t`` to a PointCloud, an Aabb or an (N, 3) array.

    Normals are only rotated.  A box is mapped by its 8 corners and the
    axis-aligned hull of the result is returned.
    """
    if isinstance(obj, PointCloud):
        return PointCloud(
            t.transform_points(obj.positions),
            obj.colors,
            None if obj.normals is None else t.rotate_vectors(obj.normals),
        )
    if isinstance(obj, Aabb):
        corners = t.transform_points(obj.corners())
        return Aabb.from_bounds(corners.min(axis=0), corners.max(axis=0))
    return t.transform_points(obj)


def box_from_points(points) -> Aabb:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise GeometryError("empty instance")
    return Aabb.from_bounds(points.min(axis=0), points.max(axis=0))


def _horizontal_length(inst: Instance) -> float:
    return float(2.0 * max(inst.box.half_extents[0], inst.box.half_extents[1]))


def _pick_anchor(instances: Sequence[Instance], fallback: Sequence[str], min_aspect: float | None):
    walls = [i for i in instances if i.object_name == "wall"]
    if walls:
        return max(walls, key=lambda i: (_horizontal_length(i), i.n_points))
    for name in fallback:
        cands = [i for i in instances if i.object_name == name]
        if min_aspect is not None:
            cands = [
                i for i in cands
                if max(i.box.half_extents[:2]) >= min_aspect * max(min(i.box.half_extents[:2]), 1e-12)
            ]
        if cands:
            return max(cands, key=lambda i: (_horizontal_length(i), i.n_points))
    return None


def _long_direction(inst: Instance, positions: np.ndarray) -> np.ndarray:
    """Unit horizontal direction of the anchor's long side."""
    if inst.n_points >= 2:
        xy = positions[inst.point_indices, :2]
        xy = xy - xy.mean(axis=0)
        cov = xy.T @ xy
        if np.any(cov != 0.0):
            _, vecs = np.linalg.eigh(cov)
            return vecs[:, -1]
    hx, hy = inst.box.half_extents[:2]
    return np.array([1.0, 0.0]) if hx >= hy else np.array([0.0, 1.0])


def _wrap_yaw(yaw: float) -> float:
    # Canonical candidate in (-90deg, 90deg]; a line direction is only defined mod 180deg.
    yaw = math.remainder(yaw, math.pi)
    if yaw <= -math.pi / 2 + 1e-12:
        yaw += math.pi
    return yaw


def alignment_transform(
    scene,
    *,
    fallback: Sequence[str] = FALLBACK_ANCHORS,
    floor_percentile: float = 1.0,
    min_aspect: float | None = None,
) -> RigidTransform:
    anchor = _pick_anchor(scene.instances, fallback, min_aspect)
    if anchor is None:
        raise GeometryError(f"no alignment anchor in scene {getattr(scene, 'scene_id', '?')!r}")
    positions = scene.cloud.positions
    direction = _long_direction(anchor, positions)
    yaw = _wrap_yaw(-math.atan2(direction[1], direction[0]))
    transform = RigidTransform.from_yaw(yaw)

    # up check: floor below ceiling and below the bulk of the scan
    rotated_z = positions[:, 2]
    by_name = {}
    for inst in scene.instances:
        if inst.n_points:
            by_name.setdefault(inst.object_name, []).append(inst)
    flip = False
    median_z = float(np.median(rotated_z))
    if "floor" in by_name:
        floor_z = np.mean([rotated_z[i.point_indices].mean() for i in by_name["floor"]])
        flip = floor_z > median_z
    elif "ceiling" in by_name:
        ceil_z = np.mean([rotated_z[i.point_indices].mean() for i in by_name["ceiling"]])
        flip = ceil_z < median_z
    if flip:
        transform = RigidTransform(np.diag([1.0, -1.0, -1.0])) @ transform
        rotated_z = -rotated_z

    floor_height = float(np.percentile(rotated_z, floor_percentile))
    return RigidTransform(np.eye(3), (0.0, 0.0, -floor_height)) @ transform


def transform_scene(scene, t: RigidTransform):
    """Apply ``t`` to a scene: cloud, instance boxes (refit), camera poses."""
    cloud = apply_transform(t, scene.cloud)
    instances = []
    for inst in scene.instances:
        if inst.n_points:
            box = box_from_points(cloud.positions[inst.point_indices])
        else:
            box = apply_transform(t, inst.box)
        instances.append(dataclasses.replace(inst, box=box))
    frames = [dataclasses.replace(f, pose=t @ f.pose) for f in scene.frames]
    return dataclasses.replace(scene, cloud=cloud, instances=instances, frames=frames)


def axis_align(scene, **kwargs):
    """Align a scan: longest wall along x, floor at z = 0, z up.

    Falls back to curtains, windows or doorframes when the scene has no wall.
    Returns ``(transform, aligned_scene)``.
    """
    t = alignment_transform(scene, **kwargs)
    return t, transform_scene(scene, t)

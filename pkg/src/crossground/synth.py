"""Deterministic synthetic source/target corpora with controlled dataset shift.

Each scene is an axis-aligned rectangular room (four planar walls and a
floor, longest walls along x) holding cuboid objects sampled on their
surfaces.  A ring of cameras looks at the room center; every frame stores an
image embedding synthesized in the toy text-embedding space from the
objects the camera sees, so text-weighted view fusion has real signal.

The target corpus is generated from an independent random stream and then
shifted: point density, class frequencies, description templates, sensor
jitter and class dropout.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from crossground.embeddings import ToyProvider
from crossground.geometry import Instance, PointCloud, RigidTransform, box_from_points, transform_scene
from crossground.scenedata import CameraFrame, Corpus, Dataset, ReferExpression, Scene, tokenize


@dataclass(frozen=True)
class ObjectClass:
    name: str
    half_extents: tuple[float, float, float]
    density: float  # surface points per m^2
    colors: tuple[str, ...]


DEFAULT_CLASSES = (
    ObjectClass("chair", (0.25, 0.25, 0.45), 220.0, ("red", "blue", "black", "brown", "white")),
    ObjectClass("table", (0.60, 0.40, 0.38), 150.0, ("brown", "white", "black")),
    ObjectClass("sofa", (0.90, 0.45, 0.40), 110.0, ("gray", "blue", "red", "green")),
    ObjectClass("bed", (1.00, 0.80, 0.30), 90.0, ("white", "blue", "gray")),
    ObjectClass("cabinet", (0.40, 0.25, 0.50), 150.0, ("brown", "white", "gray")),
    ObjectClass("desk", (0.60, 0.35, 0.38), 150.0, ("brown", "black", "white")),
    ObjectClass("lamp", (0.15, 0.15, 0.60), 300.0, ("white", "yellow", "black")),
    ObjectClass("plant", (0.20, 0.20, 0.45), 300.0, ("green",)),
    ObjectClass("shelf", (0.45, 0.18, 0.90), 140.0, ("brown", "white", "black")),
    ObjectClass("bin", (0.15, 0.15, 0.22), 350.0, ("gray", "black", "blue", "green")),
)

PALETTE = {
    "red": (0.80, 0.15, 0.15),
    "blue": (0.15, 0.25, 0.80),
    "green": (0.20, 0.65, 0.25),
    "white": (0.92, 0.92, 0.90),
    "black": (0.08, 0.08, 0.10),
    "brown": (0.50, 0.32, 0.18),
    "gray": (0.50, 0.50, 0.52),
    "yellow": (0.90, 0.80, 0.20),
}
STRUCTURE_COLOR = (0.75, 0.72, 0.68)
FLOOR_COLOR = (0.55, 0.50, 0.45)

TEMPLATES = {
    "verbose": (
        "this is a {color} {name} . it is next to the {rel} .",
        "the {name} is {color} . it is placed near the {rel} in the room .",
        "there is a {color} {name} in the room . the {name} is close to the {rel} .",
        "a {color} {name} sits beside the {rel} . it is the {color} one .",
    ),
    "terse": (
        "{color} {name} by the {rel}",
        "a {color} {name} near {rel}",
        "the {name} that is {color} beside the {rel}",
    ),
}
SYNONYMS = {
    "chair": "seat", "sofa": "couch", "cabinet": "cupboard", "table": "counter",
    "bin": "trashcan", "shelf": "bookshelf", "lamp": "light", "plant": "flower",
    "desk": "workstation", "bed": "mattress", "gray": "grey", "brown": "wooden",
}
# template sets that swap in synonyms, and with which probability
SYNONYM_RATE = {"verbose": 0.0, "terse": 0.6}


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    name: str = "synthetic"
    n_scenes: int = 200
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    room_width: tuple[float, float] = (4.5, 7.5)
    room_depth: tuple[float, float] = (3.0, 6.5)
    wall_height: float = 2.6
    n_objects: tuple[int, int] = (6, 12)
    structure_density: float = 30.0
    size_jitter: float = 0.15
    color_noise: float = 0.03
    outlier_fraction: float = 0.002
    n_frames: int = 24
    embedding_dim: int = 728
    embedding_seed: int = 0
    view_noise: float = 0.3
    fov_deg: float = 80.0
    descs_per_object: tuple[int, int] = (2, 3)
    template_set: str = "verbose"
    class_weights: tuple[float, ...] | None = None
    classes: tuple[ObjectClass, ...] = DEFAULT_CLASSES

    def validate(self) -> None:
        if self.n_scenes < 1:
            raise SynthError("n_scenes must be >= 1")
        if len(self.split_fractions) != 3 or any(f < 0 for f in self.split_fractions) or sum(self.split_fractions) <= 0:
            raise SynthError("split_fractions must be three non-negative numbers")
        if not (0 < self.room_depth[0] <= self.room_depth[1]) or not (0 < self.room_width[0] <= self.room_width[1]):
            raise SynthError("bad room size ranges")
        if self.room_depth[0] >= self.room_width[1]:
            raise SynthError("room_depth must allow rooms shallower than they are wide")
        if not (1 <= self.n_objects[0] <= self.n_objects[1]):
            raise SynthError("bad n_objects range")
        if self.descs_per_object[0] < 2 or self.descs_per_object[0] > self.descs_per_object[1]:
            raise SynthError("need at least two descriptions per object")
        if self.template_set not in TEMPLATES:
            raise SynthError(f"unknown template set {self.template_set!r}")
        if self.class_weights is not None and len(self.class_weights) != len(self.classes):
            raise SynthError("class_weights must match classes")
        if self.n_frames < 0 or self.embedding_dim < 2:
            raise SynthError("bad camera/embedding settings")
        for cls in self.classes:
            for color in cls.colors:
                if color not in PALETTE:
                    raise SynthError(f"class {cls.name}: unknown color {color!r}")


@dataclass(frozen=True)
class ShiftConfig:
    point_density_scale: float = 1.0
    class_frequency_skew: float = 0.0
    template_set: str | None = None  # None keeps the source templates
    jitter_sigma: float = 0.0
    dropout_classes: tuple[str, ...] = ()

    def validate(self, base: SynthConfig) -> None:
        if not self.point_density_scale > 0:
            raise SynthError("point_density_scale must be > 0")
        if self.jitter_sigma < 0:
            raise SynthError("jitter_sigma must be >= 0")
        if self.template_set is not None and self.template_set not in TEMPLATES:
            raise SynthError(f"unknown template set {self.template_set!r}")
        names = {c.name for c in base.classes}
        unknown = [c for c in self.dropout_classes if c not in names]
        if unknown:
            raise SynthError(f"dropout of unknown classes {unknown}")
        if len(set(self.dropout_classes)) >= len(names):
            raise SynthError("dropout removes every class")

    @classmethod
    def strong(cls) -> "ShiftConfig":
        return cls(
            point_density_scale=0.35,
            class_frequency_skew=1.5,
            template_set="terse",
            jitter_sigma=0.02,
            dropout_classes=("plant",),
        )


NEUTRAL_SHIFT = ShiftConfig()


# -- geometry helpers -------------------------------------------------------------

def _sample_rect(rng, origin, u, v, normal, count):
    a = rng.random(count)
    b = rng.random(count)
    pts = origin + a[:, None] * u + b[:, None] * v
    return pts, np.tile(normal, (count, 1))


def sample_cuboid_surface(rng, lo, hi, count, with_bottom=False):
    """Uniform surface samples of an axis-aligned cuboid (optionally no bottom)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    ext = hi - lo
    ex, ey, ez = (np.array([ext[0], 0, 0]), np.array([0, ext[1], 0]), np.array([0, 0, ext[2]]))
    faces = [
        (hi * [0, 0, 1] + lo * [1, 1, 0], ex, ey, (0, 0, 1.0)),   # top
        (lo, ex, ez, (0, -1.0, 0)),                               # y-
        (lo + ey, ex, ez, (0, 1.0, 0)),                           # y+
        (lo, ey, ez, (-1.0, 0, 0)),                               # x-
        (lo + ex, ey, ez, (1.0, 0, 0)),                           # x+
    ]
    if with_bottom:
        faces.append((lo, ex, ey, (0, 0, -1.0)))
    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v, _ in faces])
    counts = rng.multinomial(count, areas / areas.sum())
    pts, nrm = [], []
    for (origin, u, v, n), k in zip(faces, counts):
        p, q = _sample_rect(rng, origin, u, v, np.asarray(n), k)
        pts.append(p)
        nrm.append(q)
    return np.concatenate(pts), np.concatenate(nrm)


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _camera_pose(position, target) -> RigidTransform:
    forward = np.asarray(target, float) - np.asarray(position, float)
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    rot = np.stack([right, up, -forward], axis=1)
    return RigidTransform(rot, position)


@dataclass
class _Placed:
    cls: ObjectClass
    color: str
    lo: np.ndarray
    hi: np.ndarray

    @property
    def center(self):
        return (self.lo + self.hi) / 2


def _place_objects(rng, cfg: SynthConfig, width, depth, weights):
    k = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    placed: list[_Placed] = []
    margin = 0.1
    for _ in range(k):
        cls = cfg.classes[int(rng.choice(len(cfg.classes), p=weights))]
        scale = 1.0 + cfg.size_jitter * rng.uniform(-1, 1, size=3)
        half = np.asarray(cls.half_extents) * scale
        if rng.random() < 0.5:
            half = half[[1, 0, 2]]  # quarter turn keeps the box axis-aligned
        for _attempt in range(60):
            cx = rng.uniform(half[0] + margin, width - half[0] - margin)
            cy = rng.uniform(half[1] + margin, depth - half[1] - margin)
            lo = np.array([cx - half[0], cy - half[1], 0.0])
            hi = np.array([cx + half[0], cy + half[1], 2 * half[2]])
            if all(
                np.any(lo[:2] > p.hi[:2] + 0.05) or np.any(hi[:2] < p.lo[:2] - 0.05) for p in placed
            ):
                placed.append(_Placed(cls, cls.colors[int(rng.integers(len(cls.colors)))], lo, hi))
                break
    return placed


def _class_weights(cfg: SynthConfig, shift: ShiftConfig | None):
    w = np.ones(len(cfg.classes)) if cfg.class_weights is None else np.asarray(cfg.class_weights, float)
    if shift is not None:
        if shift.class_frequency_skew:
            # rank 0 = last class, so the skew favours classes listed late
            ranks = np.arange(len(cfg.classes))[::-1]
            w = w * (ranks + 1.0) ** (-shift.class_frequency_skew)
        for i, cls in enumerate(cfg.classes):
            if cls.name in shift.dropout_classes:
                w[i] = 0.0
    if w.sum() <= 0:
        raise SynthError("class weights sum to zero")
    return w / w.sum()


def _describe(rng, placed, idx, template_set, n_desc):
    obj = placed[idx]
    others = [p for j, p in enumerate(placed) if j != idx]
    if others:
        dists = [np.linalg.norm(p.center[:2] - obj.center[:2]) for p in others]
        rel = others[int(np.argmin(dists))].cls.name
    else:
        rel = "wall"
    templates = TEMPLATES[template_set]
    rate = SYNONYM_RATE[template_set]
    picks = rng.permutation(len(templates))[:n_desc]
    out = []
    for t in picks:
        words = {"color": obj.color, "name": obj.cls.name, "rel": rel}
        for key in words:
            if rng.random() < rate and words[key] in SYNONYMS:
                words[key] = SYNONYMS[words[key]]
        out.append(templates[t].format(**words))
    return out


def make_scene(rng, cfg: SynthConfig, scene_id: str, shift: ShiftConfig | None = None):
    """Build one scene and the descriptions of its objects."""
    density_scale = 1.0 if shift is None else shift.point_density_scale
    jitter = 0.0 if shift is None else shift.jitter_sigma
    template_set = cfg.template_set if shift is None or shift.template_set is None else shift.template_set
    weights = _class_weights(cfg, shift)

    width = rng.uniform(*cfg.room_width)
    depth = rng.uniform(cfg.room_depth[0], min(cfg.room_depth[1], width - 0.5))
    depth = min(depth, width - 0.25)
    height = cfg.wall_height

    chunks = []  # (name, positions, normals, colors)

    def structure(name, origin, u, v, normal, rgb):
        area = np.linalg.norm(np.cross(u, v))
        count = max(4, int(round(cfg.structure_density * density_scale * area)))
        pts, nrm = _sample_rect(rng, np.asarray(origin, float), np.asarray(u, float), np.asarray(v, float), np.asarray(normal, float), count)
        col = np.clip(np.asarray(rgb) + rng.normal(0, cfg.color_noise, (count, 3)), 0, 1)
        chunks.append((name, pts, nrm, col, None))

    structure("wall", (0, 0, 0), (width, 0, 0), (0, 0, height), (0, 1, 0), STRUCTURE_COLOR)
    structure("wall", (0, depth, 0), (width, 0, 0), (0, 0, height), (0, -1, 0), STRUCTURE_COLOR)
    structure("wall", (0, 0, 0), (0, depth, 0), (0, 0, height), (1, 0, 0), STRUCTURE_COLOR)
    structure("wall", (width, 0, 0), (0, depth, 0), (0, 0, height), (-1, 0, 0), STRUCTURE_COLOR)
    structure("floor", (0, 0, 0), (width, 0, 0), (0, depth, 0), (0, 0, 1), FLOOR_COLOR)

    placed = _place_objects(rng, cfg, width, depth, weights)
    for obj in placed:
        ext = obj.hi - obj.lo
        area = 2 * (ext[0] * ext[2] + ext[1] * ext[2]) + ext[0] * ext[1]
        count = max(8, int(round(obj.cls.density * density_scale * area)))
        pts, nrm = sample_cuboid_surface(rng, obj.lo, obj.hi, count)
        if jitter > 0:
            pts = pts + rng.normal(0.0, jitter, pts.shape)
        col = np.clip(np.asarray(PALETTE[obj.color]) + rng.normal(0, cfg.color_noise, (count, 3)), 0, 1)
        chunks.append((obj.cls.name, pts, nrm, col, obj))

    positions, normals, colors, instances = [], [], [], []
    start = 0
    for oid, (name, pts, nrm, col, _obj) in enumerate(chunks):
        pts = _f32(pts)
        positions.append(pts)
        normals.append(nrm)
        colors.append(col)
        instances.append(Instance(oid, name, box_from_points(pts), (start, len(pts))))
        start += len(pts)
    n_out = int(round(cfg.outlier_fraction * start))
    if n_out:
        out = np.column_stack([
            rng.uniform(0, width, n_out), rng.uniform(0, depth, n_out), rng.uniform(-0.08, -0.01, n_out)
        ])
        positions.append(_f32(out))
        normals.append(np.tile([0.0, 0.0, 1.0], (n_out, 1)))
        colors.append(np.tile(FLOOR_COLOR, (n_out, 1)))
    cloud = PointCloud(
        np.concatenate(positions),
        _f32(np.concatenate(colors)),
        _f32(np.concatenate(normals)),
    )

    toy = ToyProvider(cfg.embedding_dim, cfg.embedding_seed)
    frames, embeddings = [], {}
    center = np.array([width / 2, depth / 2])
    half_fov = math.radians(cfg.fov_deg) / 2
    obj_vecs = [toy.text([o.color, o.cls.name]) for o in placed]
    phase = rng.uniform(0, 2 * math.pi)
    for k in range(cfg.n_frames):
        ang = phase + 2 * math.pi * k / cfg.n_frames
        pos = np.array([center[0] + 0.35 * width * math.cos(ang), center[1] + 0.35 * depth * math.sin(ang), 1.5])
        pose = _camera_pose(pos, [center[0], center[1], 0.5])
        fwd = -pose.rotation[:, 2]
        fwd_h = fwd[:2] / np.linalg.norm(fwd[:2])
        vec = np.zeros(cfg.embedding_dim)
        for o, ov in zip(placed, obj_vecs):
            to = o.center[:2] - pos[:2]
            dist = np.linalg.norm(to)
            if dist > 1e-9 and math.acos(np.clip(to @ fwd_h / dist, -1, 1)) <= half_fov:
                vec += ov / (0.5 + dist)
        noise = rng.standard_normal(cfg.embedding_dim)
        noise /= np.linalg.norm(noise)
        scale = np.linalg.norm(vec) if np.any(vec) else 1.0
        vec = vec + cfg.view_noise * scale * noise
        frame_id = f"frame_{k:03d}"
        key = f"emb/{frame_id}"
        embeddings[key] = _f32(vec / np.linalg.norm(vec))
        frames.append(CameraFrame(frame_id, pose, key))

    scene = Scene(scene_id, cloud, instances, frames, embeddings)

    exprs = []
    n_struct = 5
    for idx, obj in enumerate(placed):
        n_desc = int(rng.integers(cfg.descs_per_object[0], cfg.descs_per_object[1] + 1))
        for ann_id, text in enumerate(_describe(rng, placed, idx, template_set, n_desc)):
            exprs.append(ReferExpression(scene_id, n_struct + idx, obj.cls.name, ann_id, text, tuple(tokenize(text))))
    return scene, exprs


def _split_counts(n, fractions):
    fr = np.asarray(fractions, float) / sum(fractions)
    n_val = int(round(n * fr[1]))
    n_test = int(round(n * fr[2]))
    if n >= 3 and fr[1] > 0:
        n_val = max(n_val, 1)
    n_train = n - n_val - n_test
    if n_train < 1 and n > 0:
        n_train, n_test = 1, max(0, n - 1 - n_val)
    return n_train, n_val, n - n_train - n_val


def _make_corpus(cfg: SynthConfig, shift: ShiftConfig | None, seed: int, stream: int, name: str, prefix: str):
    per_split: dict[str, tuple[dict, list]] = {s: ({}, []) for s in ("train", "val", "test")}
    counts = _split_counts(cfg.n_scenes, cfg.split_fractions)
    bounds = np.cumsum(counts)
    for i in range(cfg.n_scenes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, stream, i]))
        scene, exprs = make_scene(rng, cfg, f"{prefix}{i:04d}", shift)
        split = ("train", "val", "test")[int(np.searchsorted(bounds, i, side="right"))]
        per_split[split][0][scene.scene_id] = scene
        per_split[split][1].extend(exprs)
    splits = {s: Dataset(name, s, scenes, exprs) for s, (scenes, exprs) in per_split.items()}
    meta = {"synth": config_to_json(cfg), "shift": None if shift is None else dataclasses.asdict(shift), "seed": seed}
    return Corpus(name, splits, meta)


def generate_synthetic(base_config: SynthConfig, shift: ShiftConfig, seed: int):
    """Return ``(source, target)`` corpora; deterministic in all arguments."""
    base_config.validate()
    shift.validate(base_config)
    source = _make_corpus(base_config, None, seed, 0, f"{base_config.name}-source", "src")
    target = _make_corpus(base_config, shift, seed, 1, f"{base_config.name}-target", "tgt")
    return source, target


def config_to_json(cfg: SynthConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out.pop("classes")
    out["classes"] = [c.name for c in cfg.classes]
    return out


def apply_random_pose(scene: Scene, rng, yaw_range=(-math.pi / 4, math.pi / 4), z_range=(-2.0, 2.0)):
    """Move an aligned scene by a random yaw (about z) and height offset.

    Returns ``(pose, moved_scene)``; the pose is what alignment should undo.
    """
    lo, hi = yaw_range
    yaw = hi - rng.uniform(0.0, hi - lo)  # half-open (lo, hi]
    pose = RigidTransform.from_yaw(yaw, (0.0, 0.0, rng.uniform(*z_range)))
    return pose, transform_scene(scene, pose)

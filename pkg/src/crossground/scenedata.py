"""Scenes, referring expressions, on-disk formats and corpus statistics.

On disk a corpus directory looks like::

    corpus.json              {"name": ..., "splits": [...], "config": {...}}
    scenes/<scene_id>.json   scene descriptor
    scenes/<scene_id>.cg3d   tensors: positions, colors, normals, image embeddings
    train.jsonl, val.jsonl, test.jsonl

The refer files use the ScanRefer field names (``scene_id``, ``object_id``,
``object_name``, ``ann_id``, ``description``, ``token``).
"""

from __future__ import annotations

import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from crossground import container
from crossground.geometry import Aabb, GeometryError, Instance, PointCloud, RigidTransform

SPLITS = ("train", "val", "test")
RESERVED_TENSORS = ("positions", "colors", "normals")
UNIQUE, MULTIPLE = "unique", "multiple"

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


class DataError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True, eq=False)
class CameraFrame:
    frame_id: str
    pose: RigidTransform  # camera-to-world
    embedding_key: str

    def __post_init__(self):
        if not self.embedding_key:
            raise DataError(f"frame {self.frame_id!r}: empty embedding_key")

    @property
    def position(self) -> np.ndarray:
        return self.pose.translation

    @property
    def optical_axis(self) -> np.ndarray:
        return -self.pose.rotation[:, 2]


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    cloud: PointCloud
    instances: list[Instance]
    frames: list[CameraFrame] = field(default_factory=list)
    embeddings: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.scene_id:
            raise DataError("scene_id must be nonempty")
        seen = set()
        n = len(self.cloud)
        for inst in self.instances:
            if inst.object_id in seen:
                raise DataError(f"scene {self.scene_id}: duplicate object_id {inst.object_id}")
            seen.add(inst.object_id)
            start, length = inst.point_range
            if start < 0 or length < 0 or start + length > n:
                raise DataError(
                    f"scene {self.scene_id}: object {inst.object_id} point_range {inst.point_range} "
                    f"out of bounds for {n} points"
                )
        for key in self.embeddings:
            if key in RESERVED_TENSORS:
                raise DataError(f"scene {self.scene_id}: embedding key {key!r} is reserved")

    def instance(self, object_id: int) -> Instance:
        for inst in self.instances:
            if inst.object_id == object_id:
                return inst
        raise DataError(f"scene {self.scene_id}: no object {object_id}")

    def has_instance(self, object_id: int) -> bool:
        return any(inst.object_id == object_id for inst in self.instances)

    @property
    def min_corner(self) -> np.ndarray:
        return self.cloud.positions.min(axis=0)


@dataclass(frozen=True)
class ReferExpression:
    scene_id: str
    object_id: int
    object_name: str
    ann_id: int
    description: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens:
            raise DataError(f"expression {self.key}: empty token list")

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.scene_id, self.object_id, self.ann_id)

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "object_id": self.object_id,
            "object_name": self.object_name,
            "ann_id": self.ann_id,
            "description": self.description,
            "token": list(self.tokens),
        }


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    split: str
    scenes: Mapping[str, Scene]
    expressions: Sequence[ReferExpression]

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        check_unique_keys(self.expressions)
        for expr in self.expressions:
            scene = self.scenes.get(expr.scene_id)
            if scene is None:
                raise DataError(f"record {expr.key}: unknown scene {expr.scene_id!r}")
            if not scene.has_instance(expr.object_id):
                raise DataError(f"record {expr.key}: scene {expr.scene_id!r} has no object {expr.object_id}")

    def by_scene(self) -> dict[str, list[ReferExpression]]:
        out: dict[str, list[ReferExpression]] = {}
        for expr in self.expressions:
            out.setdefault(expr.scene_id, []).append(expr)
        return out


@dataclass(frozen=True, eq=False)
class Corpus:
    """One dataset source with its fixed splits."""

    name: str
    splits: Mapping[str, Dataset]
    config: Mapping | None = None

    def __getitem__(self, split: str) -> Dataset:
        try:
            return self.splits[split]
        except KeyError:
            raise DataError(f"corpus {self.name!r} has no split {split!r}") from None


@dataclass(frozen=True)
class DatasetStats:
    n_descriptions: int = 0
    n_scans: int = 0
    n_objects: int = 0
    objects_per_scan: float = 0.0
    descs_per_object: float = 0.0
    descs_per_scan: float = 0.0
    vocab_size: int = 0
    avg_desc_len: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


def check_unique_keys(expressions: Iterable[ReferExpression]) -> None:
    seen = set()
    for expr in expressions:
        if expr.key in seen:
            raise DataError(f"duplicate annotation id {expr.key}")
        seen.add(expr.key)


# -- scene I/O ---------------------------------------------------------------

def scene_descriptor(scene: Scene, tensors_name: str) -> dict:
    return {
        "scene_id": scene.scene_id,
        "instances": [
            {
                "object_id": inst.object_id,
                "object_name": inst.object_name,
                "box": inst.box.to_json(),
                "point_range": list(inst.point_range),
            }
            for inst in scene.instances
        ],
        "frames": [
            {
                "frame_id": f.frame_id,
                "pose": f.pose.as_matrix().reshape(-1).tolist(),
                "embedding_key": f.embedding_key,
            }
            for f in scene.frames
        ],
        "tensors": tensors_name,
    }


def scene_tensors(scene: Scene) -> dict[str, np.ndarray]:
    tensors = {"positions": scene.cloud.positions.astype(np.float32)}
    if scene.cloud.colors is not None:
        tensors["colors"] = scene.cloud.colors.astype(np.float32)
    if scene.cloud.normals is not None:
        tensors["normals"] = scene.cloud.normals.astype(np.float32)
    for key in sorted(scene.embeddings):
        tensors[key] = np.asarray(scene.embeddings[key], dtype=np.float32)
    return tensors


def save_scene(scene: Scene, path: str | os.PathLike) -> None:
    """Write ``<path>`` (JSON descriptor) and a sibling ``.cg3d`` container."""
    path = Path(path)
    tensors_path = path.with_suffix(".cg3d")
    container.save(tensors_path, scene_tensors(scene))
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_descriptor(scene, tensors_path.name), fh, indent=1)
        fh.write("\n")


def load_scene(path: str | os.PathLike) -> Scene:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            desc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read scene descriptor: {exc}") from exc
    scene_id = desc.get("scene_id", "")
    where = f"{path} (scene {scene_id!r})"
    try:
        tensors = container.load(path.parent / desc["tensors"])
    except (OSError, KeyError, container.ContainerError) as exc:
        raise DataError(f"{where}: missing or unreadable tensor container: {exc}") from exc
    if "positions" not in tensors:
        raise DataError(f"{where}: missing tensor 'positions'")
    try:
        cloud = PointCloud(
            tensors["positions"].astype(np.float64),
            None if "colors" not in tensors else tensors["colors"].astype(np.float64),
            None if "normals" not in tensors else tensors["normals"].astype(np.float64),
        )
        instances = [
            Instance(
                int(obj["object_id"]),
                str(obj["object_name"]),
                Aabb.from_json(obj["box"]),
                (int(obj["point_range"][0]), int(obj["point_range"][1])),
            )
            for obj in desc.get("instances", [])
        ]
        frames = []
        for fr in desc.get("frames", []):
            pose = np.asarray(fr["pose"], dtype=np.float64)
            if pose.shape != (16,):
                raise DataError(f"frame {fr.get('frame_id')!r}: pose must have 16 values")
            try:
                t = RigidTransform.from_matrix(pose.reshape(4, 4))
            except GeometryError as exc:
                raise DataError(f"frame {fr.get('frame_id')!r}: {exc}") from exc
            frames.append(CameraFrame(str(fr["frame_id"]), t, str(fr["embedding_key"])))
        embeddings = {}
        for fr in frames:
            if fr.embedding_key in tensors:
                embeddings[fr.embedding_key] = tensors[fr.embedding_key].astype(np.float64)
        return Scene(str(scene_id), cloud, instances, frames, embeddings)
    except (GeometryError, KeyError, TypeError) as exc:
        raise DataError(f"{where}: {exc}") from exc
    except DataError as exc:
        raise DataError(f"{where}: {exc}") from exc


# -- refer files ---------------------------------------------------------------

def expression_from_json(rec: dict) -> ReferExpression:
    tokens = rec.get("token")
    if tokens is None:
        tokens = tokenize(rec["description"])
    return ReferExpression(
        scene_id=str(rec["scene_id"]),
        object_id=int(rec["object_id"]),
        object_name=str(rec["object_name"]),
        ann_id=int(rec["ann_id"]),
        description=str(rec["description"]),
        tokens=tuple(str(t).lower() for t in tokens),
    )


def load_refer(path: str | os.PathLike) -> list[ReferExpression]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(expression_from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad refer record: {exc}") from exc
    check_unique_keys(out)
    return out


def save_refer(path: str | os.PathLike, expressions: Iterable[ReferExpression]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for expr in expressions:
            fh.write(json.dumps(expr.to_json(), ensure_ascii=False) + "\n")


# -- corpora -------------------------------------------------------------------

def save_corpus(corpus: Corpus, root: str | os.PathLike) -> None:
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    written = set()
    for split in SPLITS:
        if split not in corpus.splits:
            continue
        ds = corpus.splits[split]
        for sid in sorted(ds.scenes):
            if sid not in written:
                save_scene(ds.scenes[sid], root / "scenes" / f"{sid}.json")
                written.add(sid)
        save_refer(root / f"{split}.jsonl", ds.expressions)
    meta = {
        "name": corpus.name,
        "splits": [s for s in SPLITS if s in corpus.splits],
        "config": corpus.config,
    }
    with open(root / "corpus.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_corpus(root: str | os.PathLike, threads: int = 1) -> Corpus:
    root = Path(root)
    meta_path = root / "corpus.json"
    if meta_path.exists():
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    else:
        meta = {"name": root.name, "splits": [s for s in SPLITS if (root / f"{s}.jsonl").exists()]}
    refer = {s: load_refer(root / f"{s}.jsonl") for s in meta["splits"]}
    wanted = sorted({e.scene_id for exprs in refer.values() for e in exprs})
    missing = [sid for sid in wanted if not (root / "scenes" / f"{sid}.json").exists()]
    if missing:
        raise DataError(f"{root}: expressions reference unknown scenes {missing[:5]}")
    paths = [root / "scenes" / f"{sid}.json" for sid in wanted]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        scenes = dict(zip(wanted, pool.map(load_scene, paths)))
    splits = {}
    for split, exprs in refer.items():
        ids = {e.scene_id for e in exprs}
        splits[split] = Dataset(meta["name"], split, {sid: scenes[sid] for sid in sorted(ids)}, exprs)
    return Corpus(meta["name"], splits, meta.get("config"))


# -- statistics and buckets -----------------------------------------------------

def compute_stats(dataset: Dataset | Iterable[ReferExpression]) -> DatasetStats:
    exprs = list(dataset.expressions if isinstance(dataset, Dataset) else dataset)
    if not exprs:
        return DatasetStats()
    n_desc = len(exprs)
    n_scans = len({e.scene_id for e in exprs})
    n_objects = len({(e.scene_id, e.object_id) for e in exprs})
    vocab = {t for e in exprs for t in e.tokens}
    return DatasetStats(
        n_descriptions=n_desc,
        n_scans=n_scans,
        n_objects=n_objects,
        objects_per_scan=n_objects / n_scans,
        descs_per_object=n_desc / n_objects,
        descs_per_scan=n_desc / n_scans,
        vocab_size=len(vocab),
        avg_desc_len=sum(len(e.tokens) for e in exprs) / n_desc,
    )


def uniqueness_label(scene: Scene, expr: ReferExpression) -> str:
    if expr.scene_id != scene.scene_id:
        raise DataError(f"record {expr.key} does not belong to scene {scene.scene_id!r}")
    target = scene.instance(expr.object_id)
    same = sum(1 for inst in scene.instances if inst.object_name == target.object_name)
    return UNIQUE if same == 1 else MULTIPLE

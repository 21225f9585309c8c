"""Object proposals standing in for a trained 3D detector.

``gt-perturb`` jitters ground-truth boxes and adds near-duplicate and random
distractors; ``file`` reads boxes from a CG3D container.  Every proposal gets
an interpretable descriptor computed from the scene points it contains; the
model learns a linear map from descriptors to proposal features.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from crossground import container
from crossground.geometry import Aabb, iou3d_many

STRUCTURAL = ("wall", "floor", "ceiling")

# descriptor layout
BASE_COLUMNS = 8  # center(3) half_extents(3) log1p(count) log(volume)
COLOR_COLUMNS = slice(8, 11)
NORMAL_COLUMNS = slice(11, 14)
DESCRIPTOR_DIM = 14


class ProposalError(ValueError):
    pass


@dataclass(frozen=True)
class ProposalConfig:
    mode: str = "gt-perturb"
    jitter_sigma: float = 0.08  # center noise, meters
    extent_noise: float = 0.1  # log-normal sigma on half extents
    n_duplicates: int = 1  # extra noisy copies per GT box
    duplicate_scale: float = 2.5  # duplicates use this multiple of the noise
    n_random: int = 4
    path: str | None = None  # container directory for file mode

    def __post_init__(self):
        if self.mode not in ("gt-perturb", "file"):
            raise ProposalError(f"unknown proposal mode {self.mode!r}")
        if self.jitter_sigma < 0 or self.extent_noise < 0 or self.n_duplicates < 0 or self.n_random < 0:
            raise ProposalError("proposal noise settings must be non-negative")


def feature_columns(use_color: bool, use_normal: bool) -> np.ndarray:
    cols = list(range(BASE_COLUMNS))
    if use_color:
        cols += list(range(COLOR_COLUMNS.start, COLOR_COLUMNS.stop))
    if use_normal:
        cols += list(range(NORMAL_COLUMNS.start, NORMAL_COLUMNS.stop))
    return np.array(cols)


def descriptors(scene, boxes: np.ndarray) -> np.ndarray:
    """Per-box descriptors (k, 14) from the scene points inside each box."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    pos = scene.cloud.positions
    out = np.zeros((len(boxes), DESCRIPTOR_DIM))
    for i, b in enumerate(boxes):
        inside = np.all(np.abs(pos - b[:3]) <= b[3:] + 1e-9, axis=1)
        count = int(inside.sum())
        out[i, :3] = b[:3]
        out[i, 3:6] = b[3:]
        out[i, 6] = np.log1p(count)
        out[i, 7] = np.log(np.prod(2 * b[3:]) + 1e-6)
        if count:
            if scene.cloud.colors is not None:
                out[i, COLOR_COLUMNS] = scene.cloud.colors[inside].mean(axis=0)
            if scene.cloud.normals is not None:
                out[i, NORMAL_COLUMNS] = scene.cloud.normals[inside].mean(axis=0)
    return out


@dataclass(frozen=True, eq=False)
class ProposalSet:
    boxes: np.ndarray  # (m, 6) center + half extents; padded rows are zero
    descriptors: np.ndarray  # (m, 14)
    mask: np.ndarray  # (m,) True for real proposals
    source: str = "gt-perturb"

    def __len__(self):
        return len(self.boxes)

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def box(self, i: int) -> Aabb:
        if not self.mask[i]:
            raise ProposalError(f"proposal {i} is padding")
        return Aabb.from_array(self.boxes[i])

    def aabbs(self) -> list[Aabb]:
        return [Aabb.from_array(b) for b in self.boxes[self.mask]]

    def ious(self, gt: Aabb) -> np.ndarray:
        """IoU of every slot against ``gt``; padding gets -1."""
        out = np.full(len(self.boxes), -1.0)
        out[self.mask] = iou3d_many(gt, self.boxes[self.mask])
        return out

    def permuted(self, order) -> "ProposalSet":
        order = np.asarray(order)
        return ProposalSet(self.boxes[order], self.descriptors[order], self.mask[order], self.source)


def pad(scene, boxes: np.ndarray, m: int, source: str) -> ProposalSet:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)[:m]
    k = len(boxes)
    full = np.zeros((m, 6))
    full[:k] = boxes
    desc = np.zeros((m, DESCRIPTOR_DIM))
    desc[:k] = descriptors(scene, boxes)
    mask = np.zeros(m, dtype=bool)
    mask[:k] = True
    return ProposalSet(full, desc, mask, source)


def object_instances(scene):
    return [inst for inst in scene.instances if inst.object_name not in STRUCTURAL]


def scene_rng(seed: int, scene_id: str, stream: str) -> np.random.Generator:
    """Named, per-scene random substream."""
    digest = hashlib.blake2b(f"{stream}/{scene_id}".encode(), digest_size=8).digest()
    return np.random.default_rng(np.random.SeedSequence([seed, int.from_bytes(digest, "little")]))


def _perturb(rng, gt: np.ndarray, sigma: float, ext_sigma: float) -> np.ndarray:
    out = gt.copy()
    if sigma:
        out[:, :3] += rng.normal(0.0, sigma, (len(gt), 3))
    if ext_sigma:
        out[:, 3:] *= np.exp(rng.normal(0.0, ext_sigma, (len(gt), 3)))
    return out


def make_proposals(scene, config: ProposalConfig, m: int, rng: np.random.Generator) -> ProposalSet:
    if config.mode == "file":
        if not config.path:
            raise ProposalError("file proposals need a path")
        return load_proposals(os.path.join(config.path, f"{scene.scene_id}.cg3d"), scene, m)
    objs = object_instances(scene)
    if not objs:
        raise ProposalError(f"scene {scene.scene_id!r} has no object instances")
    gt = np.stack([inst.box.as_array() for inst in objs])
    parts = [_perturb(rng, gt, config.jitter_sigma, config.extent_noise)]
    for _ in range(config.n_duplicates):
        parts.append(_perturb(rng, gt, config.duplicate_scale * config.jitter_sigma, config.duplicate_scale * config.extent_noise))
    if config.n_random:
        lo = scene.cloud.positions.min(axis=0)
        hi = scene.cloud.positions.max(axis=0)
        size_ref = gt[rng.integers(len(gt), size=config.n_random), 3:]
        centers = np.column_stack([
            rng.uniform(lo[0], hi[0], config.n_random),
            rng.uniform(lo[1], hi[1], config.n_random),
            size_ref[:, 2],
        ])
        parts.append(np.column_stack([centers, size_ref]))
    boxes = np.concatenate(parts)
    boxes = boxes[rng.permutation(len(boxes))]
    return pad(scene, boxes, m, "gt-perturb")


def gt_proposals(scene, m: int) -> ProposalSet:
    """Ground-truth object boxes as proposals (scene order, truncated to m)."""
    objs = object_instances(scene)
    if not objs:
        raise ProposalError(f"scene {scene.scene_id!r} has no object instances")
    return pad(scene, np.stack([inst.box.as_array() for inst in objs]), m, "gt")


def save_proposals(path, proposals: ProposalSet) -> None:
    container.save(path, {
        "proposal_boxes": proposals.boxes[proposals.mask],
        "proposal_descriptors": proposals.descriptors[proposals.mask],
    })


def load_proposals(path, scene, m: int) -> ProposalSet:
    try:
        tensors = container.load(path)
    except OSError as exc:
        raise ProposalError(f"cannot read proposals {path}: {exc}") from exc
    if "proposal_boxes" not in tensors:
        raise ProposalError(f"{path}: missing tensor 'proposal_boxes'")
    boxes = tensors["proposal_boxes"].astype(np.float64).reshape(-1, 6)[:m]
    if "proposal_descriptors" in tensors:
        k = len(boxes)
        full = np.zeros((m, 6))
        full[:k] = boxes
        desc = np.zeros((m, DESCRIPTOR_DIM))
        desc[:k] = tensors["proposal_descriptors"].astype(np.float64)[:k]
        mask = np.zeros(m, dtype=bool)
        mask[:k] = True
        return ProposalSet(full, desc, mask, "file")
    return pad(scene, boxes, m, "file")

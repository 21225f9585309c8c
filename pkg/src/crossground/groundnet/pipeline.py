"""Scene caches, batch assembly and prediction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from crossground.embeddings import FileProvider
from crossground.geometry import Aabb
from crossground.groundnet.model import GroundingModel
from crossground.groundnet.proposals import (
    ProposalConfig,
    ProposalSet,
    gt_proposals,
    make_proposals,
    scene_rng,
)
from crossground.scenedata import ReferExpression, Scene
from crossground.viewretrieval import RetrievalConfig, select_views_batch, softmax


@dataclass
class Providers:
    """Text encoder plus an optional image provider.

    With ``image=None`` image embeddings come from the scene's own tensors.
    """

    text: object
    image: object | None = None

    def frame_embeddings(self, scene: Scene) -> np.ndarray:
        src = self.image if self.image is not None else FileProvider(scene.embeddings)
        if not scene.frames:
            return np.zeros((0, self.text_dim))
        return np.stack([src.image(f.embedding_key) for f in scene.frames])

    @property
    def text_dim(self) -> int:
        return self.text.dim


@dataclass
class SceneCache:
    scene: Scene
    proposals: ProposalSet
    view_index: np.ndarray  # (m, L) frame indices, -1 padded
    frame_embeddings: np.ndarray  # (F, c)
    cls_target: np.ndarray  # (m,) class index or -1


def localization_target(proposals: ProposalSet, gt: Aabb) -> tuple[int, bool]:
    """Index of the max-IoU proposal (ties -> lowest index).

    When nothing overlaps the GT box the nearest center wins and the second
    return value flags the fallback.
    """
    ious = proposals.ious(gt)
    best = float(ious.max())
    if best > 0.0:
        return int(np.argmax(ious)), False
    dist = np.linalg.norm(proposals.boxes[:, :3] - gt.center, axis=1)
    dist[~proposals.mask] = np.inf
    return int(np.argmin(dist)), True


def class_targets(model: GroundingModel, scene: Scene, proposals: ProposalSet, min_iou: float = 0.25) -> np.ndarray:
    out = np.full(len(proposals), -1, dtype=np.int64)
    objs = [inst for inst in scene.instances if model.class_id(inst.object_name) >= 0]
    if not objs:
        return out
    ious = np.stack([proposals.ious(inst.box) for inst in objs])  # (k, m)
    best = ious.argmax(axis=0)
    for i in np.flatnonzero(proposals.mask):
        if ious[best[i], i] >= min_iou:
            out[i] = model.class_id(objs[best[i]].object_name)
    return out


def build_cache(
    model: GroundingModel,
    scene: Scene,
    providers: Providers,
    retrieval: RetrievalConfig,
    proposal_config: ProposalConfig,
    seed: int = 0,
    proposals: ProposalSet | None = None,
) -> SceneCache:
    m = model.config.m
    if proposals is None:
        proposals = make_proposals(scene, proposal_config, m, scene_rng(seed, scene.scene_id, "proposals"))
    centers = proposals.boxes[:, :3]
    view_index = select_views_batch(centers, scene.frames, retrieval, origin=scene.min_corner)
    view_index[~proposals.mask] = -1
    return SceneCache(
        scene,
        proposals,
        view_index,
        providers.frame_embeddings(scene),
        class_targets(model, scene, proposals),
    )


def oracle_cache(model, scene, providers, retrieval, seed: int = 0) -> SceneCache:
    return build_cache(model, scene, providers, retrieval, ProposalConfig(), seed, gt_proposals(scene, model.config.m))


@dataclass
class Batch:
    token_ids: torch.Tensor  # (B, n) long
    word_mask: torch.Tensor  # (B, n) bool
    descriptors: torch.Tensor  # (B, m, 14)
    prop_mask: torch.Tensor  # (B, m) bool
    view_weights: torch.Tensor  # (B, m, F)
    frame_embeddings: torch.Tensor  # (B, F, c)
    missing: torch.Tensor  # (B, m) bool
    loc_target: torch.Tensor  # (B,) long
    cls_target: torch.Tensor  # (B, m) long
    no_overlap: np.ndarray  # (B,) bool diagnostics

    def to(self, dtype) -> "Batch":
        fields = dict(self.__dict__)
        for k in ("descriptors", "view_weights", "frame_embeddings"):
            fields[k] = fields[k].to(dtype)
        return Batch(**fields)


def view_weights(cache: SceneCache, texts: np.ndarray, text_filter: bool) -> tuple[np.ndarray, np.ndarray]:
    """Dense fusion weights (B, m, F) over the scene frames, and the missing mask."""
    idx = cache.view_index
    mask = idx >= 0
    missing = ~mask.any(axis=1)
    n_frames = len(cache.frame_embeddings)
    out = np.zeros((len(texts), len(idx), max(n_frames, 1)))
    if n_frames == 0 or not mask.any():
        return out, missing
    safe = np.where(mask, idx, 0)
    if text_filter:
        frame_logits = texts @ cache.frame_embeddings.T  # (B, F)
        logits = frame_logits[:, safe]  # (B, m, L)
    else:
        logits = np.zeros((len(texts),) + idx.shape)
    logits = np.where(mask[None], logits, -np.inf)
    logits = np.where(missing[None, :, None], 0.0, logits)
    w = np.where(mask[None], softmax(logits, axis=2), 0.0)
    rows = np.broadcast_to(np.arange(len(idx))[:, None], idx.shape)
    # frames selected for one proposal are distinct, so plain assignment suffices
    out[:, rows[mask], idx[mask]] = w[:, mask]
    return out, missing


def make_batch(
    model: GroundingModel,
    items: Sequence[tuple[SceneCache, ReferExpression]],
    providers: Providers,
    retrieval: RetrievalConfig,
    text_cache: dict | None = None,
) -> Batch:
    m = model.config.m
    n_max = max(len(e.tokens) for _, e in items)
    f_max = max(max(len(c.frame_embeddings), 1) for c, _ in items)
    c_dim = model.config.c
    B = len(items)
    token_ids = np.zeros((B, n_max), dtype=np.int64)
    word_mask = np.zeros((B, n_max), dtype=bool)
    desc = np.zeros((B, m, items[0][0].proposals.descriptors.shape[1]))
    prop_mask = np.zeros((B, m), dtype=bool)
    weights = np.zeros((B, m, f_max))
    frames = np.zeros((B, f_max, c_dim))
    missing = np.zeros((B, m), dtype=bool)
    loc_target = np.zeros(B, dtype=np.int64)
    cls_target = np.full((B, m), -1, dtype=np.int64)
    no_overlap = np.zeros(B, dtype=bool)
    for b, (cache, expr) in enumerate(items):
        ids = model.token_ids(expr.tokens)
        token_ids[b, : len(ids)] = ids
        word_mask[b, : len(ids)] = True
        desc[b] = cache.proposals.descriptors
        prop_mask[b] = cache.proposals.mask
        key = tuple(expr.tokens)
        if text_cache is not None and key in text_cache:
            text = text_cache[key]
        else:
            text = providers.text.text(expr.tokens)
            if text_cache is not None:
                text_cache[key] = text
        w, miss = view_weights(cache, text[None], retrieval.text_filter)
        n_frames = len(cache.frame_embeddings)
        weights[b, :, : w.shape[2]] = w[0]
        frames[b, :n_frames] = cache.frame_embeddings
        missing[b] = miss | ~cache.proposals.mask
        gt = cache.scene.instance(expr.object_id).box
        loc_target[b], no_overlap[b] = localization_target(cache.proposals, gt)
        cls_target[b] = cache.cls_target
    dtype = model.dtype
    return Batch(
        torch.from_numpy(token_ids),
        torch.from_numpy(word_mask),
        torch.from_numpy(desc).to(dtype),
        torch.from_numpy(prop_mask),
        torch.from_numpy(weights).to(dtype),
        torch.from_numpy(frames).to(dtype),
        torch.from_numpy(missing),
        torch.from_numpy(loc_target),
        torch.from_numpy(cls_target),
        no_overlap,
    )


@dataclass
class Prediction:
    key: tuple[str, int, int]
    box: Aabb
    index: int
    s_2d: np.ndarray | None = None
    s_3d: np.ndarray | None = None
    s_2d3d: np.ndarray | None = None

    def to_json(self) -> dict:
        scene_id, object_id, ann_id = self.key
        return {"scene_id": scene_id, "object_id": object_id, "ann_id": ann_id, "box": self.box.to_json()}


def first_argmax(scores: np.ndarray, mask: np.ndarray) -> int:
    s = np.where(mask, scores, -np.inf)
    return int(np.flatnonzero(s == s.max())[0])


@torch.no_grad()
def predict_cache(model: GroundingModel, cache: SceneCache, exprs: Sequence[ReferExpression], providers, retrieval, chunk: int = 64, text_cache=None):
    model.eval()
    out = []
    for start in range(0, len(exprs), chunk):
        part = exprs[start:start + chunk]
        batch = make_batch(model, [(cache, e) for e in part], providers, retrieval, text_cache)
        res = model(batch)
        s = {h: res.scores(h).double().numpy() for h in res.log_s}
        for b, expr in enumerate(part):
            idx = first_argmax(s["2d3d"][b], cache.proposals.mask)
            out.append(Prediction(expr.key, cache.proposals.box(idx), idx, s["2d"][b], s["3d"][b], s["2d3d"][b]))
    return out


def predict(model, scene, expr, providers, retrieval_config, proposal_config=ProposalConfig(), seed: int = 0, proposals=None):
    """Ground one expression; returns a :class:`Prediction` (box + three score vectors)."""
    cache = build_cache(model, scene, providers, retrieval_config, proposal_config, seed, proposals)
    return predict_cache(model, cache, [expr], providers, retrieval_config)[0]

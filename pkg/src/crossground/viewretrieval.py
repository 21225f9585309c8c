"""Per-proposal camera frame selection and text-weighted image feature fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

POSITIONAL = "positional-cosine"
VIEWING_ANGLE = "viewing-angle"
SCORE_MODES = (POSITIONAL, VIEWING_ANGLE)


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalConfig:
    L: int = 10
    threshold: float = 0.8
    score_mode: str = POSITIONAL
    text_filter: bool = True

    def __post_init__(self):
        if self.L < 1:
            raise RetrievalError("L must be a positive integer")
        if not -1.0 <= self.threshold <= 1.0:
            raise RetrievalError("threshold must lie in [-1, 1]")
        if self.score_mode not in SCORE_MODES:
            raise RetrievalError(f"unknown score_mode {self.score_mode!r}")


@dataclass(frozen=True)
class ViewSelection:
    frame_ids: tuple[str, ...]
    scores: tuple[float, ...]
    indices: tuple[int, ...] = ()

    def __len__(self):
        return len(self.frame_ids)


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine between every row of a (m, 3) and every row of b (f, 3); -1 for zero rows."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na[:, None] * nb[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (a @ b.T) / denom
    cos = np.where(denom > 0, np.clip(cos, -1.0, 1.0), -1.0)
    return cos


def score_matrix(centers, frames: Sequence, mode: str = POSITIONAL, origin=None) -> np.ndarray:
    """(m, F) view scores of proposal centers against camera frames."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if not frames:
        return np.zeros((len(centers), 0))
    positions = np.stack([f.pose.translation for f in frames])
    if mode == POSITIONAL:
        origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
        return _cosine_rows(centers - origin, positions - origin)
    if mode == VIEWING_ANGLE:
        axes = np.stack([-f.pose.rotation[:, 2] for f in frames])  # (F, 3) unit
        to_obj = centers[:, None, :] - positions[None, :, :]  # (m, F, 3)
        dist = np.linalg.norm(to_obj, axis=2)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.einsum("mfk,fk->mf", to_obj, axes) / dist
        return np.where(dist > 0, np.clip(cos, -1.0, 1.0), -1.0)
    raise RetrievalError(f"unknown score_mode {mode!r}")


def view_score(center, frame, mode: str = POSITIONAL, origin=None) -> float:
    """Score in [-1, 1]; degenerate (zero-length) geometry scores -1."""
    return float(score_matrix(center, [frame], mode, origin)[0, 0])


def _rank(scores: np.ndarray, frame_ids: Sequence[str], config: RetrievalConfig) -> list[int]:
    keep = [i for i in range(len(frame_ids)) if scores[i] >= config.threshold]
    keep.sort(key=lambda i: (-scores[i], frame_ids[i]))
    return keep[: config.L]


def select_views(center, frames: Sequence, config: RetrievalConfig = RetrievalConfig(), origin=None) -> ViewSelection:
    if not frames:
        return ViewSelection((), (), ())
    scores = score_matrix(center, frames, config.score_mode, origin)[0]
    ids = [f.frame_id for f in frames]
    order = _rank(scores, ids, config)
    return ViewSelection(
        tuple(ids[i] for i in order), tuple(float(scores[i]) for i in order), tuple(order)
    )


def select_views_batch(centers, frames: Sequence, config: RetrievalConfig, origin=None):
    """Selected frame indices per proposal as an (m, L) array padded with -1."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    out = np.full((len(centers), config.L), -1, dtype=np.int64)
    if not frames:
        return out
    scores = score_matrix(centers, frames, config.score_mode, origin)
    ids = [f.frame_id for f in frames]
    for row in range(len(centers)):
        order = _rank(scores[row], ids, config)
        out[row, : len(order)] = order
    return out


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def fuse_views(image_embeddings, text, text_filter: bool = True):
    """Softmax-weight image embeddings by their inner product with the text.

    Returns ``(weights, fused)`` with ``fused = sum_i weights[i] * v_i``.
    With ``text_filter=False`` the weights are uniform.
    """
    views = np.asarray(image_embeddings, dtype=np.float64)
    if views.ndim != 2 or len(views) == 0:
        raise RetrievalError("no views")
    if text_filter:
        weights = softmax(views @ np.asarray(text, dtype=np.float64))
    else:
        weights = np.full(len(views), 1.0 / len(views))
    return weights, weights @ views


def fuse_views_batch(view_embeddings: np.ndarray, view_mask: np.ndarray, texts: np.ndarray, text_filter: bool = True):
    """Batched :func:`fuse_views`.

    ``view_embeddings`` is (m, L, c) with validity ``view_mask`` (m, L);
    ``texts`` is (B, c).  Returns fused (B, m, c) and ``missing`` (m,) for
    proposals without any selected view (their fused rows are zero).
    """
    mask = np.asarray(view_mask, dtype=bool)
    missing = ~mask.any(axis=1)
    if text_filter:
        logits = np.einsum("mlc,bc->bml", view_embeddings, texts)
    else:
        logits = np.zeros((len(texts),) + mask.shape)
    logits = np.where(mask[None], logits, -np.inf)
    logits = np.where(missing[None, :, None], 0.0, logits)
    weights = softmax(logits, axis=2)
    weights = np.where(mask[None], weights, 0.0)
    fused = np.einsum("bml,mlc->bmc", weights, view_embeddings)
    return fused, missing

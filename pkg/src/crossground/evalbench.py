"""Baselines, grounding accuracy, the zero-shot cross-dataset protocol and reports."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from crossground.geometry import Aabb, iou3d
from crossground.groundnet.model import GroundingModel, ModelConfig
from crossground.groundnet.pipeline import (
    Prediction,
    Providers,
    build_cache,
    first_argmax,
    oracle_cache,
    predict_cache,
)
from crossground.groundnet.proposals import ProposalConfig, ProposalSet, scene_rng
from crossground.groundnet.training import TrainConfig, new_model, train
from crossground.scenedata import MULTIPLE, UNIQUE, Dataset, uniqueness_label
from crossground.viewretrieval import RetrievalConfig

THRESHOLDS = (0.25, 0.5)
BUCKETS = (UNIQUE, MULTIPLE, "overall")
METHODS = ("model", "random", "objdetbest", "objoracle")


class EvalError(ValueError):
    pass


def _tkey(t: float) -> str:
    return f"{t:g}"


# -- baselines --------------------------------------------------------------------

def baseline_random(proposals: ProposalSet, rng: np.random.Generator) -> Aabb:
    valid = np.flatnonzero(proposals.mask)
    if len(valid) == 0:
        raise EvalError("empty proposal set")
    return proposals.box(int(valid[rng.integers(len(valid))]))


def baseline_objdetbest(proposals: ProposalSet, gt: Aabb) -> Aabb:
    if proposals.n_valid == 0:
        raise EvalError("empty proposal set")
    return proposals.box(first_argmax(proposals.ious(gt), proposals.mask))


def baseline_objoracle(model: GroundingModel, scene, expr, providers: Providers, retrieval: RetrievalConfig = RetrievalConfig()) -> Aabb:
    cache = oracle_cache(model, scene, providers, retrieval)
    return predict_cache(model, cache, [expr], providers, retrieval)[0].box


# -- reports ----------------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: dict  # bucket -> {"0.25": acc, "0.5": acc}
    counts: dict  # bucket -> n
    records: list  # per description, sorted by key
    macro_overall: dict = field(default_factory=dict)  # mean of bucket accuracies
    meta: dict = field(default_factory=dict)

    def acc(self, bucket: str = "overall", threshold: float = 0.25) -> float:
        return self.accuracy[bucket][_tkey(threshold)]

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "counts": self.counts,
            "macro_overall": self.macro_overall,
            "meta": self.meta,
            "records": self.records,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        records = [dict(r, key=list(r["key"])) for r in obj["records"]]
        return cls(obj["accuracy"], obj["counts"], records, obj.get("macro_overall", {}), obj.get("meta", {}))

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return NotImplemented
        return self.to_json() == other.to_json()


def _aggregate(records: Sequence[dict], meta: dict | None = None) -> EvalReport:
    accuracy, counts = {}, {}
    for bucket in BUCKETS:
        rows = records if bucket == "overall" else [r for r in records if r["bucket"] == bucket]
        counts[bucket] = len(rows)
        accuracy[bucket] = {
            _tkey(t): (sum(1 for r in rows if r["hit"][_tkey(t)]) / len(rows) if rows else 0.0)
            for t in THRESHOLDS
        }
    macro = {
        _tkey(t): float(np.mean([accuracy[b][_tkey(t)] for b in (UNIQUE, MULTIPLE) if counts[b]] or [0.0]))
        for t in THRESHOLDS
    }
    return EvalReport(accuracy, counts, list(records), macro, dict(meta or {}))


def evaluate(predictions: Iterable[Prediction | dict], dataset: Dataset, meta: dict | None = None) -> EvalReport:
    """Score one prediction per expression; hits use strict ``IoU > threshold``."""
    by_key = {}
    for p in predictions:
        key, box = (p.key, p.box) if isinstance(p, Prediction) else prediction_from_json(p)
        key = tuple(key)
        if key in by_key:
            raise EvalError(f"duplicate prediction for {key}")
        by_key[key] = box
    missing = [e.key for e in dataset.expressions if e.key not in by_key]
    if missing:
        raise EvalError(f"missing predictions for {len(missing)} expressions, e.g. {missing[:5]}")
    extra = set(by_key) - {e.key for e in dataset.expressions}
    if extra:
        raise EvalError(f"predictions for unknown expressions {sorted(extra)[:5]}")
    records = []
    for expr in sorted(dataset.expressions, key=lambda e: e.key):
        scene = dataset.scenes[expr.scene_id]
        iou = iou3d(by_key[expr.key], scene.instance(expr.object_id).box)
        records.append({
            "key": list(expr.key),
            "iou": iou,
            "bucket": uniqueness_label(scene, expr),
            "hit": {_tkey(t): bool(iou > t) for t in THRESHOLDS},
        })
    return _aggregate(records, meta)


def prediction_from_json(obj: dict):
    return (obj["scene_id"], int(obj["object_id"]), int(obj["ann_id"])), Aabb.from_json(obj["box"])


def write_predictions(path, predictions: Iterable[Prediction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in sorted(predictions, key=lambda p: p.key):
            fh.write(json.dumps(p.to_json()) + "\n")


def read_predictions(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def render_report(report: EvalReport, fmt: str = "text", title: str = "") -> str:
    if fmt == "json":
        return json.dumps(report.to_json(), sort_keys=True, indent=1) + "\n"
    if fmt != "text":
        raise EvalError(f"unknown report format {fmt!r}")
    lines = []
    if title:
        lines.append(title)
    head = f"{'':10s}" + "".join(f"{b:>20s}" for b in BUCKETS)
    sub = f"{'':10s}" + "".join(f"{'Acc@.25':>10s}{'Acc@.5':>10s}" for _ in BUCKETS)
    row = f"{'accuracy':10s}" + "".join(
        f"{100 * report.accuracy[b]['0.25']:10.2f}{100 * report.accuracy[b]['0.5']:10.2f}" for b in BUCKETS
    )
    cnt = f"{'count':10s}" + "".join(f"{report.counts[b]:>20d}" for b in BUCKETS)
    macro = f"{'macro':10s}" + f"{'':40s}" + f"{100 * report.macro_overall['0.25']:10.2f}{100 * report.macro_overall['0.5']:10.2f}"
    lines += [head, sub, row, cnt, macro]
    return "\n".join(lines) + "\n"


# -- running methods over a dataset ---------------------------------------------------

def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CROSSGROUND_THREADS", "1")))
    except ValueError:
        return 1


def run_method(
    method: str,
    dataset: Dataset,
    model: GroundingModel | None,
    providers: Providers,
    retrieval: RetrievalConfig = RetrievalConfig(),
    proposal_config: ProposalConfig = ProposalConfig(),
    seed: int = 0,
    m: int | None = None,
) -> list[Prediction]:
    """Predictions of ``method`` for every expression, in dataset key order.

    Proposal sets depend only on (seed, scene id), so all methods see the
    same proposals for a scene.
    """
    if method not in METHODS:
        raise EvalError(f"unknown method {method!r}; expected one of {METHODS}")
    if method in ("model", "objoracle") and model is None:
        raise EvalError(f"method {method!r} needs a model")
    if model is None:
        model = _proposal_only_model(m or ModelConfig().m, providers)
    by_scene = dataset.by_scene()

    def one(scene_id):
        scene = dataset.scenes[scene_id]
        exprs = by_scene[scene_id]
        if method == "objoracle":
            cache = oracle_cache(model, scene, providers, retrieval, seed)
            return predict_cache(model, cache, exprs, providers, retrieval)
        cache = build_cache(model, scene, providers, retrieval, proposal_config, seed)
        if method == "model":
            return predict_cache(model, cache, exprs, providers, retrieval)
        out = []
        for expr in exprs:
            gt = scene.instance(expr.object_id).box
            if method == "objdetbest":
                box = baseline_objdetbest(cache.proposals, gt)
            else:
                box = baseline_random(cache.proposals, scene_rng(seed, f"{scene_id}/{expr.object_id}/{expr.ann_id}", "random"))
            out.append(Prediction(expr.key, box, -1))
        return out

    scene_ids = sorted(by_scene)
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        parts = list(pool.map(one, scene_ids))
    return [p for part in parts for p in part]


def _proposal_only_model(m: int, providers: Providers) -> GroundingModel:
    # baselines need proposal sets but no trained weights
    cfg = ModelConfig(d=4, n_heads=1, n_layers=0, m=m, c=providers.text_dim, word_dim=2, ffn_dim=4)
    return GroundingModel(cfg, [], [])


def random_expectation(dataset: Dataset, providers: Providers, proposal_config: ProposalConfig, m: int, seed: int = 0) -> dict:
    """Closed-form Random accuracy: mean over descriptions of k/m, the share of
    valid proposals with IoU above the threshold."""
    model = _proposal_only_model(m, providers)
    retrieval = RetrievalConfig()
    acc = {_tkey(t): [] for t in THRESHOLDS}
    for scene_id, exprs in sorted(dataset.by_scene().items()):
        cache = build_cache(model, dataset.scenes[scene_id], providers, retrieval, proposal_config, seed)
        for expr in exprs:
            ious = cache.proposals.ious(dataset.scenes[scene_id].instance(expr.object_id).box)[cache.proposals.mask]
            for t in THRESHOLDS:
                acc[_tkey(t)].append(float(np.mean(ious > t)))
    return {k: float(np.mean(v)) if v else 0.0 for k, v in acc.items()}


# -- cross-dataset protocol -------------------------------------------------------------

@dataclass
class ProtocolResult:
    same: EvalReport
    cross: EvalReport
    model: GroundingModel

    def __iter__(self):
        return iter((self.same, self.cross))


def cross_protocol(
    source,
    target,
    model_config: ModelConfig,
    train_config: TrainConfig,
    retrieval_config: RetrievalConfig,
    providers: Providers,
    proposal_config: ProposalConfig = ProposalConfig(),
    eval_split: str = "val",
) -> ProtocolResult:
    """Train on the source train split; evaluate on source and target ``eval_split``.

    The target corpus contributes no training signal.
    """
    model = new_model(model_config, source["train"])
    train(model, source["train"], train_config, providers, retrieval_config, proposal_config)
    reports = []
    for corpus in (source, target):
        ds = corpus[eval_split]
        preds = run_method("model", ds, model, providers, retrieval_config, proposal_config, train_config.seed)
        reports.append(evaluate(preds, ds, {"dataset": ds.name, "split": eval_split}))
    return ProtocolResult(reports[0], reports[1], model)

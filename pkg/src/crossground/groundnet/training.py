"""Mini-batch training with AdamW and cosine annealing, plus checkpoint I/O."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Sequence

import torch

from crossground import container
from crossground.groundnet.model import GroundingModel, ModelConfig, loss_total
from crossground.groundnet.pipeline import Providers, build_cache, make_batch
from crossground.groundnet.proposals import STRUCTURAL, ProposalConfig, scene_rng
from crossground.scenedata import Dataset
from crossground.viewretrieval import RetrievalConfig

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "lr", "L_cls", "L_loc_2d", "L_loc_3d", "L_loc_2d3d", "L_det", "total")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_scenes: int = 8
    chunk_size: int = 32
    lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_scenes < 1 or self.chunk_size < 1:
            raise TrainingError("epochs, batch_scenes and chunk_size must be positive")
        if not self.lr > 0 or self.min_lr < 0 or self.weight_decay < 0:
            raise TrainingError("learning rates must be positive and weight decay non-negative")


@dataclass
class TrainResult:
    model: GroundingModel
    log: list[dict]
    steps: int


@contextmanager
def single_threaded():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def build_vocab(dataset: Dataset) -> tuple[list[str], list[str]]:
    """Sorted training tokens and non-structural class names."""
    tokens = sorted({t for e in dataset.expressions for t in e.tokens})
    classes = sorted({
        inst.object_name
        for scene in dataset.scenes.values()
        for inst in scene.instances
        if inst.object_name not in STRUCTURAL
    })
    return tokens, classes


def new_model(config: ModelConfig, dataset: Dataset) -> GroundingModel:
    vocab, classes = build_vocab(dataset)
    return GroundingModel(config, vocab, classes)


def epoch_plan(dataset: Dataset, config: TrainConfig, epoch: int) -> list[list]:
    """Chunks of expressions: scenes are shuffled into groups of ``batch_scenes``;
    each group's descriptions are shuffled and cut into ``chunk_size`` pieces."""
    rng = scene_rng(config.seed, f"epoch{epoch}", "batching")
    by_scene = dataset.by_scene()
    scene_ids = sorted(by_scene)
    order = [scene_ids[i] for i in rng.permutation(len(scene_ids))]
    chunks = []
    for g in range(0, len(order), config.batch_scenes):
        exprs = [e for sid in order[g:g + config.batch_scenes] for e in by_scene[sid]]
        exprs = [exprs[i] for i in rng.permutation(len(exprs))]
        chunks.extend(exprs[k:k + config.chunk_size] for k in range(0, len(exprs), config.chunk_size))
    return chunks


def train(
    model: GroundingModel,
    dataset: Dataset,
    train_config: TrainConfig,
    providers: Providers,
    retrieval: RetrievalConfig = RetrievalConfig(),
    proposal_config: ProposalConfig = ProposalConfig(),
    log_path: str | os.PathLike | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Train in place, single-threaded and deterministic for a fixed seed."""
    if not dataset.expressions:
        raise TrainingError("training split has no expressions")
    with single_threaded():
        torch.manual_seed(train_config.seed)
        caches = {
            sid: build_cache(model, scene, providers, retrieval, proposal_config, train_config.seed)
            for sid, scene in sorted(dataset.scenes.items())
        }
        plans = [epoch_plan(dataset, train_config, ep) for ep in range(train_config.epochs)]
        total_steps = sum(len(p) for p in plans)
        if max_steps is not None:
            total_steps = min(total_steps, max_steps)
        opt = torch.optim.AdamW(model.parameters(), lr=train_config.lr, weight_decay=train_config.weight_decay)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total_steps, 1), eta_min=train_config.min_lr)
        text_cache: dict = {}
        rows: list[dict] = []
        step = 0
        model.train()
        for epoch, plan in enumerate(plans):
            for chunk in plan:
                if step >= total_steps:
                    break
                batch = make_batch(model, [(caches[e.scene_id], e) for e in chunk], providers, retrieval, text_cache)
                lr = opt.param_groups[0]["lr"]
                opt.zero_grad()
                total, parts = loss_total(model(batch), batch, model.config)
                if not torch.isfinite(total):
                    raise TrainingError(f"non-finite loss at step {step} (epoch {epoch}): {parts}")
                total.backward()
                opt.step()
                sched.step()
                rows.append({"step": step, "epoch": epoch, "lr": lr, **parts})
                step += 1
            if rows:
                log.info("epoch %d step %d loss %.4f", epoch, step, rows[-1]["total"])
        model.eval()
    if log_path is not None:
        write_loss_log(log_path, rows)
    return TrainResult(model, rows, step)


def write_loss_log(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# -- checkpoints ---------------------------------------------------------------------

def checkpoint_tensors(model: GroundingModel, extra_meta: dict | None = None) -> dict:
    meta = {
        "model": dataclasses.asdict(model.config),
        "vocab": model.vocab[1:],
        "classes": model.class_names,
        "run": extra_meta or {},
    }
    tensors = {"meta.json": container.encode_text(json.dumps(meta, sort_keys=True))}
    for name, p in model.state_dict().items():
        tensors[f"param/{name}"] = p.detach().to(torch.float32).numpy()
    return tensors


def save_checkpoint(path, model: GroundingModel, extra_meta: dict | None = None) -> None:
    container.save(path, checkpoint_tensors(model, extra_meta))


def load_checkpoint(path) -> tuple[GroundingModel, dict]:
    tensors = container.load(path)
    if "meta.json" not in tensors:
        raise TrainingError(f"{path}: not a checkpoint (no meta.json)")
    meta = json.loads(container.decode_text(tensors["meta.json"]))
    model = GroundingModel(ModelConfig(**meta["model"]), meta["vocab"], meta["classes"])
    state = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("param/")}
    model.load_state_dict(state)
    model.eval()
    return model, meta.get("run", {})

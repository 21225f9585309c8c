"""Trainable grounding model and its data pipeline."""

from crossground.groundnet.gradcheck import grad_check
from crossground.groundnet.model import (
    GroundingModel,
    ModelConfig,
    Outputs,
    combine_loss,
    loss_total,
    masked_log_softmax,
)
from crossground.groundnet.pipeline import (
    Batch,
    Prediction,
    Providers,
    SceneCache,
    build_cache,
    localization_target,
    make_batch,
    oracle_cache,
    predict,
    predict_cache,
)
from crossground.groundnet.proposals import ProposalConfig, ProposalSet, gt_proposals, make_proposals
from crossground.groundnet.training import (
    TrainConfig,
    TrainingError,
    load_checkpoint,
    new_model,
    save_checkpoint,
    train,
)

__all__ = [
    "Batch", "GroundingModel", "ModelConfig", "Outputs", "Prediction", "ProposalConfig",
    "ProposalSet", "Providers", "SceneCache", "TrainConfig", "TrainingError", "build_cache",
    "combine_loss", "grad_check", "gt_proposals", "load_checkpoint", "localization_target",
    "loss_total", "make_batch", "make_proposals", "masked_log_softmax", "new_model",
    "oracle_cache", "predict", "predict_cache", "save_checkpoint", "train",
]

"""Triplet training: loss, batch sizing, augmentation, Adam and the training loop."""

from svtnet.training.augment import augment
from svtnet.training.batching import BatchSizer, dynamic_batch_update
from svtnet.training.loss import (
    DegenerateBatchError,
    PairLabels,
    mine_batch_hard,
    pair_labels,
    triplet_loss_batch_hard,
)
from svtnet.training.optim import NonFiniteGradientError, OptimState, adam_step, learning_rate
from svtnet.training.trainer import EpochRecord, TrainResult, train

__all__ = [
    "augment",
    "BatchSizer",
    "dynamic_batch_update",
    "DegenerateBatchError",
    "PairLabels",
    "mine_batch_hard",
    "pair_labels",
    "triplet_loss_batch_hard",
    "NonFiniteGradientError",
    "OptimState",
    "adam_step",
    "learning_rate",
    "EpochRecord",
    "TrainResult",
    "train",
]

"""Continual learning with rank-selective low-rank adapters on a toy dual encoder."""

from .adapter import (
    AdapterConfig,
    RankSelectiveAdapter,
    ThresholdSchedule,
    attach_adapters,
    count_parameters,
    delta,
    merge,
    merge_adapters,
    proximal_step,
    prune,
    threshold_at,
)
from .model import DualEncoderConfig, DualEncoderModel, EncoderConfig, classify, contrastive_loss
from .tensor import Tensor, backward, finite_diff_check
from .trainer import AccuracyMatrix, TrainConfig, evaluate, metrics, pretrain, run_stream, train_task

__version__ = "0.1.0"

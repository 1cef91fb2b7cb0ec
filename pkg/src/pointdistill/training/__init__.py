"""Optimisation, augmentation, synthetic data and the train/eval loops."""
from .augment import AugmentConfig, augment, counter_rng, sample_augment
from .data import SHAPES, class_names, generate_dataset, make_shape, teacher_for
from .loops import (LOSS_MODES, FinetuneConfig, TrainConfig, TrainResult, build_pretrain_model,
                    epoch_order, evaluate, finetune_classify, format_record, make_checkpoint,
                    mean_iou, predict_logits, prepare_batch, pretrain, probe_decoder, recon_probe)
from .optim import (NO_DECAY_ROLES, AdamWState, NonFiniteGradientError, ScheduleConfig,
                    adamw_step, decays, lr_at)

__all__ = [
    "AugmentConfig", "augment", "counter_rng", "sample_augment", "SHAPES", "class_names",
    "generate_dataset", "make_shape", "teacher_for", "LOSS_MODES", "FinetuneConfig",
    "TrainConfig", "TrainResult", "build_pretrain_model", "epoch_order", "evaluate",
    "finetune_classify", "format_record", "make_checkpoint", "mean_iou", "predict_logits",
    "prepare_batch", "pretrain", "probe_decoder", "recon_probe", "NO_DECAY_ROLES",
    "AdamWState", "NonFiniteGradientError", "ScheduleConfig", "adamw_step", "decays", "lr_at",
]

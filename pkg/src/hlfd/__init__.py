"""Hierarchical layer-selective feedback distillation for binary segmentation."""

from .autodiff import Tensor, backward, gradcheck, no_grad
from .losses import (DistillConfig, LossBreakdown, attention_map, hlfd_total, ifd_loss, ipd_loss,
                     ufd_loss, unify_mid_features, unify_mid_predictions, upd_loss)
from .nets import NetConfig, build_student, build_teacher, forward_taps, student_config, teacher_config

__all__ = [
    "Tensor", "backward", "gradcheck", "no_grad",
    "DistillConfig", "LossBreakdown", "attention_map", "hlfd_total", "ifd_loss", "ipd_loss",
    "ufd_loss", "unify_mid_features", "unify_mid_predictions", "upd_loss",
    "NetConfig", "build_student", "build_teacher", "forward_taps", "student_config", "teacher_config",
]

__version__ = "0.1.0"

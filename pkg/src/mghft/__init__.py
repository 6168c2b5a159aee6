"""Multi-granularity hierarchical fusion for sticker emotion recognition,
at desk scale: numpy tensor engine with reverse-mode autodiff, miniature
pyramid vision backbone, multi-view text pipeline, fusion operators and
alignment losses, and a training/ablation CLI."""

from .autodiff import Tensor, Parameter
from .backbone import BackboneConfig, PyramidBackbone, StageFeatures
from .fusion import (
    AlignmentLossConfig,
    alignment_loss,
    contrastive_loss,
    global_fusion,
    mlce_loss,
    soft_fusion,
)
from .model import FusionConfig, MGHFTModel, TrainConfig

__all__ = [
    "Tensor",
    "Parameter",
    "BackboneConfig",
    "PyramidBackbone",
    "StageFeatures",
    "AlignmentLossConfig",
    "FusionConfig",
    "MGHFTModel",
    "TrainConfig",
    "soft_fusion",
    "global_fusion",
    "contrastive_loss",
    "mlce_loss",
    "alignment_loss",
]

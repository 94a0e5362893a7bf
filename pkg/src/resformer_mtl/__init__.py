"""Multi-task ResFormer U-Net for joint lesion segmentation and classification."""
from .config import ModelConfig, TrainConfig
from .heads import LossWeights, MtlOutput, combined_loss, dice_loss, weighted_multilabel_loss
from .model import ResFormerMTL

__all__ = [
    "LossWeights",
    "ModelConfig",
    "MtlOutput",
    "ResFormerMTL",
    "TrainConfig",
    "combined_loss",
    "dice_loss",
    "weighted_multilabel_loss",
]

__version__ = "0.1.0"

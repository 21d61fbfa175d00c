"""Variable-input-size segmentation fine-tuning with PEG, multiscale adapters and CNN fusion."""

from .adapter import AdapterConfig, SMAdapter, ablation_variants
from .cnn_encoder import CnnConfig, CnnEncoder
from .data import AugmentConfig, Sample, augment, generate_shapes, miou
from .image_encoder import EncoderConfig, FreezePolicy, ImageEncoder, apply_freeze
from .macs import count_macs, size_sweep
from .model import GSAM, ModelConfig, load_checkpoint, parameter_summary, save_checkpoint
from .trainer import TrainConfig, cosine_lr, train

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig", "SMAdapter", "ablation_variants", "CnnConfig", "CnnEncoder", "AugmentConfig",
    "Sample", "augment", "generate_shapes", "miou", "EncoderConfig", "FreezePolicy", "ImageEncoder",
    "apply_freeze", "count_macs", "size_sweep", "GSAM", "ModelConfig", "load_checkpoint",
    "parameter_summary", "save_checkpoint", "TrainConfig", "cosine_lr", "train",
]

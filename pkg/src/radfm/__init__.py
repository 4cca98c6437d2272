"""Desk-scale radiology foundation-model toolkit: ViT pretraining by
self-distillation and frozen or low-rank adaptation to classification,
segmentation and captioning."""

from .captioning import Captioner, PatchMerger, ToyDecoder, caption_loss, generate, patch_merge
from .classification import ViTClassifier, lora_wrap, merge_lora
from .core import ParameterStore, TrainSchedule, load_checkpoint, save_checkpoint
from .dense import DenseSegmenter, tokens_to_map
from .exceptions import (
    ConfigError, DataError, DomainError, IntegrityError, NumericError, RadfmError, ShapeError,
)
from .ssl import PretrainConfig, SelfDistillationPretrainer, dino_loss, ibot_loss
from .vit import TokenSequence, VisionTransformer, build_encoder

__version__ = "0.1.0"

__all__ = [
    "Captioner", "ConfigError", "DataError", "DenseSegmenter", "DomainError", "IntegrityError",
    "NumericError", "ParameterStore", "PatchMerger", "PretrainConfig", "RadfmError",
    "SelfDistillationPretrainer", "ShapeError", "TokenSequence", "ToyDecoder", "TrainSchedule",
    "ViTClassifier", "VisionTransformer", "build_encoder", "caption_loss", "dino_loss",
    "generate", "ibot_loss", "load_checkpoint", "lora_wrap", "merge_lora", "patch_merge",
    "save_checkpoint", "tokens_to_map",
]

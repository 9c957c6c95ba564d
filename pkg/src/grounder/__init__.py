"""Grounding caption nouns to entity masks on synthetic scenes."""

__version__ = "0.1.0"

from .colormap import (
    EntityMaskSet,
    Palette,
    centroid_palette,
    decode_colormap,
    encode_masks,
    sample_palette,
)
from .config import ModelConfig, RunConfig, TrainConfig
from .datagen import Scene, SceneConfig, TaskKind, generate_dataset, generate_scene
from .model import GroundingModel, load_checkpoint, save_checkpoint

__all__ = [
    "EntityMaskSet",
    "Palette",
    "sample_palette",
    "centroid_palette",
    "encode_masks",
    "decode_colormap",
    "Scene",
    "SceneConfig",
    "TaskKind",
    "generate_scene",
    "generate_dataset",
    "ModelConfig",
    "TrainConfig",
    "RunConfig",
    "GroundingModel",
    "save_checkpoint",
    "load_checkpoint",
]

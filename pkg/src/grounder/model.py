"""The assembled grounding model and its checkpoint format.

Wires the colormap encoder, image encoder, visual projector, fusion module,
mask decoder, language model, and association head behind one config.
Checkpoints are a single .npz archive of named arrays with a JSON header
carrying the config, vocabulary, and training state.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .association import AssociationHead
from .config import ModelConfig, from_dict, to_dict
from .datagen import Scene
from .encoders import ColormapEncoder, GridFeatures, ImageEncoder, PYRAMID_SCALES, VisualProjector
from .fusion import FusedPyramid, ResoBlend
from .language import LanguageModel, Vocabulary
from .layers import init_parameters
from .mask_decoder import DecoderOutputs, MaskDecoder, downsample_masks

CHECKPOINT_FORMAT = 1


@dataclass
class PreparedScene:
    """Scene tensors and token ids staged for the model's dtype."""

    scene: Scene
    image: torch.Tensor        # (3, h, w) in [0, 1]
    colormap: torch.Tensor     # (3, h, w) in [0, 1]
    full_masks: torch.Tensor   # (n, h, w) float
    coverage: torch.Tensor     # (n, h/4, w/4) float in [0, 1]
    assoc: np.ndarray          # (m, n) binary
    describe_prompt: list[int]
    extract_prompt: list[int]
    caption_answer: list[int]
    noun_answer: list[int]


class GroundingModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None, vocab: Vocabulary | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.config.validate()
        self.vocab = vocab or Vocabulary.default()
        cfg = self.config

        level_dims = dict(zip(PYRAMID_SCALES, cfg.pyramid_widths))
        self.colormap_encoder = ColormapEncoder(cfg.pyramid_widths)
        self.image_encoder = ImageEncoder(
            cfg.image_size, cfg.patch_size, cfg.vision_width, cfg.vision_depth, cfg.vision_heads
        )
        self.projector = VisualProjector(cfg.vision_width, cfg.lang_width)
        self.fusion = ResoBlend(cfg.vision_width, level_dims, cfg.fused_width, cfg.resoblend)
        self.mask_decoder = MaskDecoder(
            cfg.fused_width,
            cfg.image_size,
            embed_dim=cfg.decoder.embed_dim,
            num_queries=cfg.decoder.num_queries,
            depth=cfg.decoder.depth,
            heads=cfg.decoder.heads,
            mask_dim=cfg.decoder.mask_dim,
        )
        self.language = LanguageModel(
            self.vocab, cfg.lang_width, cfg.lang_depth, cfg.lang_heads, cfg.context_limit
        )
        self.association = AssociationHead(
            cfg.lang_width, cfg.decoder.embed_dim, cfg.association.width, cfg.association.head
        )
        self.to(self.dtype)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.config.dtype == "float64" else torch.float32

    def init_parameters(self, seed: int) -> None:
        init_parameters(self, seed)

    def encode_image(self, image: torch.Tensor) -> GridFeatures:
        return self.image_encoder(image)

    def forward_segmentation(self, grid: GridFeatures, colormap: torch.Tensor
                             ) -> tuple[DecoderOutputs, FusedPyramid]:
        pyramid = self.colormap_encoder(colormap)
        fused = self.fusion(grid, pyramid)
        return self.mask_decoder(fused), fused

    # ------------------------------------------------------------------
    # Data staging

    def prepare_scene(self, scene: Scene) -> PreparedScene:
        from .datagen import TaskKind, build_instruction, build_target_text

        dt = self.dtype
        image = torch.from_numpy(scene.image.transpose(2, 0, 1).copy()).to(dt) / 255.0
        cm = torch.from_numpy(scene.colormap().transpose(2, 0, 1).copy()).to(dt) / 255.0
        masks = torch.from_numpy(scene.mask_set.masks.copy()).to(dt)
        coverage = downsample_masks(masks, 4).to(dt)
        tok = self.vocab.tokenize
        return PreparedScene(
            scene=scene,
            image=image,
            colormap=cm,
            full_masks=masks,
            coverage=coverage,
            assoc=scene.assoc_matrix,
            describe_prompt=tok(build_instruction(TaskKind.IMG_DES)),
            extract_prompt=tok(build_instruction(TaskKind.NOUN_EXT, scene.caption)),
            caption_answer=tok(scene.caption),
            noun_answer=tok(build_target_text(scene)),
        )


# ---------------------------------------------------------------------------
# Checkpoint IO


def save_checkpoint(model: GroundingModel, path, step: int = 0, epoch: int = 0,
                    optimizer: torch.optim.Optimizer | None = None, extra: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy()
    opt_groups = None
    if optimizer is not None:
        state = optimizer.state_dict()
        opt_groups = state["param_groups"]
        for pid, entry in state["state"].items():
            for key, value in entry.items():
                if isinstance(value, torch.Tensor):
                    arrays[f"opt/{pid}/{key}"] = value.detach().cpu().numpy()
                else:
                    arrays[f"opt/{pid}/{key}"] = np.asarray(value)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": to_dict(model.config),
        "vocab": model.vocab.tokens,
        "step": step,
        "epoch": epoch,
        "optimizer_groups": opt_groups,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[GroundingModel, dict]:
    """Rebuild the model from a checkpoint; returns (model, meta).

    meta holds step/epoch/extra plus 'optimizer_state' ready for
    torch.optim load_state_dict when the checkpoint carried one.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"].tobytes()).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')}")
        config = from_dict(ModelConfig, meta["config"])
        model = GroundingModel(config, Vocabulary(meta["vocab"]))
        state = {}
        opt_state: dict[int, dict] = {}
        for key in data.files:
            if key.startswith("param/"):
                state[key[len("param/"):]] = torch.from_numpy(data[key].copy())
            elif key.startswith("opt/"):
                _, pid, field_name = key.split("/", 2)
                opt_state.setdefault(int(pid), {})[field_name] = torch.from_numpy(data[key].copy())
        model.load_state_dict(state)
        if meta.get("optimizer_groups") is not None:
            groups = meta["optimizer_groups"]
            for group in groups:
                if "betas" in group:  # JSON stores tuples as lists
                    group["betas"] = tuple(group["betas"])
            meta["optimizer_state"] = {"state": opt_state, "param_groups": groups}
    return model, meta

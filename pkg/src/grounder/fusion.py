"""ResoBlend: fuse image grid features with each pyramid mask level.

The image tokens are self-attended once, then cross-attend into every
pyramid level (tokens as queries, level cells as keys/values). The result
lives on the image grid, passes a feed-forward and a residual from the raw
image tokens, and is mapped to each level's spatial size by a 3x3 conv
followed by bilinear interpolation (half-pixel-center convention,
align_corners=False).

Each sub-block is independently switchable: sa, ca, ff, res, conv. The
residual source is configurable: "image" adapts the raw image tokens on the
image grid (the default), "level" adds a 1x1-conv adapter of the raw
pyramid level after upsampling instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import GridFeatures, PyramidFeatures, PYRAMID_SCALES
from .layers import FeedForward, MultiHeadAttention, TransformerBlock


@dataclass
class FusedPyramid:
    """Map s -> (c_f, h/2^s, w/2^s); all levels share the fused width."""

    levels: dict[int, torch.Tensor]

    def __post_init__(self):
        widths = {t.shape[0] for t in self.levels.values()}
        if len(widths) > 1:
            raise ValueError(f"fused levels must share one width, got {sorted(widths)}")
        for s, t in self.levels.items():
            if not torch.isfinite(t).all():
                raise ValueError(f"fused level {s} contains non-finite entries")

    @property
    def width(self) -> int:
        return next(iter(self.levels.values())).shape[0]


@dataclass
class ResoBlendConfig:
    sa: bool = True
    ca: bool = True
    ff: bool = True
    res: bool = True
    conv: bool = True
    heads: int = 4
    ffn_ratio: int = 2
    residual_source: str = "image"  # "image" | "level"

    def validate(self) -> None:
        if self.residual_source not in ("image", "level"):
            raise ValueError(f"unknown residual_source {self.residual_source!r}")


class ResoBlend(nn.Module):
    def __init__(self, image_dim: int, level_dims: dict[int, int], fused_dim: int,
                 config: ResoBlendConfig | None = None):
        super().__init__()
        self.config = config or ResoBlendConfig()
        self.config.validate()
        self.image_dim = image_dim
        self.level_dims = dict(level_dims)
        self.fused_dim = fused_dim
        cfg = self.config
        self.self_block = TransformerBlock(image_dim, cfg.heads, cfg.ffn_ratio)
        self.xatt = nn.ModuleDict()
        self.ffn = nn.ModuleDict()
        self.res_adapter = nn.ModuleDict()
        self.conv = nn.ModuleDict()
        for s, c_s in self.level_dims.items():
            key = str(s)
            self.xatt[key] = MultiHeadAttention(image_dim, c_s, fused_dim, cfg.heads)
            self.ffn[key] = FeedForward(fused_dim, cfg.ffn_ratio)
            if cfg.residual_source == "image":
                self.res_adapter[key] = nn.Linear(image_dim, fused_dim)
            else:
                self.res_adapter[key] = nn.Conv2d(c_s, fused_dim, 1)
            self.conv[key] = nn.Conv2d(fused_dim, fused_dim, 3, padding=1)

    def self_attend(self, grid: GridFeatures) -> GridFeatures:
        """Shape-preserving self-attention block over the image tokens."""
        return GridFeatures(self.self_block(grid.tokens), grid.grid_hw, grid.stride)

    def fuse_scale(self, grid_sa: GridFeatures, level: torch.Tensor, grid_raw: GridFeatures,
                   s: int, return_weights: bool = False):
        """Cross-attend image tokens into one pyramid level.

        Output is a (n_tokens, fused_dim) matrix on the image grid. With the
        "image" residual source the adapted raw image tokens are added here;
        the "level" residual is applied after upsampling, in fuse().
        """
        cfg = self.config
        key = str(s)
        att = self.xatt[key]
        if cfg.ca:
            kv = level.flatten(1).T  # (H*W, c_s)
            out = att(grid_sa.tokens, kv, kv, return_weights=return_weights)
            if return_weights:
                out, weights = out
        else:
            out = att.q_proj(grid_sa.tokens)
            weights = None
        if cfg.ff:
            out = self.ffn[key](out)
        if cfg.res and cfg.residual_source == "image":
            out = out + self.res_adapter[key](grid_raw.tokens)
        if return_weights:
            return out, weights
        return out

    def upsample_scale(self, fused_tokens: torch.Tensor, grid_hw: tuple[int, int],
                       target_hw: tuple[int, int], s: int) -> torch.Tensor:
        """conv3x3 on the image grid, then bilinear resize to the level's size."""
        gh, gw = grid_hw
        x = fused_tokens.T.reshape(1, self.fused_dim, gh, gw)
        if self.config.conv:
            x = self.conv[str(s)](x)
        x = F.interpolate(x, size=target_hw, mode="bilinear", align_corners=False)
        return x.squeeze(0)

    def forward(self, grid: GridFeatures, pyramid: PyramidFeatures) -> FusedPyramid:
        cfg = self.config
        grid_sa = self.self_attend(grid) if cfg.sa else grid
        levels = {}
        for s in PYRAMID_SCALES:
            level = pyramid.levels[s]
            fused = self.fuse_scale(grid_sa, level, grid, s)
            out = self.upsample_scale(fused, grid.grid_hw, level.shape[-2:], s)
            if cfg.res and cfg.residual_source == "level":
                out = out + self.res_adapter[str(s)](level.unsqueeze(0)).squeeze(0)
            levels[s] = out
        return FusedPyramid(levels)

    fuse = forward

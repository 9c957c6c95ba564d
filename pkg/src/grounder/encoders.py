"""Single-modal encoders: colormap pyramid features and image grid features.

The colormap encoder is a small strided-conv backbone emitting a 4-level
feature pyramid at strides 4/8/16/32. The image encoder is a ViT-style
patch transformer; its grid tokens can be projected into the language
embedding space with a single linear map.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .layers import TransformerBlock

PYRAMID_SCALES = (2, 3, 4, 5)  # feature strides 2**s


@dataclass
class PyramidFeatures:
    """Map s -> (c_s, h/2^s, w/2^s) tensor for s in 2..5."""

    levels: dict[int, torch.Tensor]

    def __post_init__(self):
        if tuple(sorted(self.levels)) != PYRAMID_SCALES:
            raise ValueError(f"expected levels {PYRAMID_SCALES}, got {sorted(self.levels)}")
        h2, w2 = self.levels[2].shape[-2:]
        for s in PYRAMID_SCALES:
            t = self.levels[s]
            if t.shape[-2:] != (h2 >> (s - 2), w2 >> (s - 2)):
                raise ValueError(f"level {s} has shape {tuple(t.shape)}, sizes must halve per level")
            if not torch.isfinite(t).all():
                raise ValueError(f"level {s} contains non-finite entries")

    def widths(self) -> dict[int, int]:
        return {s: self.levels[s].shape[0] for s in PYRAMID_SCALES}


@dataclass
class GridFeatures:
    """(h/p * w/p, C) token matrix plus its 2-D grid layout."""

    tokens: torch.Tensor
    grid_hw: tuple[int, int]
    stride: int

    def __post_init__(self):
        gh, gw = self.grid_hw
        if self.tokens.shape[0] != gh * gw:
            raise ValueError(f"{self.tokens.shape[0]} tokens but grid is {gh}x{gw}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("grid features contain non-finite entries")

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    # bias-free conv: the following GroupNorm owns the shift, and a conv bias
    # here would be a (nearly) zero-gradient parameter.
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(min(8, cout), cout),
        nn.GELU(),
    )


class ColormapEncoder(nn.Module):
    """Strided-conv backbone: (3, h, w) colormap -> pyramid at strides 4..32.

    Input pixel values are expected in [0, 1]; h and w must be divisible by 32.
    """

    def __init__(self, widths: tuple[int, int, int, int] = (32, 64, 96, 128)):
        super().__init__()
        self.widths = tuple(widths)
        stem_w = max(widths[0] // 2, 8)
        self.stem = _conv_block(3, stem_w, 2)
        stages = []
        cin = stem_w
        for w in widths:
            stages.append(nn.Sequential(_conv_block(cin, w, 2), _conv_block(w, w, 1)))
            cin = w
        self.stages = nn.ModuleList(stages)

    def forward(self, colormap: torch.Tensor) -> PyramidFeatures:
        if colormap.dim() != 3 or colormap.shape[0] != 3:
            raise ValueError(f"expected (3, h, w) colormap, got {tuple(colormap.shape)}")
        h, w = colormap.shape[1:]
        if h % 32 or w % 32:
            raise ValueError(f"colormap dims must be divisible by 32, got {h}x{w}")
        x = self.stem(colormap.unsqueeze(0))
        levels = {}
        for s, stage in zip(PYRAMID_SCALES, self.stages):
            x = stage(x)
            levels[s] = x.squeeze(0)
        return PyramidFeatures(levels)


class ImageEncoder(nn.Module):
    """Patch embedding + pre-norm transformer blocks + learned positions.

    The positional table is sized for a fixed image_size at construction;
    inputs must match it and be divisible by the patch size.
    """

    def __init__(self, image_size: int = 64, patch_size: int = 8, width: int = 64,
                 depth: int = 2, heads: int = 4, ffn_ratio: int = 2):
        super().__init__()
        if image_size % patch_size:
            raise ValueError(f"image_size {image_size} not divisible by patch_size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.patch_embed = nn.Conv2d(3, width, patch_size, stride=patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(self.grid * self.grid, width))
        self.blocks = nn.ModuleList(TransformerBlock(width, heads, ffn_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(width)

    def forward(self, image: torch.Tensor) -> GridFeatures:
        if image.dim() != 3 or image.shape[0] != 3:
            raise ValueError(f"expected (3, h, w) image, got {tuple(image.shape)}")
        h, w = image.shape[1:]
        if (h, w) != (self.image_size, self.image_size):
            raise ValueError(f"encoder built for {self.image_size}px inputs, got {h}x{w}")
        x = self.patch_embed(image.unsqueeze(0)).flatten(2).squeeze(0).T  # (N, C)
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return GridFeatures(x, (self.grid, self.grid), self.patch_size)


class VisualProjector(nn.Module):
    """Single linear map from vision width into the language embedding space."""

    def __init__(self, vision_width: int, lang_width: int):
        super().__init__()
        self.proj = nn.Linear(vision_width, lang_width, bias=False)

    def forward(self, grid: GridFeatures) -> torch.Tensor:
        return self.proj(grid.tokens)


def project_visual(grid: GridFeatures, weight: torch.Tensor) -> torch.Tensor:
    """Row-wise linear map of grid tokens: tokens @ weight.

    weight has shape (C_v, d_l); no bias, no nonlinearity.
    """
    if weight.shape[0] != grid.width:
        raise ValueError(f"projection expects {grid.width} input dims, got {weight.shape[0]}")
    return grid.tokens @ weight

"""Shared transformer building blocks.

All modules here operate on unbatched (length, dim) token matrices; the
pipeline processes one scene at a time. Attention can return its softmax
weights so tests can assert normalization directly.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class MultiHeadAttention(nn.Module):
    """Multi-head attention with separate query and key/value input widths.

    q_proj / k_proj / v_proj map the inputs into model_dim; out_proj maps the
    concatenated heads to out_dim (model_dim by default).
    """

    def __init__(self, q_dim: int, kv_dim: int, model_dim: int, heads: int, out_dim: int | None = None):
        super().__init__()
        if model_dim % heads:
            raise ValueError(f"model_dim {model_dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = model_dim // heads
        self.model_dim = model_dim
        self.q_proj = nn.Linear(q_dim, model_dim)
        # A key bias shifts every score in a row equally, which softmax
        # ignores; leaving it in creates zero-gradient parameters.
        self.k_proj = nn.Linear(kv_dim, model_dim, bias=False)
        self.v_proj = nn.Linear(kv_dim, model_dim)
        self.out_proj = nn.Linear(model_dim, out_dim or model_dim)

    def forward(self, query, key, value, attn_mask=None, return_weights: bool = False):
        lq, lk = query.shape[0], key.shape[0]
        q = self.q_proj(query).reshape(lq, self.heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(key).reshape(lk, self.heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(value).reshape(lk, self.heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.head_dim)
        if attn_mask is not None:
            scores = scores + attn_mask
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(0, 1).reshape(lq, self.model_dim)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, dim: int, ratio: int = 2, out_dim: int | None = None):
        super().__init__()
        hidden = dim * ratio
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim or dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, dim: int, heads: int, ffn_ratio: int = 2):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, dim, dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio)

    def forward(self, x, attn_mask=None):
        h = self.ln1(x)
        x = x + self.attn(h, h, h, attn_mask=attn_mask)
        x = x + self.ffn(self.ln2(x))
        return x


def causal_mask(length: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """Additive (length, length) mask: -inf strictly above the diagonal."""
    mask = torch.full((length, length), float("-inf"), dtype=dtype, device=device)
    return torch.triu(mask, diagonal=1)


def mlp(dims: list[int]) -> nn.Sequential:
    """GELU MLP through the given widths, linear on the last layer."""
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(dims) - 2:
            layers.append(nn.GELU())
    return nn.Sequential(*layers)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic re-initialization of every parameter.

    Weights with >=2 dims get Xavier-normal draws from a dedicated generator
    walked over parameters in sorted name order, so the init depends only on
    the seed and the parameter names/shapes. 1-d weights (norm scales) are set
    to one, biases to zero.
    """
    gen = torch.Generator().manual_seed(seed)
    for name, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if param.dim() >= 2:
                fan_out = param.numel() // param.shape[1]
                fan_in = param.numel() // param.shape[0]
                std = math.sqrt(2.0 / (fan_in + fan_out))
                param.copy_(torch.randn(param.shape, generator=gen, dtype=torch.float64).to(param.dtype) * std)
            elif name.endswith("weight"):
                param.fill_(1.0)
            else:
                param.zero_()

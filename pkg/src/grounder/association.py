"""Noun-to-entity association: scoring, loss, and mask selection.

Noun <SEG> embeddings and entity query embeddings are mapped into a shared
space by one linear layer each; their dot products form the score matrix.
Training is elementwise sigmoid BCE against the binary one-to-many target.
At inference, selection runs in one of three modes: narrative (thresholded
multi-select per noun), referring (argmax per noun), or panoptic (each valid
query claims its best noun).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class NounSelection:
    noun_index: int
    query_ids: tuple[int, ...]
    confidence: float  # max selected probability; 0.0 for an empty selection


@dataclass
class Grounding:
    """Serialized grounding for one noun."""

    noun: str
    span: tuple[int, int]
    query_ids: tuple[int, ...]
    confidence: float
    mask: np.ndarray  # full-resolution bool

    def to_record(self, mask_file: str | None = None) -> dict:
        return {
            "noun": self.noun,
            "span": list(self.span),
            "query_ids": list(self.query_ids),
            "confidence": self.confidence,
            "mask_file": mask_file,
        }


class AssociationHead(nn.Module):
    """Two projections into a shared width; 'fc' is a single linear layer,
    'fc_relu_fc' the deeper ablation variant."""

    def __init__(self, lang_dim: int, entity_dim: int, width: int, head: str = "fc"):
        super().__init__()
        if head not in ("fc", "fc_relu_fc"):
            raise ValueError(f"unknown association head {head!r}")
        self.head = head

        def make(in_dim: int) -> nn.Module:
            if head == "fc":
                return nn.Linear(in_dim, width)
            return nn.Sequential(nn.Linear(in_dim, width), nn.ReLU(), nn.Linear(width, width))

        self.noun_proj = make(lang_dim)
        self.entity_proj = make(entity_dim)

    def forward(self, noun_embeddings: torch.Tensor, entity_embeddings: torch.Tensor) -> torch.Tensor:
        return score(noun_embeddings, entity_embeddings, self.noun_proj, self.entity_proj)


def score(noun_embeddings: torch.Tensor, entity_embeddings: torch.Tensor,
          noun_proj: nn.Module, entity_proj: nn.Module) -> torch.Tensor:
    """(m, q) raw logits: projected nouns dotted against projected entities."""
    if noun_embeddings.shape[0] == 0:
        return torch.zeros((0, entity_embeddings.shape[0]), dtype=entity_embeddings.dtype)
    return noun_proj(noun_embeddings) @ entity_proj(entity_embeddings).T


def asso_loss(scores: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean elementwise sigmoid BCE between scores and the binary target."""
    if scores.shape != target.shape:
        raise ValueError(f"score shape {tuple(scores.shape)} != target shape {tuple(target.shape)}")
    return F.binary_cross_entropy_with_logits(scores, target.to(scores.dtype))


def assign(scores: torch.Tensor, entity_logits: torch.Tensor, mode: str = "narrative",
           tau_a: float = 0.5, tau_e: float = 0.5) -> list[NounSelection]:
    """Select query sets per noun. Ties always break toward the lowest index.

    narrative: noun i takes every entity-valid query with sigmoid score > tau_a.
    referring: noun i takes the argmax-score entity-valid query.
    panoptic:  each entity-valid query goes to its argmax noun if its sigmoid
               score clears tau_a; nouns collect their queries.
    """
    s = scores.detach().cpu().numpy()
    probs = torch.sigmoid(scores).detach().cpu().numpy()
    valid = (torch.softmax(entity_logits, dim=-1)[:, 1] > tau_e).cpu().numpy()
    m, q = s.shape

    selections: list[list[int]] = [[] for _ in range(m)]
    if mode == "narrative":
        for i in range(m):
            selections[i] = [j for j in range(q) if valid[j] and probs[i, j] > tau_a]
    elif mode == "referring":
        valid_idx = np.flatnonzero(valid)
        for i in range(m):
            if valid_idx.size:
                j = valid_idx[int(np.argmax(s[i, valid_idx]))]
                selections[i] = [int(j)]
    elif mode == "panoptic":
        for j in range(q):
            if not valid[j] or m == 0:
                continue
            i = int(np.argmax(s[:, j]))
            if probs[i, j] > tau_a:
                selections[i].append(j)
    else:
        raise ValueError(f"unknown assignment mode {mode!r}")

    out = []
    for i, sel in enumerate(selections):
        conf = float(max(probs[i, sel])) if sel else 0.0
        out.append(NounSelection(i, tuple(sorted(sel)), conf))
    return out


def merge_masks(query_ids: tuple[int, ...], mask_logits: torch.Tensor,
                out_hw: tuple[int, int]) -> np.ndarray:
    """Union of the selected query masks at full resolution.

    Mask probabilities are upsampled smoothly (bicubic over sigmoid values,
    which preserves the sub-cell boundary information carried by fractional
    coverage predictions) and thresholded at 0.5.
    """
    merged = np.zeros(out_hw, dtype=bool)
    if not query_ids:
        return merged
    sel = torch.sigmoid(mask_logits[list(query_ids)]).unsqueeze(1)
    up = F.interpolate(sel, size=out_hw, mode="bicubic", align_corners=False)
    merged = (up.squeeze(1) > 0.5).any(dim=0).cpu().numpy()
    return merged

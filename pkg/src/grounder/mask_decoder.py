"""Query-based mask decoder, bipartite matching, and the segmentation loss.

A fixed set of learned queries cross-attends over the flattened stride-8/16/32
fused levels through a small stack of decoder layers. Final query states are
the entity embeddings; an entity head scores entity / no-entity, and a mask
head dots each query's mask embedding against per-pixel embeddings from the
stride-4 fused level to produce mask logits at h/4 x w/4.

Queries are matched one-to-one to ground-truth entities by exact minimum-cost
assignment; the loss is entity cross-entropy over all queries plus BCE and
dice over matched masks.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .fusion import FusedPyramid
from .layers import FeedForward, MultiHeadAttention, mlp

MEMORY_SCALES = (3, 4, 5)
PIXEL_SCALE = 2
DICE_EPS = 1e-6


@dataclass
class DecoderOutputs:
    entity_embeddings: torch.Tensor  # (q, d_e)
    entity_logits: torch.Tensor      # (q, 2); column 1 = entity
    mask_logits: torch.Tensor        # (q, h/4, w/4)

    @property
    def num_queries(self) -> int:
        return self.entity_embeddings.shape[0]

    def entity_probs(self) -> torch.Tensor:
        return torch.softmax(self.entity_logits, dim=-1)[:, 1]


@dataclass
class SegTargets:
    """Ground-truth masks downsampled to the mask-logit grid.

    Values are per-cell area coverage in [0, 1]; they are exactly binary
    whenever the ground truth aligns with the grid.
    """

    masks: torch.Tensor  # (n, h/4, w/4)

    def __post_init__(self):
        if self.masks.dim() != 3:
            raise ValueError("targets must be (n, h, w)")
        if self.masks.numel() and (self.masks.min() < 0 or self.masks.max() > 1):
            raise ValueError("target coverage must lie in [0, 1]")

    def __len__(self) -> int:
        return self.masks.shape[0]


@dataclass
class MatchAssignment:
    pairs: list[tuple[int, int]]          # (query_index, gt_index)
    unmatched_queries: list[int]
    unmatched_gts: list[int]


def downsample_masks(masks: torch.Tensor, factor: int = 4) -> torch.Tensor:
    """Average-pool full-resolution binary masks to fractional coverage."""
    if not masks.dtype.is_floating_point:
        masks = masks.to(torch.get_default_dtype())
    return F.avg_pool2d(masks.unsqueeze(1), factor).squeeze(1)


class DecoderLayer(nn.Module):
    """Pre-norm cross-attention -> self-attention -> FFN, residual throughout."""

    def __init__(self, dim: int, heads: int, ffn_ratio: int = 2):
        super().__init__()
        self.ln_ca = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, dim, dim, heads)
        self.ln_sa = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, dim, dim, heads)
        self.ln_ff = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio)

    def forward(self, queries, memory):
        q = queries + self.cross_attn(self.ln_ca(queries), memory, memory)
        h = self.ln_sa(q)
        q = q + self.self_attn(h, h, h)
        q = q + self.ffn(self.ln_ff(q))
        return q


class MaskDecoder(nn.Module):
    def __init__(self, fused_dim: int, image_size: int, embed_dim: int = 64,
                 num_queries: int = 20, depth: int = 3, heads: int = 4, mask_dim: int = 64):
        super().__init__()
        self.num_queries = num_queries
        self.embed_dim = embed_dim
        self.query_feat = nn.Parameter(torch.zeros(num_queries, embed_dim))
        self.query_pos = nn.Parameter(torch.zeros(num_queries, embed_dim))
        self.input_proj = nn.ModuleDict(
            {str(s): nn.Linear(fused_dim, embed_dim) for s in MEMORY_SCALES}
        )
        self.memory_pos = nn.ParameterDict(
            {
                str(s): nn.Parameter(torch.zeros((image_size >> s) ** 2, embed_dim))
                for s in MEMORY_SCALES
            }
        )
        self.layers = nn.ModuleList(DecoderLayer(embed_dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(embed_dim)
        self.entity_head = nn.Linear(embed_dim, 2)
        self.mask_head = mlp([embed_dim, embed_dim, embed_dim, mask_dim])
        self.pixel_proj = nn.Conv2d(fused_dim, mask_dim, 3, padding=1)

    def forward(self, fused: FusedPyramid) -> DecoderOutputs:
        memory = []
        for s in MEMORY_SCALES:
            level = fused.levels[s]
            tokens = self.input_proj[str(s)](level.flatten(1).T)
            memory.append(tokens + self.memory_pos[str(s)])
        memory = torch.cat(memory, dim=0)

        q = self.query_feat + self.query_pos
        for layer in self.layers:
            q = layer(q, memory)
        embeddings = self.norm(q)

        entity_logits = self.entity_head(embeddings)
        pixel_embed = self.pixel_proj(fused.levels[PIXEL_SCALE].unsqueeze(0)).squeeze(0)
        mask_embed = self.mask_head(embeddings)
        mask_logits = torch.einsum("qc,chw->qhw", mask_embed, pixel_embed)
        return DecoderOutputs(embeddings, entity_logits, mask_logits)


# ---------------------------------------------------------------------------
# Matching


def solve_assignment(cost: torch.Tensor) -> MatchAssignment:
    """Exact minimum-total-cost one-to-one assignment on a (q, n) cost matrix."""
    if not torch.isfinite(cost).all():
        raise ValueError("assignment cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost.detach().cpu().numpy())
    pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda p: p[1])
    matched_q = {p[0] for p in pairs}
    matched_g = {p[1] for p in pairs}
    return MatchAssignment(
        pairs=pairs,
        unmatched_queries=[i for i in range(cost.shape[0]) if i not in matched_q],
        unmatched_gts=[j for j in range(cost.shape[1]) if j not in matched_g],
    )


@torch.no_grad()
def match_cost_matrix(outputs: DecoderOutputs, targets: SegTargets,
                      cost_weights: tuple[float, float, float] = (2.0, 5.0, 5.0)) -> torch.Tensor:
    """(q, n) matching cost: class term plus per-pair mask BCE and dice."""
    w_cls, w_bce, w_dice = cost_weights
    probs = outputs.entity_probs()  # (q,)
    logits = outputs.mask_logits.flatten(1)  # (q, P)
    tgt = targets.masks.flatten(1)           # (n, P)
    q, n = logits.shape[0], tgt.shape[0]

    pos = F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits), reduction="none")
    neg = F.binary_cross_entropy_with_logits(logits, torch.zeros_like(logits), reduction="none")
    bce = (pos @ tgt.T + neg @ (1 - tgt).T) / logits.shape[1]

    p = torch.sigmoid(logits)
    inter = p @ tgt.T
    dice = 1 - 2 * inter / (p.sum(1, keepdim=True) + tgt.sum(1)[None, :] + DICE_EPS)

    return w_cls * (-probs)[:, None].expand(q, n) + w_bce * bce + w_dice * dice


def hungarian_match(outputs: DecoderOutputs, targets: SegTargets,
                    cost_weights: tuple[float, float, float] = (2.0, 5.0, 5.0)) -> MatchAssignment:
    if len(targets) < 1:
        raise ValueError("matching needs at least one ground-truth entity")
    return solve_assignment(match_cost_matrix(outputs, targets, cost_weights))


# ---------------------------------------------------------------------------
# Loss


@dataclass
class SegLoss:
    total: torch.Tensor
    entity_bce: torch.Tensor
    mask_bce: torch.Tensor
    mask_dice: torch.Tensor


def dice_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - 2 * sum(sigmoid(logits) * target) / (sum(sigmoid) + sum(target) + eps)."""
    p = torch.sigmoid(logits).flatten()
    t = target.flatten()
    return 1 - 2 * (p * t).sum() / (p.sum() + t.sum() + eps)


def seg_loss(outputs: DecoderOutputs, targets: SegTargets, assignment: MatchAssignment,
             no_entity_weight: float = 0.1,
             term_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> SegLoss:
    """Entity CE over all queries plus mask BCE and dice over matched pairs.

    The entity term is a weight-normalized 2-class cross-entropy (matched
    queries are the entity class); unmatched queries contribute no mask loss.
    term_weights scales (entity, bce, dice) in the total; the reported
    components stay unweighted.
    """
    if len(targets) >= 1 and not assignment.pairs:
        raise ValueError("empty assignment with ground-truth entities present")
    q = outputs.num_queries
    device = outputs.entity_logits.device
    labels = torch.zeros(q, dtype=torch.long, device=device)
    for qi, _ in assignment.pairs:
        labels[qi] = 1
    weights = torch.where(
        labels == 1,
        torch.ones(q, dtype=outputs.entity_logits.dtype, device=device),
        torch.full((q,), no_entity_weight, dtype=outputs.entity_logits.dtype, device=device),
    )
    ce = F.cross_entropy(outputs.entity_logits, labels, reduction="none")
    entity_bce = (ce * weights).sum() / weights.sum()

    bce_terms, dice_terms = [], []
    for qi, gi in assignment.pairs:
        logits = outputs.mask_logits[qi]
        tgt = targets.masks[gi]
        bce_terms.append(F.binary_cross_entropy_with_logits(logits, tgt))
        dice_terms.append(dice_loss(logits, tgt))
    zero = outputs.mask_logits.sum() * 0
    mask_bce = torch.stack(bce_terms).mean() if bce_terms else zero
    mask_dice = torch.stack(dice_terms).mean() if dice_terms else zero
    w_e, w_b, w_d = term_weights
    total = w_e * entity_bce + w_b * mask_bce + w_d * mask_dice
    return SegLoss(total, entity_bce, mask_bce, mask_dice)

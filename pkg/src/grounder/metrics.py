"""Evaluation quantities: IoU, panoptic quality, average recall, mask AP,
and noun-extraction recall.

Conventions (fixed here for bit-reproducibility):
- empty-vs-empty IoU is 0; nouns with empty ground truth are excluded from
  recall denominators upstream.
- average recall integrates recall over the IoU threshold grid
  {0.00, 0.01, ..., 0.99} with strict IoU > t.
- mask AP is class-agnostic COCO-style: greedy matching by descending
  confidence per IoU threshold in {0.50, 0.55, ..., 0.95}, area under the
  precision envelope.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AR_THRESHOLDS = np.round(np.arange(0.0, 1.0, 0.01), 2)
AP_THRESHOLDS = np.round(np.arange(0.50, 0.96, 0.05), 2)


class AlignmentError(ValueError):
    """Prediction and ground-truth noun lists do not line up."""


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; both-empty is 0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


# ---------------------------------------------------------------------------
# Panoptic quality


@dataclass
class LabeledMasks:
    """Disjoint binary masks with a label string per mask."""

    masks: np.ndarray  # (n, h, w) bool
    labels: list[str]

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3 or self.masks.shape[0] != len(self.labels):
            raise ValueError("need one label per mask")
        if self.masks.shape[0] and (self.masks.sum(axis=0) > 1).any():
            raise ValueError("masks must be disjoint")


@dataclass
class PanopticResult:
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int
    pair_ious: list[float] = field(default_factory=list)


def panoptic_quality(pred: LabeledMasks | list[LabeledMasks],
                     gt: LabeledMasks | list[LabeledMasks]) -> PanopticResult:
    """Label-consistent IoU>0.5 matching (unique by the standard argument);
    SQ = mean matched IoU, RQ = TP/(TP + FP/2 + FN/2), PQ = SQ * RQ."""
    preds = pred if isinstance(pred, list) else [pred]
    gts = gt if isinstance(gt, list) else [gt]
    if len(preds) != len(gts):
        raise ValueError("need one ground truth per prediction scene")
    tp, fp, fn = 0, 0, 0
    ious: list[float] = []
    for p, g in zip(preds, gts):
        matched_p: set[int] = set()
        matched_g: set[int] = set()
        for i in range(p.masks.shape[0]):
            for j in range(g.masks.shape[0]):
                if j in matched_g or p.labels[i] != g.labels[j]:
                    continue
                iou = mask_iou(p.masks[i], g.masks[j])
                if iou > 0.5:
                    matched_p.add(i)
                    matched_g.add(j)
                    ious.append(iou)
                    break
        tp += len(matched_p)
        fp += p.masks.shape[0] - len(matched_p)
        fn += g.masks.shape[0] - len(matched_g)
    sq = float(np.mean(ious)) if ious else 0.0
    denom = tp + 0.5 * fp + 0.5 * fn
    rq = tp / denom if denom > 0 else 0.0
    return PanopticResult(pq=sq * rq, sq=sq, rq=rq, tp=tp, fp=fp, fn=fn, pair_ious=ious)


# ---------------------------------------------------------------------------
# Average recall over per-noun grounding IoUs


@dataclass
class NounGrounding:
    """One noun's (union) mask plus its split flags."""

    noun: str
    mask: np.ndarray
    is_thing: bool = True
    is_plural: bool = False


@dataclass
class GroundingEval:
    ar: float
    ar_things: float
    ar_stuff: float
    ar_singular: float
    ar_plural: float
    per_noun_iou: list[float]

    def as_dict(self) -> dict:
        return {
            "AR": self.ar,
            "AR_th": self.ar_things,
            "AR_st": self.ar_stuff,
            "AR_sing": self.ar_singular,
            "AR_pl": self.ar_plural,
        }


def _ar_of(ious: np.ndarray, thresholds: np.ndarray) -> float:
    if ious.size == 0:
        return float("nan")
    recalls = [(ious > t).mean() for t in thresholds]
    return float(np.mean(recalls))


def average_recall(pred: list[NounGrounding], gt: list[NounGrounding],
                   thresholds: np.ndarray = AR_THRESHOLDS) -> GroundingEval:
    """AR plus the thing/stuff and singular/plural split ARs.

    pred and gt must be aligned one-to-one by noun; the split flags are read
    from the ground truth. Splits with no nouns evaluate to NaN.
    """
    if len(pred) != len(gt):
        raise AlignmentError(f"{len(pred)} predictions vs {len(gt)} ground-truth nouns")
    for p, g in zip(pred, gt):
        if p.noun != g.noun:
            raise AlignmentError(f"noun mismatch: {p.noun!r} vs {g.noun!r}")
    ious = np.array([mask_iou(p.mask, g.mask) for p, g in zip(pred, gt)], dtype=np.float64)
    things = np.array([g.is_thing for g in gt], dtype=bool)
    plural = np.array([g.is_plural for g in gt], dtype=bool)
    return GroundingEval(
        ar=_ar_of(ious, thresholds),
        ar_things=_ar_of(ious[things], thresholds),
        ar_stuff=_ar_of(ious[~things], thresholds),
        ar_singular=_ar_of(ious[~plural], thresholds),
        ar_plural=_ar_of(ious[plural], thresholds),
        per_noun_iou=ious.tolist(),
    )


# ---------------------------------------------------------------------------
# Class-agnostic mask AP


@dataclass
class ScoredMask:
    image_id: int
    confidence: float
    mask: np.ndarray


@dataclass
class GtMask:
    image_id: int
    mask: np.ndarray


def _pr_area(matched: np.ndarray, n_gt: int) -> float:
    """Area under the interpolated precision-recall curve.

    matched: per-prediction hit flags, ordered by descending confidence.
    """
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(matched)
    fp = np.cumsum(~matched)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # Precision envelope, then sum rectangle areas between recall steps.
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for k in range(len(mpre) - 2, -1, -1):
        mpre[k] = max(mpre[k], mpre[k + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


def mask_ap(preds: list[ScoredMask], gts: list[GtMask],
            thresholds: np.ndarray = AP_THRESHOLDS) -> dict[str, float]:
    """Class-agnostic COCO-style AP pooled over images.

    Returns {"AP", "AP50", "AP75"}. Predictions are matched greedily per
    IoU threshold in descending-confidence order; each gt matches once.
    """
    if not gts:
        return {"AP": 0.0, "AP50": 0.0, "AP75": 0.0}
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    ious = np.zeros((len(preds), len(gts)), dtype=np.float64)
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if p.image_id == g.image_id:
                ious[i, j] = mask_iou(p.mask, g.mask)

    per_threshold = {}
    for t in thresholds:
        taken = np.zeros(len(gts), dtype=bool)
        matched = np.zeros(len(preds), dtype=bool)
        for rank, i in enumerate(order):
            best_j, best_iou = -1, float(t)
            for j in range(len(gts)):
                if taken[j] or preds[i].image_id != gts[j].image_id:
                    continue
                if ious[i, j] >= best_iou:
                    best_iou, best_j = ious[i, j], j
            if best_j >= 0:
                taken[best_j] = True
                matched[rank] = True
        per_threshold[float(t)] = _pr_area(matched, len(gts))
    ap = float(np.mean(list(per_threshold.values())))
    return {"AP": ap, "AP50": per_threshold[0.5], "AP75": per_threshold[0.75]}


# ---------------------------------------------------------------------------
# Noun extraction recall


def noun_extraction_recall(generated_tokens: list[str], gt_nouns: list[str],
                           seg_token: str = "<SEG>") -> float:
    """Fraction of ground-truth nouns whose token sequence sits immediately
    before a <SEG> token in the generation. Each <SEG> may credit one noun."""
    if not gt_nouns:
        return 0.0
    seg_positions = [i for i, t in enumerate(generated_tokens) if t == seg_token]
    used: set[int] = set()
    hits = 0
    for noun in gt_nouns:
        words = noun.strip().lower().split()
        found = False
        for pos in seg_positions:
            if pos in used or pos < len(words):
                continue
            before = [t.lower() for t in generated_tokens[pos - len(words):pos]]
            if before == words:
                used.add(pos)
                found = True
                break
        if found:
            hits += 1
    return hits / len(gt_nouns)

"""Dataset-level evaluation protocols built on the metrics module.

Narrative grounding runs the full generate -> extract -> associate -> merge
pipeline and pools per-noun IoUs across scenes. Panoptic evaluation converts
query masks into a pixel partition labeled by nouns (or a single class-
agnostic label) and scores PQ/SQ/RQ. Reconstruction quality scores the raw
decoder masks as class-agnostic AP.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .association import Grounding, assign, merge_masks
from .config import config_hash
from .datagen import Scene, TaskKind, build_instruction
from .language import SEG_TOKEN, extract_seg_embeddings, generate
from .metrics import (
    GtMask,
    LabeledMasks,
    NounGrounding,
    PanopticResult,
    ScoredMask,
    average_recall,
    mask_ap,
    noun_extraction_recall,
    panoptic_quality,
)
from .model import GroundingModel, PreparedScene

_RESET_TOKENS = {",", ".", ":", "and", "including"}


def extract_tagged_nouns(tokens: list[str]) -> list[str]:
    """Noun phrase preceding each <SEG>, in order; one entry per <SEG>.

    A phrase is the run of word tokens since the last separator. A <SEG>
    with no preceding phrase yields an empty string to keep alignment with
    the <SEG> embedding rows.
    """
    nouns: list[str] = []
    cur: list[str] = []
    for tok in tokens:
        if tok == SEG_TOKEN:
            nouns.append(" ".join(cur))
            cur = []
        elif tok in _RESET_TOKENS:
            cur = []
        else:
            cur.append(tok)
    return nouns


@dataclass
class SceneGrounding:
    groundings: list[Grounding]
    generated_text: str
    generated_tokens: list[str]


@torch.no_grad()
def ground_scene(model: GroundingModel, prep: PreparedScene, mode: str = "narrative",
                 max_len: int = 96, teacher_forced: bool = False) -> SceneGrounding:
    """Full grounding pipeline for one scene.

    teacher_forced=True uses the gold noun answer instead of greedy
    generation (isolates segmentation/association quality from generation).
    """
    cfg = model.config.association
    scene = prep.scene
    grid = model.encode_image(prep.image)
    visual = model.projector(grid)

    if teacher_forced:
        answer_ids = list(prep.noun_answer)
    else:
        prompt = model.language.build_sequence(visual, prep.extract_prompt)
        answer_ids = generate(model.language, prompt, max_len=max_len)

    seq = model.language.build_sequence(visual, prep.extract_prompt, answer_ids)
    outputs = model.language(seq)
    noun_embeddings = extract_seg_embeddings(outputs)
    tokens = [model.vocab.token_of(i) for i in answer_ids]
    noun_texts = extract_tagged_nouns(tokens)

    decoded, _ = model.forward_segmentation(grid, prep.colormap)
    scores = model.association(noun_embeddings, decoded.entity_embeddings)
    selections = assign(scores, decoded.entity_logits, mode, cfg.tau_a, cfg.tau_e)

    hw = (scene.image.shape[0], scene.image.shape[1])
    groundings = []
    for sel, noun in zip(selections, noun_texts):
        mask = merge_masks(sel.query_ids, decoded.mask_logits, hw)
        at = scene.caption.find(noun) if noun else -1
        span = (at, at + len(noun)) if at >= 0 else (-1, -1)
        groundings.append(Grounding(noun, span, sel.query_ids, sel.confidence, mask))
    return SceneGrounding(groundings, model.vocab.detokenize(answer_ids), tokens)


def gt_noun_groundings(scene: Scene) -> list[NounGrounding]:
    records = []
    for noun in scene.nouns:
        union = np.zeros((scene.mask_set.height, scene.mask_set.width), dtype=bool)
        for eid in noun.entity_ids:
            union |= scene.mask_set.mask_for(eid)
        records.append(NounGrounding(noun.text, union, noun.is_thing, noun.is_plural))
    return records


def align_groundings(predicted: list[Grounding], gt: list[NounGrounding]) -> list[NounGrounding]:
    """Match predictions to ground-truth nouns by normalized string, first
    unused wins; unmatched nouns get an empty mask."""
    used: set[int] = set()
    aligned = []
    for g in gt:
        mask = np.zeros_like(g.mask)
        for i, p in enumerate(predicted):
            if i in used or p.noun.strip().lower() != g.noun.strip().lower():
                continue
            mask = p.mask
            used.add(i)
            break
        aligned.append(NounGrounding(g.noun, mask, g.is_thing, g.is_plural))
    return aligned


@torch.no_grad()
def evaluate_grounding(model: GroundingModel, scenes: list[Scene], mode: str = "narrative",
                       teacher_forced: bool = False, max_len: int = 96) -> dict:
    """Pooled AR (with splits) plus noun-extraction recall over a dataset."""
    model.eval()
    all_pred: list[NounGrounding] = []
    all_gt: list[NounGrounding] = []
    hits = 0
    total_nouns = 0
    per_scene = []
    for scene in scenes:
        prep = model.prepare_scene(scene)
        result = ground_scene(model, prep, mode=mode, max_len=max_len, teacher_forced=teacher_forced)
        gt = gt_noun_groundings(scene)
        aligned = align_groundings(result.groundings, gt)
        all_pred.extend(aligned)
        all_gt.extend(gt)
        gt_texts = [n.text for n in scene.nouns]
        recall = noun_extraction_recall(result.generated_tokens, gt_texts)
        hits += recall * len(gt_texts)
        total_nouns += len(gt_texts)
        per_scene.append({
            "caption": scene.caption,
            "generated": result.generated_text,
            "noun_recall": recall,
        })
    ar = average_recall(all_pred, all_gt)
    report = ar.as_dict()
    report["noun_recall"] = hits / total_nouns if total_nouns else 0.0
    report["n_scenes"] = len(scenes)
    report["n_nouns"] = total_nouns
    report["per_noun_iou"] = ar.per_noun_iou
    report["per_scene"] = per_scene
    return report


def _upsampled_probs(mask_logits: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    probs = torch.sigmoid(mask_logits).unsqueeze(1)
    up = F.interpolate(probs, size=hw, mode="bicubic", align_corners=False)
    return up.squeeze(1).clamp(0.0, 1.0)


@torch.no_grad()
def panoptic_partition(decoded, labels: dict[int, str], hw: tuple[int, int],
                       entity_probs: torch.Tensor) -> LabeledMasks:
    """Disjoint masks from query mask probs: per-pixel argmax of
    entity_prob * mask_prob over the labeled queries, pixels kept where the
    winner's mask prob exceeds 0.5."""
    if not labels:
        return LabeledMasks(np.zeros((0,) + hw, dtype=bool), [])
    keep = sorted(labels)
    probs = _upsampled_probs(decoded.mask_logits[keep], hw)
    scores = probs * entity_probs[keep].reshape(-1, 1, 1)
    winner = scores.argmax(dim=0)
    claimed = probs.gather(0, winner.unsqueeze(0)).squeeze(0) > 0.5
    masks, names = [], []
    for pos, qj in enumerate(keep):
        region = (winner == pos) & claimed
        if bool(region.any()):
            masks.append(region.cpu().numpy())
            names.append(labels[qj])
    if not masks:
        return LabeledMasks(np.zeros((0,) + hw, dtype=bool), [])
    return LabeledMasks(np.stack(masks), names)


@torch.no_grad()
def evaluate_panoptic(model: GroundingModel, scenes: list[Scene], class_agnostic: bool = False,
                      teacher_forced: bool = True) -> PanopticResult:
    """PQ/SQ/RQ over scenes.

    class_agnostic=True labels every kept query "entity" and skips the
    language branch entirely; otherwise queries are labeled by their
    panoptic-mode noun from (by default teacher-forced) <SEG> embeddings.
    """
    model.eval()
    cfg = model.config.association
    preds, gts = [], []
    for scene in scenes:
        prep = model.prepare_scene(scene)
        hw = (scene.mask_set.height, scene.mask_set.width)
        grid = model.encode_image(prep.image)
        decoded, _ = model.forward_segmentation(grid, prep.colormap)
        entity_probs = decoded.entity_probs()

        if class_agnostic:
            labels = {j: "entity" for j in range(decoded.num_queries)
                      if float(entity_probs[j]) > cfg.tau_e}
            gt_labels = ["entity"] * len(scene.mask_set)
        else:
            result = ground_scene(model, prep, mode="panoptic", teacher_forced=teacher_forced)
            labels = {}
            for g in result.groundings:
                for qj in g.query_ids:
                    labels[qj] = g.noun
            entity_noun = {}
            for noun in scene.nouns:
                for eid in noun.entity_ids:
                    entity_noun[eid] = noun.text
            gt_labels = [entity_noun[int(eid)] for eid in scene.mask_set.entity_ids]

        preds.append(panoptic_partition(decoded, labels, hw, entity_probs))
        gts.append(LabeledMasks(scene.mask_set.masks, gt_labels))
    return panoptic_quality(preds, gts)


@torch.no_grad()
def evaluate_reconstruction(model: GroundingModel, scenes: list[Scene]) -> dict[str, float]:
    """Class-agnostic AP of raw decoder masks against the entity masks."""
    model.eval()
    preds: list[ScoredMask] = []
    gts: list[GtMask] = []
    for idx, scene in enumerate(scenes):
        prep = model.prepare_scene(scene)
        hw = (scene.mask_set.height, scene.mask_set.width)
        grid = model.encode_image(prep.image)
        decoded, _ = model.forward_segmentation(grid, prep.colormap)
        probs = _upsampled_probs(decoded.mask_logits, hw)
        entity_probs = decoded.entity_probs()
        for j in range(decoded.num_queries):
            mask = (probs[j] > 0.5).cpu().numpy()
            if mask.any():
                preds.append(ScoredMask(idx, float(entity_probs[j]), mask))
        for mask in scene.mask_set.masks:
            gts.append(GtMask(idx, mask))
    return mask_ap(preds, gts)


@torch.no_grad()
def describe_image(model: GroundingModel, image: torch.Tensor, max_len: int = 64) -> str:
    """Greedy caption from the image-description prompt."""
    model.eval()
    grid = model.encode_image(image)
    visual = model.projector(grid)
    ids = model.vocab.tokenize(build_instruction(TaskKind.IMG_DES))
    prompt = model.language.build_sequence(visual, ids)
    return model.vocab.detokenize(generate(model.language, prompt, max_len=max_len))


def evaluate_model(model: GroundingModel, scenes: list[Scene], mode: str = "narrative",
                   include_panoptic: bool = True, include_ap: bool = True,
                   teacher_forced: bool = False) -> dict:
    """Full metric report for a dataset."""
    report = {
        "schema_version": 1,
        "config_hash": config_hash(model.config),
        "mode": mode,
        "grounding": evaluate_grounding(model, scenes, mode=mode, teacher_forced=teacher_forced),
    }
    if include_panoptic:
        pq = evaluate_panoptic(model, scenes, teacher_forced=True)
        report["panoptic"] = {
            "PQ": pq.pq, "SQ": pq.sq, "RQ": pq.rq,
            "TP": pq.tp, "FP": pq.fp, "FN": pq.fn,
        }
    if include_ap:
        report["reconstruction"] = evaluate_reconstruction(model, scenes)
    return report

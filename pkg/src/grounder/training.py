"""Multi-task sampling, per-task total loss, and the optimization loop.

Each step samples one of three tasks. Image description trains the language
path only; noun extraction and entity grounding additionally run the
segmentation branch against the scene's own masks and the association head
against the matched queries. The loop is seeded and resumable: batch order
and task draws are derived statelessly from (seed, epoch/step), so a resumed
run reproduces the uninterrupted one exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .association import asso_loss
from .config import ConfigError, TrainConfig
from .datagen import TaskKind
from .language import extract_seg_embeddings, lang_loss
from .mask_decoder import SegTargets, hungarian_match, seg_loss
from .model import GroundingModel, PreparedScene


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class LossBreakdown:
    l_seg: float | torch.Tensor = 0.0
    l_asso: float | torch.Tensor = 0.0
    l_ans: float | torch.Tensor = 0.0
    total: float | torch.Tensor = 0.0
    active: tuple[bool, bool, bool] = (False, False, False)  # (seg, asso, ans)

    def detach(self) -> "LossBreakdown":
        def val(x):
            return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

        return LossBreakdown(val(self.l_seg), val(self.l_asso), val(self.l_ans),
                             val(self.total), self.active)


def sample_task(rng: np.random.Generator, ratios: tuple[float, float, float]) -> str:
    """One categorical draw over (IMG_DES, NOUN_EXT, ENT_GRO)."""
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"task ratios must be non-negative and sum to 1, got {ratios}")
    r = rng.random()
    edges = np.cumsum(ratios)
    for kind, edge in zip(TaskKind.ALL, edges):
        if r < edge:
            return kind
    return TaskKind.ALL[-1]


def total_loss(task: str, l_ans, l_seg=None, l_asso=None) -> LossBreakdown:
    """Combine components with unit weights; inactive ones report as 0."""
    if task == TaskKind.IMG_DES:
        if l_seg is not None or l_asso is not None:
            raise ConfigError("IMG_DES trains the language part only; seg/asso losses are not allowed")
        return LossBreakdown(0.0, 0.0, l_ans, l_ans, (False, False, True))
    if task in (TaskKind.NOUN_EXT, TaskKind.ENT_GRO):
        if l_seg is None or l_asso is None:
            raise ConfigError(f"{task} requires seg and association losses")
        return LossBreakdown(l_seg, l_asso, l_ans, l_seg + l_asso + l_ans, (True, True, True))
    raise ConfigError(f"unknown task {task!r}")


def association_target(prep: PreparedScene, assignment, num_queries: int,
                       dtype: torch.dtype) -> torch.Tensor:
    """(m, q) binary target: noun i owns query j iff j matched one of its entities."""
    m = prep.assoc.shape[0]
    target = torch.zeros((m, num_queries), dtype=dtype)
    for qi, gi in assignment.pairs:
        target[:, qi] = torch.from_numpy(prep.assoc[:, gi]).to(dtype)
    return target


def compute_scene_loss(model: GroundingModel, prep: PreparedScene, task: str) -> LossBreakdown:
    cfg = model.config
    grid = model.encode_image(prep.image)
    visual = model.projector(grid)

    if task == TaskKind.IMG_DES:
        seq = model.language.build_sequence(visual, prep.describe_prompt, prep.caption_answer)
        outputs = model.language(seq)
        return total_loss(task, lang_loss(outputs))

    seq = model.language.build_sequence(visual, prep.extract_prompt, prep.noun_answer)
    outputs = model.language(seq)
    l_ans = lang_loss(outputs)
    noun_embeddings = extract_seg_embeddings(outputs)

    decoded, _ = model.forward_segmentation(grid, prep.colormap)
    targets = SegTargets(prep.coverage)
    assignment = hungarian_match(decoded, targets, cfg.decoder.cost_weights)
    l_seg = seg_loss(decoded, targets, assignment, cfg.decoder.no_entity_weight,
                     cfg.decoder.loss_weights).total

    scores = model.association(noun_embeddings, decoded.entity_embeddings)
    target = association_target(prep, assignment, cfg.decoder.num_queries, scores.dtype)
    l_asso = asso_loss(scores, target)
    return total_loss(task, l_ans, l_seg, l_asso)


def compute_seg_only_loss(model: GroundingModel, prep: PreparedScene) -> LossBreakdown:
    """Segmentation branch alone (no language, no association)."""
    cfg = model.config
    grid = model.encode_image(prep.image)
    decoded, _ = model.forward_segmentation(grid, prep.colormap)
    targets = SegTargets(prep.coverage)
    assignment = hungarian_match(decoded, targets, cfg.decoder.cost_weights)
    l_seg = seg_loss(decoded, targets, assignment, cfg.decoder.no_entity_weight,
                     cfg.decoder.loss_weights).total
    return LossBreakdown(l_seg, 0.0, 0.0, l_seg, (True, False, False))


@dataclass
class FitResult:
    model: GroundingModel
    log: list[dict] = field(default_factory=list)
    optimizer: torch.optim.Optimizer | None = None
    step: int = 0
    epoch: int = 0


def learning_rate_at(epoch: int, config: TrainConfig) -> float:
    milestones = [math.floor(f * config.epochs) for f in config.milestone_fractions]
    decays = sum(1 for m in milestones if epoch >= m)
    return config.learning_rate * (config.decay_factor ** decays)


def fit(scenes, model: GroundingModel, config: TrainConfig, out_dir=None,
        resume_state: dict | None = None, start_step: int = 0, start_epoch: int = 0,
        stop_epoch: int | None = None) -> FitResult:
    """Seeded multi-task training loop.

    Batch order and task draws depend only on (seed, epoch) and (seed, step),
    so runs are reproducible and resumable from an epoch boundary: train with
    stop_epoch=k, then continue with start_epoch=k under the same config, and
    the result matches the uninterrupted run exactly (config.epochs fixes the
    decay schedule either way). Per-step LossBreakdowns stream to
    <out_dir>/metrics.jsonl when out_dir is given.
    """
    config.validate()
    if not scenes:
        raise ConfigError("training needs a non-empty dataset")
    torch.manual_seed(config.seed)

    prepared = [model.prepare_scene(s) for s in scenes]
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    if resume_state is not None:
        optimizer.load_state_dict(resume_state)

    out_path = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_path / "metrics.jsonl", "a")

    steps_per_epoch = math.ceil(len(prepared) / config.batch_size)
    last_epoch = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    log: list[dict] = []
    step = start_step
    epoch = start_epoch
    try:
        for epoch in range(start_epoch, last_epoch):
            lr = learning_rate_at(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = np.random.default_rng([config.seed, 0, epoch]).permutation(len(prepared))
            for b in range(steps_per_epoch):
                batch_idx = order[b * config.batch_size : (b + 1) * config.batch_size]
                task_rng = np.random.default_rng([config.seed, 1, step])
                task = sample_task(task_rng, config.ratios)

                optimizer.zero_grad(set_to_none=True)
                pieces = []
                for i in batch_idx:
                    if config.seg_only:
                        pieces.append(compute_seg_only_loss(model, prepared[i]))
                    else:
                        pieces.append(compute_scene_loss(model, prepared[i], task))
                batch_total = torch.stack([p.total for p in pieces]).mean()
                if not torch.isfinite(batch_total):
                    _dump_divergence(out_path, step, task, batch_idx, pieces)
                    raise TrainingDivergedError(f"non-finite loss at step {step} (task {task})")
                batch_total.backward()
                optimizer.step()

                entry = {
                    "step": step,
                    "epoch": epoch,
                    "task": "SEG_ONLY" if config.seg_only else task,
                    "lr": lr,
                    "l_seg": float(np.mean([p.detach().l_seg for p in pieces])),
                    "l_asso": float(np.mean([p.detach().l_asso for p in pieces])),
                    "l_ans": float(np.mean([p.detach().l_ans for p in pieces])),
                    "total": float(batch_total.detach()),
                }
                if step % config.log_every == 0:
                    log.append(entry)
                    if log_fh is not None:
                        log_fh.write(json.dumps(entry) + "\n")
                step += 1
            epoch += 1
    finally:
        if log_fh is not None:
            log_fh.close()
    return FitResult(model=model, log=log, optimizer=optimizer, step=step, epoch=epoch)


def _dump_divergence(out_path, step, task, batch_idx, pieces) -> None:
    if out_path is None:
        return
    doc = {
        "step": step,
        "task": task,
        "batch_indices": [int(i) for i in batch_idx],
        "components": [
            {"l_seg": p.detach().l_seg, "l_asso": p.detach().l_asso, "l_ans": p.detach().l_ans}
            for p in pieces
        ],
    }
    (out_path / "diverged.json").write_text(json.dumps(doc, indent=2))

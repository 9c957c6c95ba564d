"""Report figures and grounding overlays.

Metric figures are rendered with matplotlib next to the delimited report
output. Overlays are composited with PIL so the output dimensions match the
input image exactly.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from .metrics import AR_THRESHOLDS

OVERLAY_COLORS = [
    (230, 60, 60), (60, 120, 230), (60, 190, 90), (235, 200, 40),
    (160, 70, 220), (245, 145, 40), (70, 200, 210), (220, 110, 180),
]


def save_loss_curves(log: list[dict], path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [e["step"] for e in log]
    for key, label in (("total", "total"), ("l_seg", "seg"), ("l_asso", "asso"), ("l_ans", "ans")):
        ax.plot(steps, [e[key] for e in log], label=label, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_recall_curve(per_noun_iou: list[float], path, label: str = "recall") -> Path:
    path = Path(path)
    ious = np.asarray(per_noun_iou, dtype=np.float64)
    recalls = [(ious > t).mean() if ious.size else 0.0 for t in AR_THRESHOLDS]
    ar = float(np.mean(recalls)) if ious.size else 0.0
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(AR_THRESHOLDS, recalls, drawstyle="steps-post")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel(label)
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(f"recall vs IoU threshold (AR = {ar:.3f})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_iou_histogram(per_noun_iou: list[float], path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.hist(np.asarray(per_noun_iou, dtype=np.float64), bins=np.linspace(0, 1, 21), color="#4878cf")
    ax.set_xlabel("per-noun IoU")
    ax.set_ylabel("count")
    ax.set_title("grounding IoU distribution")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_overlay(image: np.ndarray, groundings, path) -> Path:
    """Alpha-blend each noun's mask over the image and label it.

    Output is a lossless RGB PNG with exactly the input dimensions.
    """
    path = Path(path)
    base = np.asarray(image, dtype=np.float64).copy()
    labeled = []
    for k, g in enumerate(groundings):
        mask = np.asarray(g.mask, dtype=bool)
        if not mask.any():
            continue
        color = np.array(OVERLAY_COLORS[k % len(OVERLAY_COLORS)], dtype=np.float64)
        base[mask] = 0.5 * base[mask] + 0.5 * color
        ys, xs = np.nonzero(mask)
        labeled.append((g.noun, int(xs.mean()), int(ys.mean())))
    img = PILImage.fromarray(np.clip(base, 0, 255).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(img)
    for noun, cx, cy in labeled:
        if noun:
            draw.text((max(cx - 2 * len(noun), 1), max(cy - 4, 1)), noun, fill=(255, 255, 255))
    img.save(path, format="PNG")
    return path

"""Finite-difference gradient verification for every differentiable module.

For each module a scalar loss is evaluated at a fresh random init; analytic
gradients from autograd are compared against central differences over a
sample of coordinates per parameter tensor, at double precision. The
matching-dependent losses hold their assignment fixed, since the assignment
is a piecewise-constant function of the parameters.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .association import AssociationHead, asso_loss
from .encoders import ColormapEncoder, GridFeatures, ImageEncoder, PYRAMID_SCALES
from .fusion import FusedPyramid, ResoBlend, ResoBlendConfig
from .language import LanguageModel, Vocabulary, lang_loss
from .layers import init_parameters
from .mask_decoder import MaskDecoder, SegTargets, hungarian_match, seg_loss

DEFAULT_STEP = 1e-5
DEFAULT_THRESHOLD = 1e-4


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    n_coords: int


@dataclass
class ModuleReport:
    module: str
    max_rel_err: float
    threshold: float
    passed: bool
    n_params: int
    n_coords: int
    skipped_params: list[str] = field(default_factory=list)
    params: list[ParamCheck] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "module": self.module,
            "max_rel_err": self.max_rel_err,
            "threshold": self.threshold,
            "passed": self.passed,
            "n_params": self.n_params,
            "n_coords": self.n_coords,
            "skipped_params": self.skipped_params,
        }


def finite_difference_report(module_name: str, loss_fn: Callable[[], torch.Tensor],
                             named_params: list[tuple[str, torch.Tensor]],
                             n_coords: int = 2, step: float = DEFAULT_STEP,
                             threshold: float = DEFAULT_THRESHOLD, seed: int = 0) -> ModuleReport:
    """Compare autograd gradients against central differences.

    Relative error per coordinate is |fd - grad| / max(|fd|, |grad|, 1e-6);
    parameters that receive no gradient (disabled paths) are reported as
    skipped rather than failed.
    """
    params = [p for _, p in named_params]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    checks: list[ParamCheck] = []
    skipped: list[str] = []
    total_coords = 0
    for idx, ((name, param), grad) in enumerate(zip(named_params, grads)):
        if grad is None:
            skipped.append(name)
            continue
        rng = np.random.default_rng([seed, idx])
        flat = param.detach().reshape(-1)
        coords = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
        worst = 0.0
        for c in coords:
            c = int(c)
            with torch.no_grad():
                original = float(flat[c])
                flat[c] = original + step
                f_plus = float(loss_fn())
                flat[c] = original - step
                f_minus = float(loss_fn())
                flat[c] = original
            fd = (f_plus - f_minus) / (2 * step)
            an = float(grad.reshape(-1)[c])
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, rel)
            total_coords += 1
        checks.append(ParamCheck(name, worst, len(coords)))
    max_rel = max((c.max_rel_err for c in checks), default=0.0)
    return ModuleReport(
        module=module_name,
        max_rel_err=max_rel,
        threshold=threshold,
        passed=max_rel <= threshold,
        n_params=len(checks),
        n_coords=total_coords,
        skipped_params=skipped,
        params=checks,
    )


def _probe_loss(tensors: list[torch.Tensor], probes: list[torch.Tensor]) -> torch.Tensor:
    return sum((t * w).sum() for t, w in zip(tensors, probes))


def build_suite(seed: int = 0) -> dict[str, tuple[Callable[[], torch.Tensor], list]]:
    """Small double-precision instances of every differentiable module."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed + 99)

    def randn(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    size, patch = 32, 8
    widths = (16, 24, 32, 40)
    fused_dim, embed_dim, lang_dim, vis_dim = 24, 24, 32, 32
    suite: dict[str, tuple[Callable[[], torch.Tensor], list]] = {}

    # Colormap encoder: scalar probe of all pyramid levels.
    cm_enc = ColormapEncoder(widths).double()
    init_parameters(cm_enc, seed + 1)
    cm_input = torch.rand(3, size, size, generator=gen, dtype=torch.float64)
    cm_probe = {s: randn(widths[s - 2], size >> s, size >> s) for s in PYRAMID_SCALES}

    def cm_loss():
        pyr = cm_enc(cm_input)
        return _probe_loss([pyr.levels[s] for s in PYRAMID_SCALES],
                           [cm_probe[s] for s in PYRAMID_SCALES])

    suite["colormap_encoder"] = (cm_loss, list(cm_enc.named_parameters()))

    # Image encoder.
    im_enc = ImageEncoder(size, patch, vis_dim, depth=2, heads=4).double()
    init_parameters(im_enc, seed + 2)
    im_input = torch.rand(3, size, size, generator=gen, dtype=torch.float64)
    im_probe = randn((size // patch) ** 2, vis_dim)

    def im_loss():
        return (im_enc(im_input).tokens * im_probe).sum()

    suite["image_encoder"] = (im_loss, list(im_enc.named_parameters()))

    # ResoBlend with every sub-block enabled.
    level_dims = dict(zip(PYRAMID_SCALES, widths))
    fusion = ResoBlend(vis_dim, level_dims, fused_dim, ResoBlendConfig()).double()
    init_parameters(fusion, seed + 3)
    grid_tokens = randn((size // patch) ** 2, vis_dim)
    pyramid_levels = {s: randn(widths[s - 2], size >> s, size >> s) for s in PYRAMID_SCALES}
    fusion_probe = {s: randn(fused_dim, size >> s, size >> s) for s in PYRAMID_SCALES}

    def fusion_loss():
        grid = GridFeatures(grid_tokens, (size // patch, size // patch), patch)
        from .encoders import PyramidFeatures

        fused = fusion(grid, PyramidFeatures(dict(pyramid_levels)))
        return _probe_loss([fused.levels[s] for s in PYRAMID_SCALES],
                           [fusion_probe[s] for s in PYRAMID_SCALES])

    suite["resoblend"] = (fusion_loss, list(fusion.named_parameters()))

    # Mask decoder + segmentation loss with a frozen assignment.
    decoder = MaskDecoder(fused_dim, size, embed_dim, num_queries=6, depth=2, heads=4,
                          mask_dim=16).double()
    init_parameters(decoder, seed + 4)
    fused_const = FusedPyramid({s: randn(fused_dim, size >> s, size >> s) for s in PYRAMID_SCALES})
    targets = SegTargets(torch.rand(3, size // 4, size // 4, generator=gen, dtype=torch.float64))
    assignment = hungarian_match(decoder(fused_const), targets)

    def decoder_loss():
        return seg_loss(decoder(fused_const), targets, assignment).total

    suite["mask_decoder"] = (decoder_loss, list(decoder.named_parameters()))

    # Language branch + answer loss.
    vocab = Vocabulary.default()
    lm = LanguageModel(vocab, lang_dim, depth=2, heads=4, context_limit=128).double()
    init_parameters(lm, seed + 5)
    visual = randn(4, lang_dim)
    prompt_ids = vocab.tokenize("<IMAGE> Please help me extract semantic nouns of this sentence: a red circle.")
    answer_ids = vocab.tokenize("There are one semantic nouns, including red circle <SEG>.")

    def lm_loss():
        seq = lm.build_sequence(visual, prompt_ids, answer_ids)
        return lang_loss(lm(seq))

    suite["language"] = (lm_loss, list(lm.named_parameters()))

    # Association head + BCE loss.
    head = AssociationHead(lang_dim, embed_dim, 16).double()
    init_parameters(head, seed + 6)
    e_vl = randn(3, lang_dim)
    e_vc = randn(6, embed_dim)
    target = (torch.rand(3, 6, generator=gen, dtype=torch.float64) > 0.7).double()

    def asso_loss_fn():
        return asso_loss(head(e_vl, e_vc), target)

    suite["association"] = (asso_loss_fn, list(head.named_parameters()))
    return suite


def run_gradcheck(seed: int = 0, n_coords: int = 2, step: float = DEFAULT_STEP,
                  threshold: float = DEFAULT_THRESHOLD) -> dict[str, ModuleReport]:
    suite = build_suite(seed)
    return {
        name: finite_difference_report(name, loss_fn, params, n_coords=n_coords,
                                       step=step, threshold=threshold, seed=seed)
        for name, (loss_fn, params) in suite.items()
    }


def report_to_json(reports: dict[str, ModuleReport]) -> str:
    doc = {
        "schema_version": 1,
        "all_passed": all(r.passed for r in reports.values()),
        "modules": {name: r.to_dict() for name, r in reports.items()},
    }
    return json.dumps(doc, indent=2)

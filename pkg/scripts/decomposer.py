#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""decomposer.py

Cyclic optimisation that splits the trojaned samples of one attack instance
into per-sample clean images x~ and one shared trigger t~.

Each step:
  1. unstamp t~ from every trojaned sample (patch form) or keep the sample
     as is (transform form)
  2. normalise with validation statistics and project through the
     reconstructor, with a per-sample latent offset, to get x~
  3. one Adam step on  CE terms + alpha * reconstruction terms
     (+ smooth_weight * grid smoothness for the transform form)

Variants (form selection probes all four):
  patch_binomial     free per-pixel mask
  patch_uniform      one mask level shared by every pixel
  transform_simple   centre-only grids + biases
  transform_complex  full 3x3 grids + biases
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from forensics_warnings import LowConfidenceWarning
from scripts.bfl_container import read_array, read_json, write_array, write_json, write_png
from scripts.errors import ConfigurationError, DimensionError, OptimizationError
from scripts.reconstructor import FeatureExtractor, Reconstructor, latent_shape, perceptual_distance, reconstruct
from scripts.trigger_algebra import (
    PatchTrigger,
    Trigger,
    TransformTrigger,
    center_only_grid,
    channel_stats,
    from_hwc,
    image_metrics,
    load_trigger,
    normalize,
    save_trigger,
    stamp,
    stamp_transform,
    to_hwc,
    unstamp_patch,
)
from scripts.zoo_factory import AttackInstance, predict

logger = logging.getLogger(__name__)

FORMS = ("patch", "transform", "auto")
VARIANTS = ("patch_binomial", "patch_uniform", "transform_simple", "transform_complex")
DEFAULT_VARIANT = {"patch": "patch_binomial", "transform": "transform_complex"}
LOW_CONFIDENCE_ASR = 0.5

__all__ = [
    "AttackInstance",
    "DecompositionConfig",
    "DecompositionResult",
    "FormSelection",
    "decompose",
    "decomposition_quality",
    "load_result",
    "loss_ce",
    "loss_recon",
    "loss_smooth",
    "save_result",
    "select_form",
]


@dataclass(frozen=True)
class DecompositionConfig:
    """Decomposition hyper-parameters.

    `alpha` defaults to 100 for `recon_reduction="mean"`, where the
    reconstruction term is a per-element MSE plus a perceptual distance.
    With `"sum"` the term becomes a squared Euclidean norm and alpha must
    shrink by roughly the number of pixels.

    `holdout_fraction` of the non-target validation samples never enter
    the cross-entropy term; `validation_asr` is measured on them.
    """

    alpha: float = 100.0
    smooth_weight: float = 1.0
    steps: int = 500
    learning_rate: float = 0.05
    seed: int = 0
    form: str = "auto"
    variant: Optional[str] = None
    normalize: bool = True
    latent_lr: float = 0.01
    recon_reduction: str = "mean"
    probe_fraction: float = 0.2
    tie_margin: float = 0.02
    smooth_pool: int = 3
    mask_init: float = 0.1
    grid_noise: float = 0.01
    holdout_fraction: float = 0.25
    progress: bool = False

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be > 0")
        if self.steps <= 0:
            raise ConfigurationError("steps must be > 0")
        if self.form not in FORMS:
            raise ConfigurationError(f"form must be one of {list(FORMS)}, got {self.form!r}")
        if self.variant is not None and self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {list(VARIANTS)}, got {self.variant!r}")
        if self.recon_reduction not in ("mean", "sum"):
            raise ConfigurationError("recon_reduction must be 'mean' or 'sum'")
        if not 0.0 < self.probe_fraction <= 1.0:
            raise ConfigurationError("probe_fraction must be in (0, 1]")
        if self.smooth_pool < 1:
            raise ConfigurationError("smooth_pool must be >= 1")
        if not 0.0 < self.mask_init < 1.0:
            raise ConfigurationError("mask_init must be in (0, 1)")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigurationError("holdout_fraction must be in [0, 1)")

    @property
    def probe_steps(self) -> int:
        return max(1, int(round(self.probe_fraction * self.steps)))


@dataclass(frozen=True)
class FormSelection:
    variant: str
    probe_asr: Dict[str, float]
    tie_broken: bool
    probe_steps: int

    @property
    def form(self) -> str:
        return variant_form(self.variant)

    def to_dict(self) -> Dict[str, Any]:
        return {"variant": self.variant, "probe_asr": self.probe_asr, "tie_broken": self.tie_broken, "probe_steps": self.probe_steps}


@dataclass
class DecompositionResult:
    clean: torch.Tensor
    trigger: Trigger
    form: str
    variant: str
    metrics: Dict[str, Any] = field(default_factory=dict)
    loss_trace: List[float] = field(default_factory=list)
    instance_id: str = ""
    selection: Optional[FormSelection] = None

    @property
    def low_confidence(self) -> bool:
        return bool(self.metrics.get("low_confidence", False))


def variant_form(variant: str) -> str:
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    return variant.split("_", 1)[0]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_ce(
    model: nn.Module,
    x_tilde: torch.Tensor,
    trig: Trigger,
    x_val: torch.Tensor,
    target: int,
    victim_labels: torch.Tensor,
) -> torch.Tensor:
    """Three equally weighted, batch-mean cross entropies."""
    y_t = torch.full((x_tilde.shape[0],), target, dtype=torch.long)
    y_tv = torch.full((x_val.shape[0],), target, dtype=torch.long)
    return (
        F.cross_entropy(model(stamp(x_tilde, trig)), y_t)
        + F.cross_entropy(model(stamp(x_val, trig)), y_tv)
        + F.cross_entropy(model(x_tilde), victim_labels)
    )


def loss_recon(
    x_hat: torch.Tensor,
    x_tilde: torch.Tensor,
    x_t: torch.Tensor,
    x_tilde_t: torch.Tensor,
    features: FeatureExtractor,
    reduction: str = "mean",
) -> torch.Tensor:
    """perceptual(x^, x~) + L2(x (+) t, x~ (+) t~).

    reduction="sum": squared Euclidean distance per sample, averaged over the
    batch. reduction="mean": per-element mean squared error.
    """
    if x_t.shape != x_tilde_t.shape or x_hat.shape != x_tilde.shape:
        raise DimensionError("reconstruction loss inputs differ in shape")
    perceptual = perceptual_distance(features, x_hat, x_tilde).mean()
    diff = (x_t - x_tilde_t) ** 2
    if reduction == "sum":
        pixel = diff.reshape(diff.shape[0], -1).sum(dim=1).mean() if diff.dim() == 4 else diff.sum()
    elif reduction == "mean":
        pixel = diff.mean()
    else:
        raise ConfigurationError(f"unknown reduction {reduction!r}")
    return perceptual + pixel


def loss_smooth(t: TransformTrigger, pool: int = 3) -> torch.Tensor:
    """Squared distance between the grid field and its block-averaged version.

    Each of the nine grid slots forms an (H, W) coefficient plane; planes are
    average-pooled with window `pool` (edge windows average what they cover)
    and resized back by nearest neighbour.
    """
    c, h, w = t.image_shape
    planes = t.grid_field().reshape(1, c * 9, h, w)
    pooled = F.avg_pool2d(planes, kernel_size=pool, stride=pool, ceil_mode=True)
    up = pooled.repeat_interleave(pool, dim=-2).repeat_interleave(pool, dim=-1)[..., :h, :w]
    return ((up - planes) ** 2).sum()


# ---------------------------------------------------------------------------
# trigger parameterisations
# ---------------------------------------------------------------------------


def _logit(p: torch.Tensor, eps: float = 1e-2) -> torch.Tensor:
    p = p.clamp(eps, 1.0 - eps)
    return torch.log(p) - torch.log1p(-p)


class _TriggerParams:
    """Free optimisation leaves for one variant and the map leaves -> Trigger."""

    def __init__(self, variant: str, shape: Tuple[int, int, int], init_pattern: torch.Tensor, cfg: DecompositionConfig, gen: torch.Generator):
        c, h, w = shape
        self.variant = variant
        self.shape = shape
        if variant == "patch_binomial":
            self.mask = torch.full((h, w), math.log(cfg.mask_init / (1.0 - cfg.mask_init)))
            self.pattern = _logit(init_pattern.clone())
        elif variant == "patch_uniform":
            self.mask = torch.full((1, 1), math.log(cfg.mask_init / (1.0 - cfg.mask_init)))
            self.pattern = _logit(init_pattern.clone())
        elif variant == "transform_simple":
            self.center = 1.0 + cfg.grid_noise * torch.randn((c, h, w), generator=gen)
            self.biases = torch.zeros(c, h, w)
        elif variant == "transform_complex":
            weights = torch.zeros(c, 3 * h, 3 * w)
            weights[:, 1::3, 1::3] = 1.0
            self.weights = weights + cfg.grid_noise * torch.randn(weights.shape, generator=gen)
            self.biases = torch.zeros(c, h, w)
        else:
            raise ConfigurationError(f"unknown variant {variant!r}")
        for p in self.leaves():
            p.requires_grad_(True)

    def leaves(self) -> List[torch.Tensor]:
        if self.variant.startswith("patch"):
            return [self.mask, self.pattern]
        if self.variant == "transform_simple":
            return [self.center, self.biases]
        return [self.weights, self.biases]

    def trigger(self) -> Trigger:
        c, h, w = self.shape
        if self.variant.startswith("patch"):
            mask = torch.sigmoid(self.mask).expand(h, w)
            return PatchTrigger(mask, torch.sigmoid(self.pattern))
        if self.variant == "transform_simple":
            return TransformTrigger(center_only_grid(self.center), self.biases)
        return TransformTrigger(self.weights, self.biases)


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------


def _victim_labels(inst: AttackInstance, model: nn.Module, x_tilde: torch.Tensor) -> torch.Tensor:
    n = x_tilde.shape[0]
    if len(inst.victim_labels) == 1:
        return torch.full((n,), int(inst.victim_labels[0]), dtype=torch.long)
    if len(inst.victim_labels) == n:
        return torch.as_tensor(inst.victim_labels, dtype=torch.long)
    # pseudo labels: best non-target class of the current clean estimate
    with torch.no_grad():
        logits = model(x_tilde.detach())
        logits[:, inst.target] = float("-inf")
        return logits.argmax(dim=1)


def _non_target(inst: AttackInstance) -> torch.Tensor:
    keep = inst.validation_labels != inst.target
    if not bool(keep.any()):
        raise ConfigurationError(f"instance {inst.instance_id}: every validation sample has the target label")
    return inst.validation[keep]


def split_validation(x_val: torch.Tensor, fraction: float, seed: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """(fit, holdout) split of the non-target validation samples, fixed by `seed`.

    Fewer than two samples, or `fraction == 0`, give the same tensor twice.
    """
    n = int(x_val.shape[0])
    if n < 2 or fraction <= 0:
        return x_val, x_val
    k = min(n - 1, max(1, int(round(fraction * n))))
    order = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    return x_val[order[k:]], x_val[order[:k]]


def _run_variant(
    inst: AttackInstance,
    recon: Reconstructor,
    features: FeatureExtractor,
    cfg: DecompositionConfig,
    variant: str,
    steps: int,
) -> DecompositionResult:
    model = inst.model.eval()
    x_t = inst.trojaned
    x_fit, x_hold = split_validation(_non_target(inst), cfg.holdout_fraction, cfg.seed)
    shape = tuple(int(s) for s in x_t.shape[1:])
    form = variant_form(variant)
    ref = channel_stats(inst.validation)
    gen = torch.Generator().manual_seed(cfg.seed)

    params = _TriggerParams(variant, shape, inst.validation.mean(dim=0), cfg, gen)  # type: ignore[arg-type]
    latent = torch.zeros((x_t.shape[0], *latent_shape(recon, shape)), requires_grad=True)  # type: ignore[arg-type]
    opt = torch.optim.Adam(
        [
            {"params": params.leaves(), "lr": cfg.learning_rate},
            {"params": [latent], "lr": cfg.latent_lr},
        ]
    )
    leaves = params.leaves() + [latent]

    def _forward() -> Tuple[torch.Tensor, torch.Tensor, Trigger, Dict[str, float]]:
        trig = params.trigger()
        if form == "patch":
            x_hat = unstamp_patch(x_t, trig)  # type: ignore[arg-type]
        else:
            x_hat = x_t
        x_in = normalize(x_hat, ref) if cfg.normalize else x_hat
        x_tilde = reconstruct(recon, x_in, latent)
        ce = loss_ce(model, x_tilde, trig, x_fit, inst.target, _victim_labels(inst, model, x_tilde))
        rec = loss_recon(x_hat, x_tilde, x_t, stamp(x_tilde, trig), features, cfg.recon_reduction)
        total = ce + cfg.alpha * rec
        parts = {"ce": float(ce), "recon": float(rec)}
        if form == "transform" and cfg.smooth_weight > 0:
            sm = loss_smooth(trig, cfg.smooth_pool)  # type: ignore[arg-type]
            total = total + cfg.smooth_weight * sm
            parts["smooth"] = float(sm)
        return total, x_tilde, trig, parts

    trace: List[float] = []
    for step in tqdm(range(steps), desc=f"decompose[{variant}]", disable=not cfg.progress):
        total, _, _, parts = _forward()
        value = float(total)
        if not math.isfinite(value):
            raise OptimizationError(f"non-finite decomposition loss at step {step} ({variant})", trace + [value])
        trace.append(value)
        grads = torch.autograd.grad(total, leaves)
        for leaf, g in zip(leaves, grads):
            leaf.grad = g
        opt.step()
        if step % 50 == 0:
            logger.debug("%s step %d loss %.5f %s", variant, step, value, parts)

    with torch.no_grad():
        total, x_tilde, trig, parts = _forward()
    final = float(total)
    if not math.isfinite(final):
        raise OptimizationError(f"non-finite decomposition loss after {steps} steps ({variant})", trace + [final])
    trigger = trig.detach()
    x_tilde = x_tilde.detach()

    with torch.no_grad():
        val_asr = float((predict(model, stamp(x_hold, trigger)) == inst.target).float().mean())
        fit_asr = float((predict(model, stamp(x_fit, trigger)) == inst.target).float().mean())
        preds = predict(model, x_tilde)
    if inst.source_labels is not None:
        acc, basis = float((preds == inst.source_labels).float().mean()), "labels"
    else:
        acc, basis = float((preds != inst.target).float().mean()), "non_target"
    metrics: Dict[str, Any] = {
        "validation_asr": val_asr,
        "validation_holdout": int(x_hold.shape[0]) if x_hold is not x_fit else 0,
        "fit_asr": fit_asr,
        "clean_accuracy": acc,
        "clean_accuracy_basis": basis,
        "initial_loss": trace[0],
        "final_loss": final,
        "final_terms": parts,
        "steps": steps,
        "low_confidence": val_asr < LOW_CONFIDENCE_ASR,
    }
    return DecompositionResult(
        clean=x_tilde,
        trigger=trigger,
        form=form,
        variant=variant,
        metrics=metrics,
        loss_trace=trace,
        instance_id=inst.instance_id,
    )


def _resolve_features(inst: AttackInstance, features: Optional[FeatureExtractor]) -> FeatureExtractor:
    if features is not None:
        return features
    logger.warning("no clean feature network supplied; perceptual term uses the subject model")
    return FeatureExtractor(inst.model)


def select_form(
    inst: AttackInstance,
    recon: Reconstructor,
    cfg: DecompositionConfig,
    probe_steps: Optional[int] = None,
    features: Optional[FeatureExtractor] = None,
) -> FormSelection:
    """Probe every variant for a few steps; highest validation ASR wins.

    Variants within `tie_margin` of the best are resolved in VARIANTS order,
    i.e. towards the lower-dimensional patch parameterisations.
    """
    feats = _resolve_features(inst, features)
    steps = probe_steps if probe_steps is not None else cfg.probe_steps
    probe: Dict[str, float] = {}
    for variant in VARIANTS:
        probe[variant] = float(_run_variant(inst, recon, feats, cfg, variant, steps).metrics["validation_asr"])
    best = max(probe.values())
    contenders = [v for v in VARIANTS if probe[v] >= best - cfg.tie_margin]
    chosen = contenders[0]
    tie_broken = len(contenders) > 1
    logger.info("form selection %s: %s -> %s%s", inst.instance_id, probe, chosen, " (tie)" if tie_broken else "")
    return FormSelection(variant=chosen, probe_asr=probe, tie_broken=tie_broken, probe_steps=steps)


def decompose(
    inst: AttackInstance,
    recon: Reconstructor,
    cfg: DecompositionConfig,
    features: Optional[FeatureExtractor] = None,
) -> DecompositionResult:
    feats = _resolve_features(inst, features)
    selection: Optional[FormSelection] = None
    if cfg.variant is not None:
        variant = cfg.variant
        if cfg.form != "auto" and variant_form(variant) != cfg.form:
            raise ConfigurationError(f"variant {variant} does not belong to form {cfg.form}")
    elif cfg.form == "auto":
        selection = select_form(inst, recon, cfg, features=feats)
        variant = selection.variant
    else:
        variant = DEFAULT_VARIANT[cfg.form]

    result = _run_variant(inst, recon, feats, cfg, variant, cfg.steps)
    result.selection = selection
    result.metrics["seed"] = cfg.seed
    if selection is not None:
        result.metrics["selection"] = selection.to_dict()
    if result.low_confidence:
        warnings.warn(
            f"instance {inst.instance_id}: decomposed trigger reaches only "
            f"{result.metrics['validation_asr']:.2f} validation ASR",
            LowConfidenceWarning,
            stacklevel=2,
        )
    logger.info(
        "decomposed %s (%s): asr=%.3f clean_acc=%.3f loss %.4f -> %.4f",
        inst.instance_id,
        variant,
        result.metrics["validation_asr"],
        result.metrics["clean_accuracy"],
        result.metrics["initial_loss"],
        result.metrics["final_loss"],
    )
    return result


def decomposition_quality(result: DecompositionResult, inst: AttackInstance) -> Dict[str, Dict[str, float]]:
    """Mean L1/PSNR/SSIM of x~ against the true clean images, and of
    x (+) t~ against the observed trojaned samples."""
    if inst.clean_truth is None:
        raise ConfigurationError(f"instance {inst.instance_id} carries no clean ground truth")
    truth = inst.clean_truth
    with torch.no_grad():
        restamped = stamp(truth, result.trigger)

    def _mean(pairs: Sequence[Tuple[torch.Tensor, torch.Tensor]]) -> Dict[str, float]:
        rows = [image_metrics(a, b) for a, b in pairs]
        return {k: float(np.mean([r[k] for r in rows])) for k in ("l1", "psnr", "ssim")}

    return {
        "clean": _mean(list(zip(result.clean, truth))),
        "trigger": _mean(list(zip(restamped, inst.trojaned))),
    }


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _trigger_preview(trig: Trigger, base: torch.Tensor) -> torch.Tensor:
    if isinstance(trig, PatchTrigger):
        return (trig.pattern * trig.mask).clamp(0.0, 1.0)
    return stamp_transform(base, trig)


def save_result(result: DecompositionResult, directory: Union[str, Path], pngs: bool = True) -> Path:
    d = Path(directory)
    write_array(d / "clean.bfl", to_hwc(result.clean))
    write_array(d / "loss_trace.bfl", np.asarray(result.loss_trace, dtype=np.float32))
    save_trigger(d / "trigger", result.trigger)
    write_json(
        d / "metrics.json",
        {
            "instance_id": result.instance_id,
            "form": result.form,
            "variant": result.variant,
            "metrics": result.metrics,
        },
    )
    if pngs:
        for i, img in enumerate(result.clean):
            write_png(d / "png" / f"clean_{i:02d}.png", to_hwc(img))
        write_png(d / "png" / "trigger.png", to_hwc(_trigger_preview(result.trigger, result.clean[0])))
        if isinstance(result.trigger, PatchTrigger):
            write_png(d / "png" / "mask.png", result.trigger.mask.detach().numpy()[:, :, None])
    return d


def load_result(directory: Union[str, Path]) -> DecompositionResult:
    d = Path(directory)
    meta = read_json(d / "metrics.json")
    trace = read_array(d / "loss_trace.bfl")
    metrics = dict(meta.get("metrics", {}))
    sel = metrics.get("selection")
    selection = (
        FormSelection(sel["variant"], dict(sel["probe_asr"]), bool(sel["tie_broken"]), int(sel["probe_steps"])) if sel else None
    )
    return DecompositionResult(
        clean=from_hwc(read_array(d / "clean.bfl")),
        trigger=load_trigger(d / "trigger"),
        form=str(meta["form"]),
        variant=str(meta["variant"]),
        metrics=metrics,
        loss_trace=[float(v) for v in trace],
        instance_id=str(meta.get("instance_id", d.name)),
        selection=selection,
    )

#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""scanner.py

Trigger-inversion scanning.

- invert_trigger: gradient-descent inversion of a patch or transform trigger
  towards one target label. With no regularizer specs it is the vanilla
  NC-style baseline (size term + cost escalation); with specs it is the
  synthesized scanner (distribution-bounded penalties).
- synthesize_scanner: one RegularizerSpec per summarized feature block.
- scan_model / evaluate_scanner: per-model verdicts and zoo confusion counts.

A model is reported trojaned when its best REASR reaches the threshold
(inclusive).
"""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import norm
from tqdm import tqdm

from forensics_warnings import ForensicsWarning
from scripts.bfl_container import write_json
from scripts.errors import ArgumentError, ConfigurationError, FormatError, OptimizationError
from scripts.summarizer import BLOCKS, AttackSummary
from scripts.trigger_algebra import (
    PatchTrigger,
    Trigger,
    TransformTrigger,
    center_only_grid,
    identity_transform,
    mask_centroid,
    stamp,
)
from scripts.zoo_factory import Dataset, ZooEntry, predict

logger = logging.getLogger(__name__)

THRESHOLD = 0.88
DEFAULT_Z = 1.04
DELTA_SIZE = 100.0
DELTA_PIXEL = 10.0
SIZE_LIKE = ("mask_size", "centroid_i", "centroid_j")
FEATURES = {
    "patch": ("mask_size", "centroid_i", "centroid_j", "mask", "pattern"),
    "transform": ("weights", "biases"),
}
_NC_EPS = 1e-7


def z_from_percentile(low: float, high: float) -> float:
    """z such that [mu - z*sigma, mu + z*sigma] covers the central low..high percent band."""
    if not 0.0 < low < high < 100.0:
        raise ConfigurationError(f"percentile band must satisfy 0 < low < high < 100, got {low}, {high}")
    return float((norm.ppf(high / 100.0) - norm.ppf(low / 100.0)) / 2.0)


@dataclass(frozen=True, eq=False)
class RegularizerSpec:
    feature: str
    mu: Any
    sigma: Any
    z: float = DEFAULT_Z
    delta: float = DELTA_SIZE

    def __post_init__(self) -> None:
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.shape != sigma.shape:
            raise ConfigurationError(f"spec {self.feature}: mu and sigma shapes differ")
        if not np.all(sigma > 0):
            raise ConfigurationError(f"spec {self.feature}: sigma must be > 0")
        if not self.z > 0:
            raise ConfigurationError(f"spec {self.feature}: z must be > 0")
        if self.delta < 0:
            raise ConfigurationError(f"spec {self.feature}: delta must be >= 0")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.mu - self.z * self.sigma, self.mu + self.z * self.sigma

    def to_dict(self) -> Dict[str, Any]:
        scalar = self.mu.size == 1
        return {
            "feature": self.feature,
            "shape": list(self.mu.shape),
            "mu": float(self.mu.ravel()[0]) if scalar else self.mu.ravel().tolist(),
            "sigma": float(self.sigma.ravel()[0]) if scalar else self.sigma.ravel().tolist(),
            "z": self.z,
            "delta": self.delta,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RegularizerSpec":
        shape = tuple(d.get("shape", []))
        mu = np.asarray(d["mu"], dtype=np.float64).reshape(shape)
        sigma = np.asarray(d["sigma"], dtype=np.float64).reshape(shape)
        return cls(str(d["feature"]), mu, sigma, float(d.get("z", DEFAULT_Z)), float(d.get("delta", DELTA_SIZE)))


def reg_loss(f_value: Any, spec: RegularizerSpec) -> torch.Tensor:
    """0 on the closed band [mu - z*sigma, mu + z*sigma], delta*|f - mu| outside; mean over dimensions."""
    f = f_value if isinstance(f_value, torch.Tensor) else torch.as_tensor(f_value, dtype=torch.float64)
    mu = torch.as_tensor(spec.mu, dtype=f.dtype)
    sigma = torch.as_tensor(spec.sigma, dtype=f.dtype)
    if f.shape != mu.shape and f.numel() != mu.numel():
        raise ConfigurationError(f"feature {spec.feature}: value shape {tuple(f.shape)} != spec shape {tuple(mu.shape)}")
    f = f.reshape(mu.shape)
    lo, hi = mu - spec.z * sigma, mu + spec.z * sigma
    outside = (f < lo) | (f > hi)
    penalty = torch.where(outside, spec.delta * (f - mu).abs(), torch.zeros_like(f))
    return penalty.mean()


def trigger_features(trig: Trigger) -> Dict[str, torch.Tensor]:
    if isinstance(trig, PatchTrigger):
        ci, cj = mask_centroid(trig.mask)
        return {
            "mask_size": trig.mask.sum().reshape(1),
            "centroid_i": ci.reshape(1),
            "centroid_j": cj.reshape(1),
            "mask": trig.mask,
            "pattern": trig.pattern,
        }
    return {"weights": trig.weights, "biases": trig.biases}


@dataclass(frozen=True)
class InversionConfig:
    steps: int = 300
    learning_rate: float = 0.1
    init_cost: float = 1e-3
    cost_up: float = 1.5
    cost_down: float = 2.0
    schedule_every: int = 50
    size_term: str = "auto"
    batch_size: int = 32
    holdout_fraction: float = 0.5
    seed: int = 0
    threshold: float = THRESHOLD
    mask_mode: str = "free"
    transform_mode: str = "complex"
    progress: bool = False

    def __post_init__(self) -> None:
        if self.steps <= 0 or self.schedule_every <= 0 or self.batch_size <= 0:
            raise ConfigurationError("steps, schedule_every and batch_size must be > 0")
        if self.size_term not in ("auto", "on", "off"):
            raise ConfigurationError("size_term must be auto|on|off")
        if self.mask_mode not in ("free", "uniform"):
            raise ConfigurationError("mask_mode must be free|uniform")
        if self.transform_mode not in ("complex", "simple"):
            raise ConfigurationError("transform_mode must be complex|simple")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigurationError("holdout_fraction must be in (0, 1)")
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigurationError("threshold must be in (0, 1]")


@dataclass
class SynthesizedScanner:
    form: str
    specs: List[RegularizerSpec] = field(default_factory=list)
    config: InversionConfig = field(default_factory=InversionConfig)
    name: str = ""
    kind: str = ""
    cluster_id: Optional[int] = None

    def __post_init__(self) -> None:
        if self.form not in FEATURES:
            raise ConfigurationError(f"scanner form must be patch|transform, got {self.form!r}")
        for spec in self.specs:
            if spec.feature not in FEATURES[self.form]:
                raise ConfigurationError(f"feature {spec.feature!r} is not defined for the {self.form} form")

    @property
    def vanilla(self) -> bool:
        return not self.specs

    @property
    def threshold(self) -> float:
        return self.config.threshold


class Inversion(NamedTuple):
    trigger: Trigger
    reasr: float


@dataclass
class ScanVerdict:
    model_id: str
    reasr: Dict[int, float]
    triggers: Dict[int, Trigger]
    best_target: int
    best_reasr: float
    trojaned: bool
    wall_time: float
    victim: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model_id": self.model_id,
            "reasr": {str(k): v for k, v in sorted(self.reasr.items())},
            "best_target": self.best_target,
            "best_reasr": self.best_reasr,
            "trojaned": self.trojaned,
            "victim": self.victim,
        }


# ---------------------------------------------------------------------------
# inversion
# ---------------------------------------------------------------------------


class _InversionParams:
    """NC-style tanh parameterisation for patches; identity-centred grids for transforms."""

    def __init__(self, form: str, shape: Tuple[int, int, int], cfg: InversionConfig, gen: torch.Generator):
        c, h, w = shape
        self.form, self.shape, self.cfg = form, shape, cfg
        if form == "patch":
            mask_shape = (h, w) if cfg.mask_mode == "free" else (1, 1)
            self.leaves = [
                torch.rand(mask_shape, generator=gen) * 2.0 - 1.0,
                torch.rand((c, h, w), generator=gen) * 2.0 - 1.0,
            ]
        elif cfg.transform_mode == "simple":
            self.leaves = [1.0 + 0.01 * torch.randn((c, h, w), generator=gen), torch.zeros(c, h, w)]
        else:
            ident = identity_transform(shape).weights
            self.leaves = [ident + 0.01 * torch.randn(ident.shape, generator=gen), torch.zeros(c, h, w)]
        for p in self.leaves:
            p.requires_grad_(True)

    def trigger(self) -> Trigger:
        c, h, w = self.shape
        if self.form == "patch":
            mask = (torch.tanh(self.leaves[0]) / (2.0 - _NC_EPS) + 0.5).expand(h, w)
            return PatchTrigger(mask, torch.tanh(self.leaves[1]) / 2.0 + 0.5)
        if self.cfg.transform_mode == "simple":
            return TransformTrigger(center_only_grid(self.leaves[0]), self.leaves[1])
        return TransformTrigger(self.leaves[0], self.leaves[1])


def _size(trig: Trigger) -> torch.Tensor:
    if isinstance(trig, PatchTrigger):
        return trig.mask.sum()
    ident = identity_transform(trig.image_shape, trig.weights.dtype).weights
    return (trig.weights - ident).abs().sum() + trig.biases.abs().sum()


def _asr(model: nn.Module, images: torch.Tensor, trig: Trigger, target: int) -> float:
    with torch.no_grad():
        return float((predict(model, stamp(images, trig)) == target).float().mean())


def _feasible(trig: Trigger, specs: Sequence[RegularizerSpec]) -> bool:
    feats = trigger_features(trig)
    for spec in specs:
        if spec.mu.size == 1 and float(reg_loss(feats[spec.feature].detach().double(), spec)) > 0.0:
            return False
    return True


def split_clean(clean: Dataset, target: int, holdout_fraction: float, seed: int, victim: Optional[int] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    keep = clean.labels != target
    if victim is not None:
        keep &= clean.labels == victim
    images = clean.images[keep]
    if images.shape[0] < 2:
        raise ArgumentError(f"need at least two non-target clean samples for target {target}")
    perm = torch.randperm(images.shape[0], generator=torch.Generator().manual_seed(seed))
    n_hold = min(images.shape[0] - 1, max(1, int(round(holdout_fraction * images.shape[0]))))
    return images[perm[n_hold:]], images[perm[:n_hold]]


def invert_trigger(
    model: nn.Module,
    clean_samples: Dataset,
    target: int,
    form: str,
    regs: Sequence[RegularizerSpec],
    cfg: InversionConfig,
    victim: Optional[int] = None,
    trace: Optional[List[float]] = None,
) -> Inversion:
    if form not in FEATURES:
        raise ConfigurationError(f"inversion form must be patch|transform, got {form!r}")
    model.eval()
    opt_x, hold_x = split_clean(clean_samples, target, cfg.holdout_fraction, cfg.seed, victim)
    shape = clean_samples.image_shape
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + target)
    params = _InversionParams(form, shape, cfg, gen)
    opt = torch.optim.Adam(params.leaves, lr=cfg.learning_rate, betas=(0.5, 0.9))
    use_size = cfg.size_term == "on" or (cfg.size_term == "auto" and not regs)
    cost = cfg.init_cost
    batch_perm = torch.randperm(opt_x.shape[0], generator=gen)
    losses: List[float] = []

    best: Optional[Tuple[Tuple[Any, ...], Trigger]] = None
    for step in tqdm(range(cfg.steps), desc=f"invert[{form}->{target}]", disable=not cfg.progress):
        start = (step * cfg.batch_size) % opt_x.shape[0]
        idx = batch_perm[start : start + cfg.batch_size]
        xb = opt_x[idx]
        trig = params.trigger()
        y = torch.full((xb.shape[0],), target, dtype=torch.long)
        loss = F.cross_entropy(model(stamp(xb, trig)), y)
        if use_size:
            loss = loss + cost * _size(trig)
        if regs:
            feats = trigger_features(trig)
            for spec in regs:
                loss = loss + reg_loss(feats[spec.feature], spec)
        value = float(loss)
        if not math.isfinite(value):
            raise OptimizationError(f"non-finite inversion loss at step {step} (target {target})", losses + [value])
        losses.append(value)
        grads = torch.autograd.grad(loss, params.leaves)
        for leaf, g in zip(params.leaves, grads):
            leaf.grad = g
        opt.step()

        last = step == cfg.steps - 1
        if (step + 1) % cfg.schedule_every == 0 or last:
            with torch.no_grad():
                current = params.trigger().detach()
            asr_now = _asr(model, opt_x, current, target)
            success = asr_now >= cfg.threshold
            key = (success, _feasible(current, regs), -float(_size(current)) if use_size else asr_now)
            if best is None or key > best[0]:
                best = (key, current)
            if use_size:
                cost = cost * cfg.cost_up if success else cost / cfg.cost_down
            logger.debug("target %d step %d asr %.3f cost %.2e loss %.4f", target, step, asr_now, cost, value)

    assert best is not None
    trigger = best[1]
    reasr = _asr(model, hold_x, trigger, target)
    if trace is not None:
        trace.extend(losses)
    return Inversion(trigger=trigger, reasr=reasr)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


def synthesize_scanner(
    summary: AttackSummary,
    delta_default: float = DELTA_SIZE,
    delta_pixel: float = DELTA_PIXEL,
    z: float = DEFAULT_Z,
    config: Optional[InversionConfig] = None,
) -> SynthesizedScanner:
    """One spec per summarized block; size-like scalars get `delta_default`, pixel blocks `delta_pixel`."""
    if summary.dimensions < 1:
        raise ArgumentError("summary has no dimensions to regularize")
    base = config or InversionConfig()
    if summary.kind == "patch_constant":
        base = InversionConfig(**{**asdict(base), "mask_mode": "uniform"})
    specs = []
    for name in BLOCKS[summary.kind]:
        delta = delta_default if name in SIZE_LIKE else delta_pixel
        specs.append(RegularizerSpec(name, summary.mu[name], summary.sigma[name], z, delta))
    return SynthesizedScanner(
        form=summary.form,
        specs=specs,
        config=base,
        name=f"cluster_{summary.cluster_id}_{summary.kind}",
        kind=summary.kind,
        cluster_id=summary.cluster_id,
    )


def vanilla_scanner(form: str = "patch", config: Optional[InversionConfig] = None) -> SynthesizedScanner:
    return SynthesizedScanner(form=form, config=config or InversionConfig(), name=f"vanilla_{form}")


def save_scanner(scanner: SynthesizedScanner, path: Union[str, Path]) -> Path:
    return write_json(
        path,
        {
            "name": scanner.name,
            "form": scanner.form,
            "kind": scanner.kind,
            "cluster_id": scanner.cluster_id,
            "config": asdict(scanner.config),
            "specs": [s.to_dict() for s in scanner.specs],
        },
    )


def load_scanner(path: Union[str, Path]) -> SynthesizedScanner:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"scanner spec not found: {p}")
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
        return SynthesizedScanner(
            form=str(d["form"]),
            specs=[RegularizerSpec.from_dict(s) for s in d.get("specs", [])],
            config=InversionConfig(**d.get("config", {})),
            name=str(d.get("name", p.stem)),
            kind=str(d.get("kind", "")),
            cluster_id=d.get("cluster_id"),
        )
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(p, f"invalid scanner spec ({e.__class__.__name__}: {e})") from e


# ---------------------------------------------------------------------------
# scanning
# ---------------------------------------------------------------------------


def scan_model(
    model: nn.Module,
    scanner: SynthesizedScanner,
    clean_samples: Dataset,
    model_id: str = "",
    victim: Optional[int] = None,
    jobs: int = 1,
    labels: Optional[Sequence[int]] = None,
) -> ScanVerdict:
    """Invert towards every candidate label; trojaned iff best REASR >= threshold."""
    t0 = time.perf_counter()
    candidates = list(labels) if labels is not None else list(range(clean_samples.num_classes))
    if victim is not None:
        candidates = [t for t in candidates if t != victim]
    if not candidates:
        raise ArgumentError("no candidate target labels to scan")

    def _one(target: int) -> Inversion:
        return invert_trigger(model, clean_samples, target, scanner.form, scanner.specs, scanner.config, victim)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one, candidates))
    else:
        results = [_one(t) for t in candidates]

    reasr = {t: r.reasr for t, r in zip(candidates, results)}
    triggers = {t: r.trigger for t, r in zip(candidates, results)}
    best_target = max(candidates, key=lambda t: (reasr[t], -t))
    best = reasr[best_target]
    verdict = ScanVerdict(
        model_id=model_id,
        reasr=reasr,
        triggers=triggers,
        best_target=best_target,
        best_reasr=best,
        trojaned=best >= scanner.threshold,
        wall_time=time.perf_counter() - t0,
        victim=victim,
    )
    logger.info("scan %s with %s: best target %d REASR %.3f -> %s", model_id or "?", scanner.name or scanner.form, best_target, best, "trojaned" if verdict.trojaned else "clean")
    return verdict


def summarize_verdicts(verdicts: Sequence[ScanVerdict], truth: Sequence[str]) -> Dict[str, Any]:
    """Confusion counts against ground-truth labels ('clean' | 'trojaned')."""
    if not verdicts:
        raise ArgumentError("cannot evaluate a scanner on an empty zoo")
    if len(verdicts) != len(truth):
        raise ArgumentError("one ground-truth label per verdict is required")
    tp = sum(1 for v, t in zip(verdicts, truth) if t == "trojaned" and v.trojaned)
    fn = sum(1 for v, t in zip(verdicts, truth) if t == "trojaned" and not v.trojaned)
    tn = sum(1 for v, t in zip(verdicts, truth) if t == "clean" and not v.trojaned)
    fp = sum(1 for v, t in zip(verdicts, truth) if t == "clean" and v.trojaned)
    pn = [v.best_reasr for v, t in zip(verdicts, truth) if t == "trojaned"]
    cl = [v.best_reasr for v, t in zip(verdicts, truth) if t == "clean"]
    return {
        "TP": tp,
        "FN": fn,
        "TN": tn,
        "FP": fp,
        "ACC": (tp + tn) / len(verdicts),
        "PN_REASR": float(np.mean(pn)) if pn else None,
        "CL_REASR": float(np.mean(cl)) if cl else None,
        "total": len(verdicts),
    }


def evaluate_scanner(
    zoo: Sequence[ZooEntry],
    scanner: SynthesizedScanner,
    clean_samples: Dataset,
    jobs: int = 1,
) -> Dict[str, Any]:
    if not zoo:
        raise ArgumentError("cannot evaluate a scanner on an empty zoo")
    labels = {e.label for e in zoo}
    if labels != {"clean", "trojaned"}:
        warnings.warn(f"zoo holds only {sorted(labels)} entries; confusion counts are one-sided", ForensicsWarning, stacklevel=2)

    def _one(entry: ZooEntry) -> ScanVerdict:
        return scan_model(entry.model, scanner, clean_samples, model_id=entry.entry_id)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            verdicts = list(pool.map(_one, zoo))
    else:
        verdicts = [_one(e) for e in zoo]
    report = summarize_verdicts(verdicts, [e.label for e in zoo])
    report["scanner"] = scanner.name or scanner.form
    report["verdicts"] = [
        {**v.to_dict(), "label": e.label, "family": e.recipe.family if e.recipe else "clean"} for v, e in zip(verdicts, zoo)
    ]
    return report

#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""remover.py

Backdoor removal by unlearning: fine-tune on a small clean subset mixed 1:1
with the same images stamped by the decomposed trigger, keeping the original
labels. The checkpoint kept is the lowest-ASR epoch whose clean accuracy stays
within `max_drop` of the starting model; if no epoch qualifies the original
model comes back with `failed=True`.

Only clean data is ever stamped; ground-truth trojaned samples are never used.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader
from torch.utils.data import Dataset as TorchDataset
from torchvision import transforms
from tqdm import tqdm

from scripts.errors import ArgumentError, ConfigurationError, TrainingError
from scripts.trigger_algebra import Trigger, empty_patch, stamp
from scripts.zoo_factory import Dataset, InjectionRecipe, accuracy, asr, predict

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UnlearnConfig:
    clean_fraction: float = 0.01
    epochs: int = 10
    learning_rate: float = 5e-4
    batch_size: int = 32
    augment: bool = True
    max_drop: float = 0.05
    holdout_fraction: float = 0.2
    crop_padding: int = 2
    seed: int = 0
    progress: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.clean_fraction <= 1.0:
            raise ConfigurationError(f"clean_fraction must be in (0, 1], got {self.clean_fraction}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigurationError("epochs and batch_size must be > 0")
        if self.max_drop < 0:
            raise ConfigurationError("max_drop must be >= 0")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigurationError("holdout_fraction must be in (0, 1)")


@dataclass
class UnlearnResult:
    model: nn.Module
    failed: bool
    target: int
    base_accuracy: float
    base_asr: float
    selected_epoch: Optional[int] = None
    history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        if self.selected_epoch is None:
            return self.base_accuracy
        return self.history[self.selected_epoch]["accuracy"]

    @property
    def asr(self) -> float:
        if self.selected_epoch is None:
            return self.base_asr
        return self.history[self.selected_epoch]["asr"]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "failed": self.failed,
            "target": self.target,
            "base_accuracy": self.base_accuracy,
            "base_asr": self.base_asr,
            "accuracy": self.accuracy,
            "asr": self.asr,
            "selected_epoch": self.selected_epoch,
            "history": self.history,
        }


class _UnlearnSet(TorchDataset):
    """Clean images followed by their stamped copies, labels unchanged."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, trigger: Trigger, augment: Optional[Any]):
        with torch.no_grad():
            stamped = stamp(images, trigger)
        self.images = torch.cat([images, stamped]).detach()
        self.labels = torch.cat([labels, labels])
        self.augment = augment

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, i: int) -> Tuple[torch.Tensor, torch.Tensor]:
        x = self.images[i]
        if self.augment is not None:
            x = self.augment(x)
        return x, self.labels[i]


def augmentations(image_size: int, padding: int = 2) -> transforms.Compose:
    """Random crop, horizontal flip and cutout on (C, H, W) tensors."""
    return transforms.Compose(
        [
            transforms.RandomCrop(image_size, padding=padding, padding_mode="reflect"),
            transforms.RandomHorizontalFlip(),
            transforms.RandomErasing(p=0.5, scale=(0.02, 0.1), value=0.0),
        ]
    )


def draw_clean_subset(train: Dataset, fraction: float, seed: int = 0) -> Dataset:
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"clean fraction must be in (0, 1], got {fraction}")
    n = max(2, int(round(fraction * len(train))))
    perm = torch.randperm(len(train), generator=torch.Generator().manual_seed(seed))
    return train.subset(torch.sort(perm[:n]).values, split="unlearn")


def infer_target(model: nn.Module, images: torch.Tensor, trigger: Trigger) -> int:
    with torch.no_grad():
        preds = predict(model, stamp(images, trigger))
    return int(torch.bincount(preds).argmax())


def unlearn(
    model: nn.Module,
    trigger: Trigger,
    clean_subset: Dataset,
    cfg: Optional[UnlearnConfig] = None,
    target: Optional[int] = None,
    eval_data: Optional[Dataset] = None,
    asr_trigger: Optional[Union[Trigger, InjectionRecipe]] = None,
) -> UnlearnResult:
    """Fine-tune a copy of `model`; accuracy and ASR are tracked on `eval_data` (default: held-out part of the subset).

    `asr_trigger` lets callers measure ASR with a different trigger than the
    one used for unlearning (the ground-truth recipe when it is known).
    """
    cfg = cfg or UnlearnConfig()
    if len(clean_subset) < 2:
        raise ArgumentError("unlearning needs at least two clean samples")
    _, h, _ = clean_subset.image_shape
    if trigger.image_shape != clean_subset.image_shape:
        raise ConfigurationError(f"trigger shape {trigger.image_shape} does not match data {clean_subset.image_shape}")

    perm = torch.randperm(len(clean_subset), generator=torch.Generator().manual_seed(cfg.seed))
    n_hold = min(len(clean_subset) - 1, max(1, int(round(cfg.holdout_fraction * len(clean_subset)))))
    holdout = clean_subset.subset(perm[:n_hold], split="holdout")
    fit = clean_subset.subset(perm[n_hold:], split="unlearn")
    evaluation = eval_data if eval_data is not None else holdout
    measured = asr_trigger if asr_trigger is not None else trigger

    if target is None:
        target = infer_target(model, holdout.images, trigger)
        logger.info("unlearn target inferred from stamped holdout: %d", target)

    base_acc = accuracy(model, evaluation)
    base_asr = asr(model, evaluation, measured, target)
    logger.info("unlearn start: accuracy %.4f asr %.4f", base_acc, base_asr)

    student = copy.deepcopy(model)
    student.requires_grad_(True)
    augment = augmentations(h, cfg.crop_padding) if cfg.augment else None
    data = _UnlearnSet(fit.images, fit.labels, trigger, augment)
    history: List[Dict[str, float]] = []
    best: Optional[Tuple[Tuple[float, int], Dict[str, torch.Tensor]]] = None

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        loader = DataLoader(data, batch_size=cfg.batch_size, shuffle=True)
        opt = torch.optim.Adam(student.parameters(), lr=cfg.learning_rate)
        for epoch in tqdm(range(cfg.epochs), desc="unlearn", disable=not cfg.progress):
            student.train()
            total, batches = 0.0, 0
            for step, (xb, yb) in enumerate(loader):
                loss = F.cross_entropy(student(xb), yb)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"unlearning diverged at epoch {epoch} step {step}",
                        {"epoch": epoch, "step": step, "loss": float(loss), "seed": cfg.seed},
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss)
                batches += 1
            student.eval()
            acc_now = accuracy(student, evaluation)
            asr_now = asr(student, evaluation, measured, target)
            history.append({"epoch": epoch, "loss": total / max(batches, 1), "accuracy": acc_now, "asr": asr_now})
            logger.debug("unlearn epoch %d loss %.4f accuracy %.4f asr %.4f", epoch, history[-1]["loss"], acc_now, asr_now)
            if acc_now >= base_acc - cfg.max_drop:
                key = (asr_now, epoch)
                if best is None or key < best[0]:
                    best = (key, copy.deepcopy(student.state_dict()))

    if best is None:
        logger.warning("no unlearning epoch kept accuracy within %.3f of %.4f; returning original model", cfg.max_drop, base_acc)
        return UnlearnResult(model, True, target, base_acc, base_asr, None, history)

    student.load_state_dict(best[1])
    student.eval()
    student.requires_grad_(False)
    selected = best[0][1]
    logger.info(
        "unlearn done: epoch %d accuracy %.4f (base %.4f) asr %.4f (base %.4f)",
        selected, history[selected]["accuracy"], base_acc, history[selected]["asr"], base_asr,
    )
    return UnlearnResult(student, False, target, base_acc, base_asr, selected, history)


def finetune(
    model: nn.Module,
    clean_subset: Dataset,
    target: int,
    asr_trigger: Union[Trigger, InjectionRecipe],
    cfg: Optional[UnlearnConfig] = None,
    eval_data: Optional[Dataset] = None,
) -> UnlearnResult:
    """Plain fine-tuning baseline: unlearning with an all-zero mask."""
    return unlearn(model, empty_patch(clean_subset.image_shape), clean_subset, cfg, target, eval_data, asr_trigger)

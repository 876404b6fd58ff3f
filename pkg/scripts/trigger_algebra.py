#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""trigger_algebra.py

Differentiable stamping/unstamping algebra shared by every stage.

Layout conventions:
- image batch  (N, C, H, W), single image (C, H, W), values in [0, 1]
- patch mask   (H, W), broadcast across channels
- pattern      (C, H, W)
- grid weights (C, 3H, 3W): the 3x3 grid of pixel (i, j) lives at
               [:, 3i:3i+3, 3j:3j+3]
- biases       (C, H, W)

On disk (container, png) everything is stored channel-last (H, W, C).
All functions are pure; nothing here mutates its inputs.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, ClassVar, Dict, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from skimage.metrics import structural_similarity

from forensics_warnings import NumericalFloorWarning
from scripts.bfl_container import read_array, read_json, write_array, write_json
from scripts.errors import ConfigurationError, DimensionError

logger = logging.getLogger(__name__)

EPS_MASK = 1e-3
EPS_STD = 1e-6
MSE_FLOOR = 1e-12
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class PatchTrigger:
    mask: torch.Tensor
    pattern: torch.Tensor

    form: ClassVar[str] = "patch"

    def __post_init__(self) -> None:
        if self.mask.dim() != 2 or self.pattern.dim() != 3:
            raise DimensionError(
                f"patch trigger expects mask (H, W) and pattern (C, H, W), "
                f"got {tuple(self.mask.shape)} and {tuple(self.pattern.shape)}"
            )
        if tuple(self.pattern.shape[-2:]) != tuple(self.mask.shape):
            raise DimensionError(
                f"mask {tuple(self.mask.shape)} does not match pattern {tuple(self.pattern.shape)}"
            )

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        c, h, w = self.pattern.shape
        return int(c), int(h), int(w)

    def detach(self) -> "PatchTrigger":
        return PatchTrigger(self.mask.detach().clone(), self.pattern.detach().clone())


@dataclass(frozen=True)
class TransformTrigger:
    weights: torch.Tensor
    biases: torch.Tensor

    form: ClassVar[str] = "transform"

    def __post_init__(self) -> None:
        if self.biases.dim() != 3 or self.weights.dim() != 3:
            raise DimensionError(
                f"transform trigger expects weights (C, 3H, 3W) and biases (C, H, W), "
                f"got {tuple(self.weights.shape)} and {tuple(self.biases.shape)}"
            )
        c, h, w = self.biases.shape
        if tuple(self.weights.shape) != (c, 3 * h, 3 * w):
            raise DimensionError(
                f"weights shape {tuple(self.weights.shape)} != (C, 3H, 3W) = {(c, 3 * h, 3 * w)}"
            )

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        c, h, w = self.biases.shape
        return int(c), int(h), int(w)

    def grid_field(self) -> torch.Tensor:
        """Weights rearranged to (C, 9, H, W): one coefficient plane per grid slot."""
        c, h, w = self.image_shape
        return self.weights.reshape(c, h, 3, w, 3).permute(0, 2, 4, 1, 3).reshape(c, 9, h, w)

    def detach(self) -> "TransformTrigger":
        return TransformTrigger(self.weights.detach().clone(), self.biases.detach().clone())


Trigger = Union[PatchTrigger, TransformTrigger]


@dataclass(frozen=True)
class ChannelStats:
    mean: torch.Tensor
    std: torch.Tensor

    def __post_init__(self) -> None:
        if self.mean.shape != self.std.shape or self.mean.dim() != 1:
            raise DimensionError("channel stats need matching 1-D mean and std")
        if bool((self.std <= 0).any()):
            raise ConfigurationError("channel std must be strictly positive")


def _check_image(x: torch.Tensor, name: str = "x") -> None:
    if x.dim() < 3:
        raise DimensionError(f"{name} must be (..., C, H, W), got {tuple(x.shape)}")
    c, h, w = x.shape[-3:]
    if c not in (1, 3) or h < 3 or w < 3:
        raise DimensionError(f"{name} shape {tuple(x.shape)} violates C in {{1,3}}, H >= 3, W >= 3")


def _check_compatible(x: torch.Tensor, shape: Tuple[int, int, int], what: str) -> None:
    _check_image(x)
    if tuple(x.shape[-3:]) != tuple(shape):
        raise DimensionError(f"{what} built for {tuple(shape)}, image is {tuple(x.shape[-3:])}")


def stamp_patch(x: torch.Tensor, trig: PatchTrigger, clamp: bool = True) -> torch.Tensor:
    _check_compatible(x, trig.image_shape, "patch trigger")
    m = trig.mask
    out = x * (1.0 - m) + trig.pattern * m
    return out.clamp(0.0, 1.0) if clamp else out


def unstamp_patch(xt: torch.Tensor, trig: PatchTrigger, eps_m: float = EPS_MASK) -> torch.Tensor:
    # raw output, deliberately unclamped: it feeds normalize() next
    _check_compatible(xt, trig.image_shape, "patch trigger")
    m = trig.mask
    return (xt - trig.pattern * m) / (1.0 - m).clamp_min(eps_m)


def stamp_transform(x: torch.Tensor, trig: TransformTrigger, clamp: bool = True) -> torch.Tensor:
    _check_compatible(x, trig.image_shape, "transform trigger")
    c, h, w = trig.image_shape
    lead = x.shape[:-3]
    xb = x.reshape(-1, c, h, w)
    # zero padding: neighbours outside the image contribute nothing
    cols = F.unfold(xb, kernel_size=3, padding=1).reshape(-1, c, 9, h, w)
    out = (cols * trig.grid_field()).sum(dim=2) + trig.biases
    out = out.reshape(*lead, c, h, w)
    return out.clamp(0.0, 1.0) if clamp else out


def stamp(x: torch.Tensor, trig: Trigger, clamp: bool = True) -> torch.Tensor:
    if isinstance(trig, PatchTrigger):
        return stamp_patch(x, trig, clamp=clamp)
    if isinstance(trig, TransformTrigger):
        return stamp_transform(x, trig, clamp=clamp)
    raise ConfigurationError(f"unsupported trigger type: {type(trig).__name__}")


def identity_transform(shape: Tuple[int, int, int], dtype: torch.dtype = torch.float32) -> TransformTrigger:
    c, h, w = shape
    weights = torch.zeros(c, 3 * h, 3 * w, dtype=dtype)
    weights[:, 1::3, 1::3] = 1.0
    return TransformTrigger(weights, torch.zeros(c, h, w, dtype=dtype))


def center_only_grid(center: torch.Tensor) -> torch.Tensor:
    """(C, H, W) centre coefficients -> (C, 3H, 3W) grids with zero neighbours; differentiable."""
    c, h, w = center.shape
    onehot = torch.zeros(1, 1, 3, 1, 3, dtype=center.dtype, device=center.device)
    onehot[0, 0, 1, 0, 1] = 1.0
    return (center.reshape(c, h, 1, w, 1) * onehot).reshape(c, 3 * h, 3 * w)


def empty_patch(shape: Tuple[int, int, int], dtype: torch.dtype = torch.float32) -> PatchTrigger:
    c, h, w = shape
    return PatchTrigger(torch.zeros(h, w, dtype=dtype), torch.zeros(c, h, w, dtype=dtype))


def channel_stats(images: torch.Tensor, eps_s: float = EPS_STD) -> ChannelStats:
    _check_image(images, "images")
    c = images.shape[-3]
    x = images.detach()
    flat = x.transpose(0, -3).reshape(c, -1) if x.dim() > 3 else x.reshape(c, -1)
    mean = flat.mean(dim=1)
    std = flat.std(dim=1, correction=0)
    if bool((std < eps_s).any()):
        warnings.warn(f"constant channel in reference set, std floored at {eps_s}", NumericalFloorWarning, stacklevel=2)
    return ChannelStats(mean=mean, std=std.clamp_min(eps_s))


def normalize(x: torch.Tensor, ref: ChannelStats, eps_s: float = EPS_STD) -> torch.Tensor:
    """Per image and channel: (x - mean(x)) / std(x) * ref.std + ref.mean. No clamp."""
    _check_image(x)
    c = x.shape[-3]
    if ref.mean.numel() != c:
        raise DimensionError(f"reference stats have {ref.mean.numel()} channels, image has {c}")
    mean = x.mean(dim=(-2, -1), keepdim=True)
    var = ((x - mean) ** 2).mean(dim=(-2, -1), keepdim=True)
    if bool((var < eps_s**2).any()):
        warnings.warn(f"constant channel, std floored at {eps_s}", NumericalFloorWarning, stacklevel=2)
    std = var.clamp_min(eps_s**2).sqrt()
    ref_mean = ref.mean.to(x).reshape(c, 1, 1)
    ref_std = ref.std.to(x).reshape(c, 1, 1)
    return (x - mean) / std * ref_std + ref_mean


def mask_centroid(mask: torch.Tensor, eps: float = 1e-8) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mask-weighted centroid (row, col) of pixel coordinates; differentiable."""
    h, w = mask.shape[-2:]
    rows = torch.arange(h, dtype=mask.dtype, device=mask.device).reshape(h, 1)
    cols = torch.arange(w, dtype=mask.dtype, device=mask.device).reshape(1, w)
    total = mask.sum(dim=(-2, -1)).clamp_min(eps)
    ci = (mask * rows).sum(dim=(-2, -1)) / total
    cj = (mask * cols).sum(dim=(-2, -1)) / total
    return ci, cj


def to_hwc(x: torch.Tensor) -> np.ndarray:
    a = x.detach().cpu().numpy()
    return np.moveaxis(a, -3, -1)


def from_hwc(a: Any, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    arr = np.moveaxis(np.asarray(a), -1, -3)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def image_metrics(a: torch.Tensor, b: torch.Tensor) -> Dict[str, float]:
    """L1, PSNR (peak 1.0) and windowed SSIM between two (C, H, W) images."""
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"metric inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    _check_image(a, "a")
    an = to_hwc(a).astype(np.float64)
    bn = to_hwc(b).astype(np.float64)
    l1 = float(np.mean(np.abs(an - bn)))
    mse = max(float(np.mean((an - bn) ** 2)), MSE_FLOOR)
    psnr = float(10.0 * np.log10(1.0 / mse))
    h, w = an.shape[0], an.shape[1]
    win = min(SSIM_WINDOW, h - (1 - h % 2), w - (1 - w % 2))
    ssim = float(
        structural_similarity(
            an, bn, win_size=win, data_range=1.0, channel_axis=-1, K1=SSIM_K1, K2=SSIM_K2
        )
    )
    return {"l1": l1, "psnr": psnr, "ssim": ssim}


def save_trigger(directory: Union[str, Path], trig: Trigger) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if isinstance(trig, PatchTrigger):
        write_array(d / "mask.bfl", trig.mask.detach().cpu().numpy())
        write_array(d / "pattern.bfl", to_hwc(trig.pattern))
    else:
        write_array(d / "weights.bfl", to_hwc(trig.weights))
        write_array(d / "biases.bfl", to_hwc(trig.biases))
    write_json(d / "trigger.json", {"form": trig.form, "image_shape": list(trig.image_shape)})
    return d


def load_trigger(directory: Union[str, Path]) -> Trigger:
    d = Path(directory)
    meta = read_json(d / "trigger.json")
    form = meta.get("form")
    if form == "patch":
        mask = torch.from_numpy(read_array(d / "mask.bfl"))
        return PatchTrigger(mask, from_hwc(read_array(d / "pattern.bfl")))
    if form == "transform":
        return TransformTrigger(from_hwc(read_array(d / "weights.bfl")), from_hwc(read_array(d / "biases.bfl")))
    raise ConfigurationError(f"{d / 'trigger.json'}: unknown trigger form {form!r}")

#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""reconstructor.py

Clean-manifold projection used by decomposition:
- a small convolutional denoiser (x + noise -> x), output squashed to [0, 1]
- a frozen clean classifier whose penultimate layer gives a perceptual distance

The decomposer only relies on `reconstruct(r, x, latent_offset)` and
`perceptual_distance(f, a, b)`; any other projector honouring those two calls
can be swapped in.

Bundle layout:
  <dir>/recon/meta.json, params.bfl      denoiser
  <dir>/features/meta.json, params.bfl   frozen feature classifier
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from scripts.bfl_container import read_array, read_json, write_array, write_json
from scripts.errors import ArgumentError, DimensionError, FormatError, TrainingError
from scripts.zoo_factory import Dataset, TrainConfig, load_classifier, save_classifier, train_clean

logger = logging.getLogger(__name__)


class Reconstructor(nn.Module):
    arch_id = "conv_denoiser_v1"

    def __init__(self, in_channels: int = 3, width: int = 32, noise_level: float = 0.2):
        super().__init__()
        self.config = {"in_channels": in_channels, "width": width, "noise_level": noise_level}
        self.metrics: Dict[str, float] = {}
        self.encoder = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(2 * width, 2 * width, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(2 * width, width, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, in_channels, 3, padding=1),
        )

    @property
    def in_channels(self) -> int:
        return int(self.config["in_channels"])

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def decode(self, z: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        y = self.decoder(z)
        if tuple(y.shape[-2:]) != tuple(size):
            y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
        return torch.sigmoid(y)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x), (x.shape[-2], x.shape[-1]))


class FeatureExtractor:
    """Frozen private copy of a clean classifier; maps images to penultimate features."""

    def __init__(self, classifier: nn.Module):
        self.classifier = copy.deepcopy(classifier).eval()
        for p in self.classifier.parameters():
            p.requires_grad_(False)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        single = x.dim() == 3
        feats = self.classifier.features(x.unsqueeze(0) if single else x)
        return feats[0] if single else feats

    def to(self, dtype: torch.dtype) -> "FeatureExtractor":
        clone = FeatureExtractor(self.classifier)
        clone.classifier.to(dtype=dtype)
        return clone


@dataclass(frozen=True)
class ReconConfig:
    epochs: int = 10
    noise_level: float = 0.2
    batch_size: int = 64
    learning_rate: float = 1e-3
    width: int = 32
    holdout_fraction: float = 0.1
    feature_epochs: int = 6
    progress: bool = False


def _noisy(x: torch.Tensor, noise_level: float, gen: torch.Generator) -> torch.Tensor:
    if noise_level <= 0.0:
        return x
    return (x + noise_level * torch.randn(x.shape, generator=gen)).clamp(0.0, 1.0)


def reconstruct(r: Reconstructor, x: torch.Tensor, latent_offset: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Project x onto the clean manifold; gradients flow to x and latent_offset."""
    if x.dim() not in (3, 4) or x.shape[-3] != r.in_channels:
        raise DimensionError(f"reconstructor expects {r.in_channels} channels, got {tuple(x.shape)}")
    single = x.dim() == 3
    xb = x.unsqueeze(0) if single else x
    z = r.encode(xb)
    if latent_offset is not None:
        if latent_offset.shape[-3:] != z.shape[-3:]:
            raise DimensionError(f"latent offset {tuple(latent_offset.shape)} does not match code {tuple(z.shape)}")
        z = z + latent_offset
    out = r.decode(z, (xb.shape[-2], xb.shape[-1]))
    return out[0] if single else out


def latent_shape(r: Reconstructor, image_shape: Tuple[int, int, int]) -> Tuple[int, ...]:
    with torch.no_grad():
        return tuple(r.encode(torch.zeros(1, *image_shape)).shape[1:])


def perceptual_distance(f: FeatureExtractor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """L2 distance between penultimate features; one value per image."""
    if a.shape != b.shape:
        raise DimensionError(f"perceptual distance inputs differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    sq = ((f(a) - f(b)) ** 2).sum(dim=-1)
    # zero distance keeps a zero gradient instead of sqrt'(0)
    safe = sq.clamp_min(torch.finfo(sq.dtype).tiny)
    return torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq))


def _mse(r: Reconstructor, x: torch.Tensor, noise_level: float, gen: torch.Generator, batch_size: int = 256) -> float:
    total = 0.0
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            xb = x[i : i + batch_size]
            total += float(((r(_noisy(xb, noise_level, gen)) - xb) ** 2).sum())
    return total / float(x.numel())


def train_reconstructor(clean: Dataset, epochs: int, noise_level: float, seed: int, cfg: Optional[ReconConfig] = None) -> Reconstructor:
    """Denoising objective on clean data; held-out MSE lands in `r.metrics`."""
    cfg = cfg or ReconConfig(epochs=epochs, noise_level=noise_level)
    if len(clean) < 2:
        raise ArgumentError("reconstructor training needs at least two clean images")
    perm = np.random.default_rng(seed).permutation(len(clean))
    n_hold = max(1, int(round(cfg.holdout_fraction * len(clean))))
    hold = clean.images[torch.as_tensor(perm[:n_hold])]
    train = clean.images[torch.as_tensor(perm[n_hold:])] if len(clean) > n_hold else hold

    c = clean.image_shape[0]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        r = Reconstructor(in_channels=c, width=cfg.width, noise_level=noise_level)
    gen = torch.Generator().manual_seed(seed)
    loader = DataLoader(TensorDataset(train), batch_size=cfg.batch_size, shuffle=True, generator=gen)
    opt = torch.optim.Adam(r.parameters(), lr=cfg.learning_rate)

    r.train()
    for epoch in tqdm(range(epochs), desc="recon", disable=not cfg.progress):
        running = 0.0
        for step, (xb,) in enumerate(loader):
            loss = F.mse_loss(r(_noisy(xb, noise_level, gen)), xb)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"reconstructor diverged at epoch {epoch} step {step}",
                    {"epoch": epoch, "step": step, "loss": float(loss), "noise_level": noise_level},
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(loss)
        logger.debug("recon epoch %d loss %.5f", epoch, running / max(len(loader), 1))
    r.eval().requires_grad_(False)

    eval_gen = torch.Generator().manual_seed(seed + 1)
    r.metrics = {
        "holdout_mse": _mse(r, hold, 0.0, eval_gen),
        "holdout_noisy_mse": _mse(r, hold, noise_level, eval_gen),
        "noise_level": float(noise_level),
    }
    logger.info("reconstructor trained: %s", {k: round(v, 6) for k, v in r.metrics.items()})
    return r


def train_feature_extractor(clean: Dataset, seed: int, cfg: Optional[ReconConfig] = None) -> FeatureExtractor:
    cfg = cfg or ReconConfig()
    entry = train_clean(clean, cfg.feature_epochs, seed, TrainConfig(epochs=cfg.feature_epochs, progress=cfg.progress))
    return FeatureExtractor(entry.model)


def save_reconstructor(r: Reconstructor, directory: Union[str, Path], features: Optional[FeatureExtractor] = None) -> Path:
    d = Path(directory)
    state = r.state_dict()
    keys = sorted(state)
    write_array(d / "recon" / "params.bfl", np.concatenate([state[k].detach().cpu().numpy().ravel() for k in keys]))
    write_json(
        d / "recon" / "meta.json",
        {
            "arch": r.arch_id,
            "arch_config": r.config,
            "metrics": r.metrics,
            "param_layout": [[k, list(state[k].shape)] for k in keys],
        },
    )
    if features is not None:
        save_classifier(features.classifier, d / "features", {"role": "feature_extractor"})
    return d


def load_reconstructor(directory: Union[str, Path]) -> Tuple[Reconstructor, Optional[FeatureExtractor]]:
    d = Path(directory)
    meta = read_json(d / "recon" / "meta.json")
    if meta.get("arch") != Reconstructor.arch_id:
        raise FormatError(d / "recon" / "meta.json", f"unknown reconstructor arch {meta.get('arch')!r}")
    flat = read_array(d / "recon" / "params.bfl")
    layout = meta.get("param_layout", [])
    expected = sum(int(np.prod(s)) for _, s in layout)
    if flat.ndim != 1 or flat.size != expected:
        raise FormatError(d / "recon" / "params.bfl", f"{flat.size} parameters, layout needs {expected}")
    r = Reconstructor(**meta["arch_config"])
    state, offset = {}, 0
    for key, shape in layout:
        n = int(np.prod(shape))
        state[key] = torch.from_numpy(flat[offset : offset + n].reshape(shape).copy())
        offset += n
    r.load_state_dict(state)
    r.metrics = dict(meta.get("metrics", {}))
    r.eval().requires_grad_(False)
    features = FeatureExtractor(load_classifier(d / "features")[0]) if (d / "features" / "meta.json").exists() else None
    return r, features

#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""zoo_factory.py

Desk-scale model zoo: synthetic data, poisoning recipes, training and
persistence of clean/trojaned classifiers.

Recipe families and their mathematical form:
- patch, blend, sinusoid  -> patching form (mask + pattern)
- filter_linear           -> transforming form, exact grid equivalent
- warp                    -> transforming form, no exact grid equivalent

Zoo layout (one directory per entry, enumerated in sorted order):
  <zoo>/000_trojaned_patch/meta.json
  <zoo>/000_trojaned_patch/params.bfl
"""

from __future__ import annotations

import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image, ImageDraw
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from scripts.bfl_container import read_array, read_json, write_array, write_json
from scripts.errors import ArgumentError, ConfigurationError, DimensionError, FormatError, TrainingError
from scripts.trigger_algebra import (
    PatchTrigger,
    Trigger,
    TransformTrigger,
    from_hwc,
    identity_transform,
    load_trigger,
    save_trigger,
    stamp,
    to_hwc,
)

logger = logging.getLogger(__name__)

FAMILIES = ("patch", "blend", "sinusoid", "filter_linear", "warp")
PATCHING_FAMILIES = ("patch", "blend", "sinusoid")
TRANSFORMING_FAMILIES = ("filter_linear", "warp")
MAX_WARP_DISPLACEMENT = 1.5
PGD_EPS = 16.0 / 256.0

# serialises global-RNG seeding + module construction across worker threads
_INIT_LOCK = threading.Lock()


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    images: torch.Tensor
    labels: torch.Tensor
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self) -> None:
        if self.images.dim() != 4:
            raise DimensionError(f"dataset images must be (N, C, H, W), got {tuple(self.images.shape)}")
        if self.labels.shape != (self.images.shape[0],):
            raise DimensionError("labels must be one id per image")
        if self.labels.numel() and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes):
            raise ConfigurationError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        _, c, h, w = self.images.shape
        return int(c), int(h), int(w)

    def subset(self, index: Any, split: Optional[str] = None) -> "Dataset":
        idx = torch.as_tensor(index, dtype=torch.long)
        return Dataset(self.images[idx], self.labels[idx], split or self.split, self.num_classes)

    def excluding(self, label: int) -> "Dataset":
        return self.subset(torch.nonzero(self.labels != label).flatten())


_SHAPES = ("disk", "square", "triangle_up", "triangle_down", "plus", "cross", "ring", "hbar", "vbar", "diamond")


def _draw_shape(draw: ImageDraw.ImageDraw, kind: str, cx: float, cy: float, r: float, color: Tuple[int, ...]) -> None:
    box = [cx - r, cy - r, cx + r, cy + r]
    t = max(1, int(round(r / 3)))
    if kind == "disk":
        draw.ellipse(box, fill=color)
    elif kind == "square":
        draw.rectangle(box, fill=color)
    elif kind == "triangle_up":
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)
    elif kind == "triangle_down":
        draw.polygon([(cx, cy + r), (cx - r, cy - r), (cx + r, cy - r)], fill=color)
    elif kind == "plus":
        draw.rectangle([cx - t, cy - r, cx + t, cy + r], fill=color)
        draw.rectangle([cx - r, cy - t, cx + r, cy + t], fill=color)
    elif kind == "cross":
        draw.line([(cx - r, cy - r), (cx + r, cy + r)], fill=color, width=2 * t)
        draw.line([(cx - r, cy + r), (cx + r, cy - r)], fill=color, width=2 * t)
    elif kind == "ring":
        draw.ellipse(box, outline=color, width=t + 1)
    elif kind == "hbar":
        draw.rectangle([cx - r, cy - t, cx + r, cy + t], fill=color)
    elif kind == "vbar":
        draw.rectangle([cx - t, cy - r, cx + t, cy + r], fill=color)
    elif kind == "diamond":
        draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=color)
    else:
        raise ConfigurationError(f"unknown shape {kind!r}")


def make_shapes_dataset(
    n: int, size: int = 32, num_classes: int = 10, seed: int = 0, split: str = "train", channels: int = 3
) -> Dataset:
    """Shapes-on-background images; the class is the shape kind."""
    if not 2 <= num_classes <= len(_SHAPES):
        raise ConfigurationError(f"num_classes must be in [2, {len(_SHAPES)}]")
    if n <= 0:
        raise ArgumentError("dataset size must be positive")
    rng = np.random.default_rng(seed)
    mode = "RGB" if channels == 3 else "L"
    images = np.empty((n, size, size, channels), dtype=np.float32)
    labels = rng.integers(0, num_classes, size=n)
    for k in range(n):
        bg = rng.uniform(0.05, 0.45, size=channels)
        fg = rng.uniform(0.55, 0.95, size=channels)
        img = Image.new(mode, (size, size), tuple(int(v * 255) for v in bg) if channels == 3 else int(bg[0] * 255))
        draw = ImageDraw.Draw(img)
        r = rng.uniform(size * 0.18, size * 0.3)
        cx, cy = rng.uniform(r + 1, size - r - 1, size=2)
        color = tuple(int(v * 255) for v in fg) if channels == 3 else (int(fg[0] * 255),)
        _draw_shape(draw, _SHAPES[int(labels[k])], float(cx), float(cy), float(r), color if channels == 3 else color[0])
        a = np.asarray(img, dtype=np.float32) / 255.0
        if a.ndim == 2:
            a = a[:, :, None]
        a = a + rng.normal(0.0, 0.03, size=a.shape).astype(np.float32)
        images[k] = np.clip(a, 0.0, 1.0)
    return Dataset(from_hwc(images), torch.as_tensor(labels, dtype=torch.long), split, num_classes)


def split_dataset(ds: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> List[Dataset]:
    if abs(sum(fractions) - 1.0) > 1e-6 or any(f <= 0 for f in fractions):
        raise ConfigurationError(f"split fractions must be positive and sum to 1, got {list(fractions)}")
    names = ["train", "val", "test"] if len(fractions) == 3 else [f"part{i}" for i in range(len(fractions))]
    perm = np.random.default_rng(seed).permutation(len(ds))
    bounds = np.floor(np.cumsum([0.0, *fractions]) * len(ds)).astype(int)
    bounds[-1] = len(ds)
    return [ds.subset(perm[bounds[i] : bounds[i + 1]], names[i]) for i in range(len(fractions))]


def save_dataset(ds: Dataset, directory: Union[str, Path]) -> Path:
    d = Path(directory)
    write_array(d / "images.bfl", to_hwc(ds.images))
    write_array(d / "labels.bfl", ds.labels.numpy().astype(np.int32))
    write_json(d / "meta.json", {"split": ds.split, "num_classes": ds.num_classes, "count": len(ds)})
    return d


def load_dataset(directory: Union[str, Path]) -> Dataset:
    d = Path(directory)
    meta = read_json(d / "meta.json")
    images = read_array(d / "images.bfl")
    labels = read_array(d / "labels.bfl")
    if images.ndim != 4 or labels.shape != (images.shape[0],):
        raise FormatError(d, "images/labels shapes disagree")
    return Dataset(from_hwc(images), torch.from_numpy(labels.astype(np.int64)), meta.get("split", "train"), int(meta.get("num_classes", 10)))


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------


class SmallCNN(nn.Module):
    """4 conv blocks + 2 dense layers; `features` is the penultimate layer."""

    arch_id = "small_cnn_v1"

    def __init__(self, in_channels: int = 3, num_classes: int = 10, image_size: int = 32, width: int = 32, hidden: int = 128):
        super().__init__()
        if image_size % 4:
            raise ConfigurationError("image_size must be divisible by 4")
        self.config = {
            "in_channels": in_channels,
            "num_classes": num_classes,
            "image_size": image_size,
            "width": width,
            "hidden": hidden,
        }
        self.conv1 = nn.Conv2d(in_channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.conv3 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.conv4 = nn.Conv2d(2 * width, 2 * width, 3, padding=1)
        self.fc1 = nn.Linear(2 * width * (image_size // 4) ** 2, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(x))
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = F.relu(self.conv3(x))
        x = F.max_pool2d(F.relu(self.conv4(x)), 2)
        return F.relu(self.fc1(x.flatten(1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.features(x))


ARCHITECTURES = {SmallCNN.arch_id: SmallCNN}


def build_classifier(arch: str, seed: int, **config: Any) -> nn.Module:
    if arch not in ARCHITECTURES:
        raise ConfigurationError(f"unknown architecture {arch!r}")
    with _INIT_LOCK, torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ARCHITECTURES[arch](**config)
    return model.eval()


def _flatten_params(model: nn.Module) -> Tuple[np.ndarray, List[List[Any]]]:
    state = model.state_dict()
    keys = sorted(state)
    flat = np.concatenate([state[k].detach().cpu().numpy().astype(np.float32).ravel() for k in keys])
    return flat, [[k, list(state[k].shape)] for k in keys]


def save_classifier(model: nn.Module, directory: Union[str, Path], extra: Optional[Mapping[str, Any]] = None) -> Path:
    d = Path(directory)
    flat, layout = _flatten_params(model)
    write_array(d / "params.bfl", flat)
    meta = {"arch": getattr(model, "arch_id", type(model).__name__), "arch_config": dict(getattr(model, "config", {})), "param_layout": layout}
    meta.update(dict(extra or {}))
    write_json(d / "meta.json", meta)
    return d


def load_classifier(directory: Union[str, Path]) -> Tuple[nn.Module, Dict[str, Any]]:
    d = Path(directory)
    meta = read_json(d / "meta.json")
    try:
        arch, arch_config, layout = meta["arch"], meta["arch_config"], meta["param_layout"]
    except KeyError as e:
        raise FormatError(d / "meta.json", f"missing key {e.args[0]!r}") from e
    flat = read_array(d / "params.bfl")
    expected = sum(int(np.prod(shape)) for _, shape in layout)
    if flat.ndim != 1 or flat.size != expected:
        raise FormatError(d / "params.bfl", f"{flat.size} parameters, layout needs {expected}")
    model = build_classifier(arch, 0, **arch_config)
    state: Dict[str, torch.Tensor] = {}
    offset = 0
    for key, shape in layout:
        n = int(np.prod(shape))
        state[key] = torch.from_numpy(flat[offset : offset + n].reshape(shape).copy())
        offset += n
    model.load_state_dict(state)
    return model.eval(), meta


def predict(model: nn.Module, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            out.append(model(images[i : i + batch_size]).argmax(dim=1))
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)


def accuracy(model: nn.Module, data: Dataset) -> float:
    if len(data) == 0:
        raise ArgumentError("accuracy on empty data")
    return float((predict(model, data.images) == data.labels).float().mean())


# ---------------------------------------------------------------------------
# recipes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InjectionRecipe:
    family: str
    target: int
    params: Mapping[str, Any] = field(default_factory=dict)
    victim: Optional[int] = None

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unsupported recipe family {self.family!r} (expected one of {list(FAMILIES)})")

    @property
    def form(self) -> str:
        return "patch" if self.family in PATCHING_FAMILIES else "transform"

    def to_dict(self) -> Dict[str, Any]:
        return {"family": self.family, "target": self.target, "victim": self.victim, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "InjectionRecipe":
        return cls(str(d["family"]), int(d["target"]), dict(d.get("params", {})), d.get("victim"))


def _patch_corner(position: Any, size: int, h: int, w: int) -> Tuple[int, int]:
    if isinstance(position, (list, tuple)):
        r, c = int(position[0]), int(position[1])
    elif position == "bottom_right":
        r, c = h - size - 1, w - size - 1
    elif position == "top_left":
        r, c = 1, 1
    elif position == "center":
        r, c = (h - size) // 2, (w - size) // 2
    else:
        raise ConfigurationError(f"unknown patch position {position!r}")
    if r < 0 or c < 0 or r + size > h or c + size > w:
        raise ConfigurationError(f"patch of size {size} at {(r, c)} leaves the {h}x{w} image")
    return r, c


def recipe_trigger(recipe: InjectionRecipe, shape: Tuple[int, int, int]) -> Optional[Trigger]:
    """Exact trigger equivalent of a recipe, or None for warp."""
    c, h, w = shape
    p = recipe.params
    if recipe.family == "patch":
        size = int(p.get("size", 4))
        r0, c0 = _patch_corner(p.get("position", "bottom_right"), size, h, w)
        mask = torch.zeros(h, w)
        mask[r0 : r0 + size, c0 : c0 + size] = 1.0
        style = p.get("pattern", "solid")
        if style == "solid":
            color = torch.as_tensor(p.get("color", [1.0] * c), dtype=torch.float32).reshape(c, 1, 1)
            pattern = color.expand(c, h, w).clone()
        elif style == "checker":
            ii, jj = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
            pattern = ((ii + jj) % 2).float().expand(c, h, w).clone()
        elif style == "random":
            rng = np.random.default_rng(int(p.get("seed", 0)))
            pattern = torch.from_numpy(rng.integers(0, 2, size=(c, h, w)).astype(np.float32))
        else:
            raise ConfigurationError(f"unknown patch pattern {style!r}")
        return PatchTrigger(mask, pattern * mask)
    if recipe.family == "blend":
        ratio = float(p.get("ratio", 0.15))
        if not 0.0 <= ratio <= 1.0:
            raise ConfigurationError("blend ratio must be in [0, 1]")
        rng = np.random.default_rng(int(p.get("seed", 0)))
        pattern = torch.from_numpy(rng.uniform(0.0, 1.0, size=(c, h, w)).astype(np.float32))
        return PatchTrigger(torch.full((h, w), ratio), pattern)
    if recipe.family == "sinusoid":
        amplitude = float(p.get("amplitude", 0.2))
        freq = float(p.get("frequency", 6.0))
        if not 0.0 <= amplitude <= 1.0:
            raise ConfigurationError("sinusoid amplitude must be in [0, 1]")
        cols = torch.arange(w, dtype=torch.float32)
        wave = 0.5 + 0.5 * torch.sin(2.0 * math.pi * freq * cols / w)
        return PatchTrigger(torch.full((h, w), amplitude), wave.reshape(1, 1, w).expand(c, h, w).clone())
    if recipe.family == "filter_linear":
        scale = torch.as_tensor(p.get("scale", [1.2, 1.0, 0.8][:c]), dtype=torch.float32)
        offset = torch.as_tensor(p.get("offset", [0.0] * c), dtype=torch.float32)
        if scale.numel() != c or offset.numel() != c:
            raise ConfigurationError(f"filter_linear needs {c} scale and offset coefficients")
        ident = identity_transform((c, h, w))
        weights = ident.weights * scale.reshape(c, 1, 1)
        biases = offset.reshape(c, 1, 1).expand(c, h, w).clone()
        return TransformTrigger(weights, biases)
    return None


def warp_grid(recipe: InjectionRecipe, h: int, w: int) -> torch.Tensor:
    """Sampling grid (1, H, W, 2) of a smooth random displacement field."""
    p = recipe.params
    strength = float(p.get("strength", 1.0))
    k = int(p.get("grid", 4))
    if not 0.0 < strength <= MAX_WARP_DISPLACEMENT:
        raise ConfigurationError(f"warp strength must be in (0, {MAX_WARP_DISPLACEMENT}] pixels")
    if k < 2:
        raise ConfigurationError("warp grid must be at least 2")
    rng = np.random.default_rng(int(p.get("seed", 0)))
    coarse = torch.from_numpy(rng.standard_normal((1, 2, k, k)).astype(np.float64))
    field_px = F.interpolate(coarse, size=(h, w), mode="bicubic", align_corners=True)[0]
    field_px = field_px * (strength / field_px.norm(dim=0).mean().clamp_min(1e-12))
    ys, xs = torch.meshgrid(torch.linspace(-1.0, 1.0, h, dtype=torch.float64), torch.linspace(-1.0, 1.0, w, dtype=torch.float64), indexing="ij")
    gx = xs + field_px[0] * 2.0 / (w - 1)
    gy = ys + field_px[1] * 2.0 / (h - 1)
    return torch.stack([gx, gy], dim=-1).unsqueeze(0).float()


def apply_recipe(x: torch.Tensor, recipe: InjectionRecipe) -> torch.Tensor:
    if x.dim() not in (3, 4):
        raise DimensionError(f"expected (C, H, W) or (N, C, H, W), got {tuple(x.shape)}")
    shape = tuple(int(s) for s in x.shape[-3:])
    trig = recipe_trigger(recipe, shape)  # type: ignore[arg-type]
    if trig is not None:
        return stamp(x, trig)
    xb = x.unsqueeze(0) if x.dim() == 3 else x
    grid = warp_grid(recipe, shape[1], shape[2]).to(xb).expand(xb.shape[0], -1, -1, -1)
    out = F.grid_sample(xb, grid, mode="bilinear", padding_mode="border", align_corners=True).clamp(0.0, 1.0)
    return out[0] if x.dim() == 3 else out


def asr(
    model: nn.Module,
    data: Dataset,
    recipe_or_trigger: Union[InjectionRecipe, PatchTrigger, TransformTrigger],
    target: int,
    victim: Optional[int] = None,
) -> float:
    keep = data.labels != target
    if victim is not None:
        keep &= data.labels == victim
    images = data.images[keep]
    if images.shape[0] == 0:
        raise ArgumentError("no non-target samples to measure attack success on")
    if isinstance(recipe_or_trigger, InjectionRecipe):
        stamped = apply_recipe(images, recipe_or_trigger)
    else:
        with torch.no_grad():
            stamped = stamp(images, recipe_or_trigger)
    return float((predict(model, stamped) == target).float().mean())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class ZooEntry:
    model: nn.Module
    label: str
    recipe: Optional[InjectionRecipe] = None
    seed: int = 0
    metrics: Dict[str, float] = field(default_factory=dict)
    entry_id: str = ""

    def __post_init__(self) -> None:
        if self.label not in ("clean", "trojaned"):
            raise ConfigurationError(f"zoo entry label must be clean|trojaned, got {self.label!r}")
        if (self.label == "trojaned") != (self.recipe is not None):
            raise ConfigurationError("trojaned entries carry a recipe; clean entries carry none")

    @property
    def arch(self) -> str:
        return getattr(self.model, "arch_id", type(self.model).__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 1e-3
    arch: str = SmallCNN.arch_id
    width: int = 32
    progress: bool = False


def poison_indices(labels: torch.Tensor, recipe: InjectionRecipe, rate: float, seed: int) -> np.ndarray:
    n = int(labels.shape[0])
    count = int(math.ceil(rate * n))
    candidates = labels != recipe.target
    if recipe.victim is not None:
        candidates &= labels == recipe.victim
    pool = torch.nonzero(candidates).flatten().numpy()
    if count > pool.size:
        logger.warning("poison count %d exceeds %d eligible samples; capped", count, pool.size)
        count = pool.size
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(pool, size=count, replace=False)) if count else np.empty(0, dtype=np.int64)


def poison_and_train(
    clean: Dataset,
    recipe: Optional[InjectionRecipe],
    rate: float,
    epochs: int,
    seed: int,
    cfg: Optional[TrainConfig] = None,
    val: Optional[Dataset] = None,
) -> ZooEntry:
    """Dirty-label poisoning by replacement, then supervised training."""
    cfg = cfg or TrainConfig(epochs=epochs)
    if not 0.0 <= rate < 1.0:
        raise ArgumentError(f"poison rate must be in [0, 1), got {rate}")
    if len(clean) == 0:
        raise ArgumentError("cannot train on empty data")
    images, labels = clean.images.clone(), clean.labels.clone()
    poisoned = np.empty(0, dtype=np.int64)
    if recipe is not None and rate > 0.0:
        poisoned = poison_indices(labels, recipe, rate, seed)
        if poisoned.size:
            idx = torch.from_numpy(poisoned)
            images[idx] = apply_recipe(images[idx], recipe)
            labels[idx] = recipe.target

    c, h, _ = clean.image_shape
    model = build_classifier(cfg.arch, seed, in_channels=c, num_classes=clean.num_classes, image_size=h, width=cfg.width)
    gen = torch.Generator().manual_seed(seed)
    loader = DataLoader(TensorDataset(images, labels), batch_size=cfg.batch_size, shuffle=True, generator=gen)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

    model.train()
    for epoch in tqdm(range(epochs), desc="train", disable=not cfg.progress):
        total, batches = 0.0, 0
        for step, (xb, yb) in enumerate(loader):
            loss = F.cross_entropy(model(xb), yb)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"training diverged at epoch {epoch} step {step}",
                    {"epoch": epoch, "step": step, "loss": float(loss), "poisoned": int(poisoned.size), "seed": seed},
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss)
            batches += 1
        logger.debug("epoch %d loss %.4f", epoch, total / max(batches, 1))
    model.eval()

    metrics: Dict[str, float] = {"train_accuracy": accuracy(model, clean), "poisoned": float(poisoned.size)}
    if val is not None and len(val):
        metrics["val_accuracy"] = accuracy(model, val)
        if recipe is not None:
            metrics["val_asr"] = asr(model, val, recipe, recipe.target, recipe.victim)
    label = "trojaned" if recipe is not None and poisoned.size else "clean"
    logger.info("trained %s entry (seed=%d): %s", label, seed, {k: round(v, 4) for k, v in metrics.items()})
    return ZooEntry(model=model, label=label, recipe=recipe if label == "trojaned" else None, seed=seed, metrics=metrics)


def train_clean(clean: Dataset, epochs: int, seed: int, cfg: Optional[TrainConfig] = None, val: Optional[Dataset] = None) -> ZooEntry:
    return poison_and_train(clean, None, 0.0, epochs, seed, cfg, val)


# ---------------------------------------------------------------------------
# zoo persistence
# ---------------------------------------------------------------------------


def entry_dirname(index: int, entry: ZooEntry) -> str:
    tag = entry.recipe.family if entry.recipe is not None else "clean"
    return f"{index:03d}_{entry.label}_{tag}"


def save_entry(entry: ZooEntry, directory: Union[str, Path]) -> Path:
    extra = {
        "label": entry.label,
        "recipe": entry.recipe.to_dict() if entry.recipe is not None else None,
        "seed": entry.seed,
        "metrics": entry.metrics,
    }
    return save_classifier(entry.model, directory, extra)


def load_entry(directory: Union[str, Path]) -> ZooEntry:
    d = Path(directory)
    model, meta = load_classifier(d)
    try:
        recipe = InjectionRecipe.from_dict(meta["recipe"]) if meta.get("recipe") else None
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(d / "meta.json", f"malformed recipe {meta['recipe']!r}: {e.__class__.__name__}: {e}") from e
    return ZooEntry(
        model=model,
        label=str(meta.get("label", "clean")),
        recipe=recipe,
        seed=int(meta.get("seed", 0)),
        metrics=dict(meta.get("metrics", {})),
        entry_id=d.name,
    )


def persist_zoo(entries: Sequence[ZooEntry], path: Union[str, Path]) -> List[Path]:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    out = []
    for i, entry in enumerate(entries):
        name = entry.entry_id or entry_dirname(i, entry)
        entry.entry_id = name
        out.append(save_entry(entry, root / name))
    return out


def list_zoo(path: Union[str, Path]) -> List[Path]:
    root = Path(path)
    if not root.is_dir():
        raise ConfigurationError(f"zoo directory not found: {root}")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.json").exists())


def load_zoo(path: Union[str, Path]) -> List[ZooEntry]:
    return [load_entry(p) for p in list_zoo(path)]


# ---------------------------------------------------------------------------
# attack instances
# ---------------------------------------------------------------------------


@dataclass
class AttackInstance:
    model: nn.Module
    trojaned: torch.Tensor
    validation: torch.Tensor
    validation_labels: torch.Tensor
    target: int
    victim_labels: List[int] = field(default_factory=list)
    clean_truth: Optional[torch.Tensor] = None
    source_labels: Optional[torch.Tensor] = None
    trigger_truth: Optional[Trigger] = None
    kinds: List[str] = field(default_factory=list)
    flagged: List[int] = field(default_factory=list)
    instance_id: str = ""
    source_entry: str = ""
    family: str = ""

    def __post_init__(self) -> None:
        if self.trojaned.dim() != 4 or self.trojaned.shape[0] == 0:
            raise ArgumentError("an attack instance needs at least one trojaned sample")
        if self.validation.dim() != 4 or self.validation.shape[0] == 0:
            raise ArgumentError("an attack instance needs validation samples")
        if self.validation.shape[1:] != self.trojaned.shape[1:]:
            raise DimensionError("trojaned and validation samples differ in shape")
        if not self.kinds:
            self.kinds = ["trojaned"] * int(self.trojaned.shape[0])
        self.flagged = [int(i) for i in torch.nonzero(predict(self.model, self.trojaned) != self.target).flatten()]
        if self.flagged:
            logger.warning("instance %s: samples %s are not classified as target %d", self.instance_id or "?", self.flagged, self.target)


def pgd_targeted(
    model: nn.Module, x: torch.Tensor, target: int, eps: float = PGD_EPS, steps: int = 40, step_size: Optional[float] = None
) -> torch.Tensor:
    """Targeted L-inf PGD without random start."""
    step = step_size if step_size is not None else eps / 8.0
    model.eval()
    y = torch.full((x.shape[0],), target, dtype=torch.long)
    adv = x.detach().clone()
    for _ in range(steps):
        adv.requires_grad_(True)
        loss = F.cross_entropy(model(adv), y)
        (grad,) = torch.autograd.grad(loss, adv)
        with torch.no_grad():
            adv = adv - step * grad.sign()
            adv = torch.min(torch.max(adv, x - eps), x + eps).clamp(0.0, 1.0)
    return adv.detach()


def build_instance(
    entry: ZooEntry,
    data: Dataset,
    n_trojaned: int = 10,
    n_validation: int = 100,
    seed: int = 0,
    n_natural: int = 0,
    n_adversarial: int = 0,
    target: Optional[int] = None,
) -> AttackInstance:
    """Assemble a forensics input from a zoo entry and held-out data.

    Trojaned samples are ground-truth stamped samples the model sends to the
    target. `n_natural` of them are replaced by natural misclassifications and
    `n_adversarial` by targeted PGD examples (the only option for clean
    entries). Validation samples are disjoint from every sample used above.
    """
    recipe = entry.recipe
    if target is None:
        if recipe is None:
            raise ArgumentError("clean entries need an explicit target label")
        target = recipe.target
    n_stamped = n_trojaned - n_natural - n_adversarial
    if n_stamped < 0 or n_trojaned <= 0:
        raise ArgumentError("n_natural + n_adversarial must not exceed n_trojaned")
    if n_stamped and recipe is None:
        raise ArgumentError("clean entries only support natural or adversarial samples")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    labels = data.labels[order]
    preds = predict(entry.model, data.images[order])
    used: List[int] = []
    samples: List[torch.Tensor] = []
    truth: List[torch.Tensor] = []
    truth_labels: List[int] = []
    kinds: List[str] = []

    victim = recipe.victim if recipe is not None else None
    eligible = [k for k in range(len(order)) if int(labels[k]) != target and (victim is None or int(labels[k]) == victim)]

    if n_stamped:
        pool = torch.as_tensor([int(order[k]) for k in eligible], dtype=torch.long)
        stamped = apply_recipe(data.images[pool], recipe) if len(eligible) else data.images[:0]  # type: ignore[arg-type]
        hits = predict(entry.model, stamped) == target
        for pos, k in enumerate(eligible):
            if len(samples) == n_stamped:
                break
            if bool(hits[pos]):
                samples.append(stamped[pos])
                truth.append(data.images[int(order[k])])
                truth_labels.append(int(labels[k]))
                kinds.append("trojaned")
                used.append(k)
        if len(samples) < n_stamped:
            raise ArgumentError(f"only {len(samples)} stamped samples reach target {target}; need {n_stamped}")

    if n_natural:
        natural = [k for k in range(len(order)) if k not in used and int(labels[k]) != target and int(preds[k]) == target]
        if len(natural) < n_natural:
            # fall back to any misclassification
            natural += [k for k in range(len(order)) if k not in used and k not in natural and int(preds[k]) != int(labels[k])]
        if len(natural) < n_natural:
            raise ArgumentError(f"only {len(natural)} natural misclassifications available; need {n_natural}")
        for k in natural[:n_natural]:
            samples.append(data.images[order[k]])
            truth.append(data.images[order[k]])
            truth_labels.append(int(labels[k]))
            kinds.append("natural")
            used.append(k)

    if n_adversarial:
        picks = [k for k in eligible if k not in used][:n_adversarial]
        if len(picks) < n_adversarial:
            raise ArgumentError("not enough clean samples for adversarial examples")
        x = data.images[torch.as_tensor([int(order[k]) for k in picks])]
        samples.extend(pgd_targeted(entry.model, x, target))
        truth.extend(x)
        truth_labels.extend(int(labels[k]) for k in picks)
        kinds.extend(["adversarial"] * n_adversarial)
        used.extend(picks)

    used_set = set(used)
    rest = [int(order[k]) for k in range(len(order)) if k not in used_set][:n_validation]
    if not rest:
        raise ArgumentError("no validation samples left after building the instance")
    val_idx = torch.as_tensor(rest)
    instance = AttackInstance(
        model=entry.model,
        trojaned=torch.stack(samples),
        validation=data.images[val_idx],
        validation_labels=data.labels[val_idx],
        target=int(target),
        victim_labels=[victim] if victim is not None else [],
        clean_truth=torch.stack(truth),
        source_labels=torch.as_tensor(truth_labels, dtype=torch.long),
        trigger_truth=recipe_trigger(recipe, data.image_shape) if recipe is not None else None,
        kinds=kinds,
        instance_id=f"{entry.entry_id or 'entry'}_s{seed}",
        source_entry=entry.entry_id,
        family=recipe.family if recipe is not None else "clean",
    )
    return instance


def save_instance(inst: AttackInstance, directory: Union[str, Path], zoo_entry: Optional[Union[str, Path]] = None) -> Path:
    """Samples and metadata only; the model stays in its zoo entry."""
    d = Path(directory)
    write_array(d / "trojaned.bfl", to_hwc(inst.trojaned))
    write_array(d / "validation.bfl", to_hwc(inst.validation))
    write_array(d / "validation_labels.bfl", inst.validation_labels.numpy().astype(np.int32))
    if inst.clean_truth is not None:
        write_array(d / "clean_truth.bfl", to_hwc(inst.clean_truth))
    if inst.source_labels is not None:
        write_array(d / "source_labels.bfl", inst.source_labels.numpy().astype(np.int32))
    if inst.trigger_truth is not None:
        save_trigger(d / "trigger_truth", inst.trigger_truth)
    write_json(
        d / "instance.json",
        {
            "instance_id": inst.instance_id,
            "source_entry": inst.source_entry,
            "zoo_entry": str(zoo_entry) if zoo_entry is not None else None,
            "target": inst.target,
            "victim_labels": inst.victim_labels,
            "kinds": inst.kinds,
            "flagged": inst.flagged,
            "family": inst.family,
        },
    )
    return d


def load_instance(directory: Union[str, Path], model: Optional[nn.Module] = None) -> AttackInstance:
    d = Path(directory)
    meta = read_json(d / "instance.json")
    if model is None:
        entry_path = meta.get("zoo_entry")
        if not entry_path:
            raise ConfigurationError(f"{d / 'instance.json'}: no zoo entry recorded; pass --zoo-entry")
        model = load_entry(entry_path).model
    clean_truth = from_hwc(read_array(d / "clean_truth.bfl")) if (d / "clean_truth.bfl").exists() else None
    trigger_truth = load_trigger(d / "trigger_truth") if (d / "trigger_truth").is_dir() else None
    source_labels = (
        torch.from_numpy(read_array(d / "source_labels.bfl").astype(np.int64)) if (d / "source_labels.bfl").exists() else None
    )
    return AttackInstance(
        model=model,
        trojaned=from_hwc(read_array(d / "trojaned.bfl")),
        validation=from_hwc(read_array(d / "validation.bfl")),
        validation_labels=torch.from_numpy(read_array(d / "validation_labels.bfl").astype(np.int64)),
        target=int(meta["target"]),
        victim_labels=[int(v) for v in meta.get("victim_labels", [])],
        clean_truth=clean_truth,
        source_labels=source_labels,
        trigger_truth=trigger_truth,
        kinds=list(meta.get("kinds", [])),
        instance_id=str(meta.get("instance_id", d.name)),
        source_entry=str(meta.get("source_entry", "")),
        family=str(meta.get("family", "")),
    )


# ---------------------------------------------------------------------------
# zoo build
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ZooSpecEntry:
    family: str
    count: int = 1
    target: int = 0
    seed: int = 0
    rate: float = 0.1
    params: Mapping[str, Any] = field(default_factory=dict)
    victim: Optional[int] = None


def build_zoo(
    specs: Sequence[ZooSpecEntry],
    train: Dataset,
    val: Optional[Dataset],
    cfg: TrainConfig,
    jobs: int = 1,
) -> List[ZooEntry]:
    """Train every requested entry; entry i of a spec uses seed spec.seed + i."""
    plan: List[Tuple[Optional[InjectionRecipe], float, int]] = []
    for spec in specs:
        for i in range(spec.count):
            if spec.family == "clean":
                plan.append((None, 0.0, spec.seed + i))
            else:
                plan.append((InjectionRecipe(spec.family, spec.target, dict(spec.params), spec.victim), spec.rate, spec.seed + i))

    def _one(item: Tuple[Optional[InjectionRecipe], float, int]) -> ZooEntry:
        recipe, rate, seed = item
        return poison_and_train(train, recipe, rate, cfg.epochs, seed, cfg, val)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(_one, plan))
    else:
        entries = [_one(item) for item in plan]
    for i, e in enumerate(entries):
        e.entry_id = entry_dirname(i, e)
    return entries


def zoo_table(entries: Sequence[ZooEntry], test: Dataset) -> List[Dict[str, Any]]:
    rows = []
    for e in entries:
        row: Dict[str, Any] = {"entry": e.entry_id, "label": e.label, "arch": e.arch, "accuracy": accuracy(e.model, test)}
        if e.recipe is not None:
            row["family"] = e.recipe.family
            row["asr"] = asr(e.model, test, e.recipe, e.recipe.target, e.recipe.victim)
        rows.append(row)
    return rows

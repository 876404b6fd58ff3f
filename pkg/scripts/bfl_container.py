#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""bfl_container.py

Array container used by every persistence path (triggers, images, params).

Layout (little-endian):
  magic  b"BFL1"
  int32  rank
  int32  dims[rank]
  int32  dtype code (1 = float32, 2 = int32, 3 = float64)
  data   row-major, 4 or 8 bytes per element

Floats are stored as float32 unless the caller asks for float64.

Also hosts the small file helpers (json, sha256, png) shared by the stages.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Union

import numpy as np
from PIL import Image

from scripts.errors import FormatError

MAGIC = b"BFL1"
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<i4"), 3: np.dtype("<f8")}
_CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}

PathLike = Union[str, Path]


def write_array(path: PathLike, arr: Any, float64: bool = False) -> Path:
    p = Path(path)
    a = np.asarray(arr)
    if np.issubdtype(a.dtype, np.integer) or a.dtype == np.bool_:
        a = a.astype("<i4")
    else:
        a = a.astype("<f8" if float64 else "<f4")
    code = _CODE_OF[a.dtype]
    header = np.array([a.ndim, *a.shape, code], dtype="<i4")
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("wb") as f:
        f.write(MAGIC)
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(a).tobytes(order="C"))
    return p


def read_array(path: PathLike) -> np.ndarray:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as e:
        raise FormatError(p, f"cannot read ({e.__class__.__name__})") from e

    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError(p, "bad magic (expected BFL1)")
    rank = int(np.frombuffer(raw, dtype="<i4", count=1, offset=4)[0])
    if rank < 0 or rank > 8:
        raise FormatError(p, f"implausible rank {rank}")
    header_end = 8 + 4 * (rank + 1)
    if len(raw) < header_end:
        raise FormatError(p, "truncated header")
    fields = np.frombuffer(raw, dtype="<i4", count=rank + 1, offset=8)
    dims = tuple(int(d) for d in fields[:rank])
    code = int(fields[rank])
    if code not in DTYPE_CODES:
        raise FormatError(p, f"unknown dtype code {code}")
    if any(d < 0 for d in dims):
        raise FormatError(p, f"negative dimension in {dims}")

    count = int(np.prod(dims)) if dims else 1
    nbytes = DTYPE_CODES[code].itemsize * count
    if len(raw) != header_end + nbytes:
        raise FormatError(p, f"payload size {len(raw) - header_end} bytes, expected {nbytes}")
    data = np.frombuffer(raw, dtype=DTYPE_CODES[code], count=count, offset=header_end)
    return data.reshape(dims).copy()


def write_png(path: PathLike, img_hwc: Any) -> Path:
    """Lossless 8-bit dump of an (H, W, C) image in [0, 1]."""
    a = np.clip(np.asarray(img_hwc, dtype=np.float64), 0.0, 1.0)
    a8 = np.round(a * 255.0).astype(np.uint8)
    if a8.ndim == 3 and a8.shape[2] == 1:
        a8 = a8[:, :, 0]
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(a8).save(p, format="PNG")
    return p


def read_png(path: PathLike) -> np.ndarray:
    p = Path(path)
    try:
        img = Image.open(p)
        img.load()
    except OSError as e:
        raise FormatError(p, f"cannot decode png ({e})") from e
    a = np.asarray(img, dtype=np.float32) / 255.0
    if a.ndim == 2:
        a = a[:, :, None]
    return a


def write_json(path: PathLike, obj: Any) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return p


def read_json(path: PathLike) -> Any:
    p = Path(path)
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(p, f"cannot parse structured text ({e.__class__.__name__})") from e


def sha256_file(p: PathLike) -> str:
    h = hashlib.sha256()
    h.update(Path(p).read_bytes())
    return h.hexdigest()

#!/usr/bin/env python3
"""
scripts/validate_manifest.py

Structural validator for run_manifest.json written by `forensics run` and `scan`.

- Enforces structure only: required keys, types, sha256 format, sorted
  unique artifact paths.
- With --check-files, also re-hashes every artifact next to the manifest.
- `comparable()` strips the volatile keys so two runs with the same seeds can
  be compared for byte identity.

Exit codes:
- 0: OK
- 2: Validation failed
"""
from __future__ import annotations

import json
import re
import sys
from pathlib import Path
from typing import Any, Dict, List, Tuple

from scripts.bfl_container import sha256_file
from scripts.run_pipeline import VOLATILE_KEYS

_SHA_RE = re.compile(r"^[0-9a-f]{64}$")
REQUIRED_TOP = ("artifacts", "command", "config", "returncode", "run_id", "utc")
REQUIRED_ARTIFACT = ("bytes", "path", "sha256")


def _fail(msg: str) -> int:
    sys.stderr.write(f"[manifest] invalid: {msg}\n")
    return 2


def _is_int(x: Any) -> bool:
    # bool is an int subclass
    return isinstance(x, int) and not isinstance(x, bool)


def validate_manifest(data: Dict[str, Any]) -> Tuple[bool, str]:
    if not isinstance(data, dict):
        return False, "root must be an object"
    for k in REQUIRED_TOP:
        if k not in data:
            return False, f"missing top-level key: {k}"
    extra = set(data) - set(REQUIRED_TOP)
    if extra:
        return False, f"unexpected top-level keys: {sorted(extra)}"

    for k in ("run_id", "command", "utc"):
        if not isinstance(data[k], str) or not data[k].strip():
            return False, f"{k} must be a non-empty string"
    if not isinstance(data["config"], dict):
        return False, "config must be an object"
    if not _is_int(data["returncode"]) or data["returncode"] not in (0, 1, 2):
        return False, "returncode must be 0, 1 or 2"

    artifacts = data["artifacts"]
    if not isinstance(artifacts, list):
        return False, "artifacts must be an array"
    seen = set()
    for i, a in enumerate(artifacts):
        if not isinstance(a, dict):
            return False, f"artifacts[{i}] must be an object"
        missing = [k for k in REQUIRED_ARTIFACT if k not in a]
        if missing:
            return False, f"artifacts[{i}] missing key: {missing[0]}"
        if set(a) - set(REQUIRED_ARTIFACT):
            return False, f"artifacts[{i}] unexpected keys: {sorted(set(a) - set(REQUIRED_ARTIFACT))}"
        path = a["path"]
        if not isinstance(path, str) or not path.strip() or path.startswith("/") or ".." in Path(path).parts:
            return False, f"artifacts[{i}].path must be a relative path inside the run directory"
        if path in seen:
            return False, f"duplicate artifact path: {path}"
        seen.add(path)
        if not isinstance(a["sha256"], str) or not _SHA_RE.match(a["sha256"]):
            return False, f"artifacts[{i}].sha256 invalid format: {a['sha256']!r}"
        if not _is_int(a["bytes"]) or a["bytes"] < 0:
            return False, f"artifacts[{i}].bytes must be a non-negative integer"

    paths = [a["path"] for a in artifacts]
    if paths != sorted(paths):
        return False, "artifacts must be sorted by path"
    if data["returncode"] != 0 and "FAILED" not in seen:
        return False, "failed runs must carry a FAILED marker"
    return True, "ok"


def check_files(data: Dict[str, Any], run_dir: Path) -> Tuple[bool, str]:
    for a in data["artifacts"]:
        p = run_dir / a["path"]
        if not p.is_file():
            return False, f"artifact missing on disk: {a['path']}"
        if p.stat().st_size != a["bytes"] or sha256_file(p) != a["sha256"]:
            return False, f"artifact changed since the manifest was written: {a['path']}"
    return True, "ok"


def comparable(data: Dict[str, Any]) -> Dict[str, Any]:
    """Manifest without volatile keys (run id, timestamps, run-specific paths)."""
    out = {k: v for k, v in data.items() if k not in VOLATILE_KEYS}
    config = dict(out.get("config", {}))
    config.pop("run_id", None)
    config.pop("paths", None)
    config.pop("profile", None)
    out["config"] = config
    return out


def main(argv: List[str]) -> int:
    args = [a for a in argv[1:] if a != "--check-files"]
    if len(args) != 1:
        sys.stderr.write("Usage: validate_manifest.py [--check-files] /path/to/run_manifest.json\n")
        return 2

    p = Path(args[0])
    if not p.is_file():
        return _fail(f"file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as ex:
        return _fail(f"cannot read JSON: {ex}")

    ok, msg = validate_manifest(data)
    if ok and "--check-files" in argv:
        ok, msg = check_files(data, p.parent)
    if not ok:
        return _fail(msg)
    return 0


if __name__ == "__main__":
    raise SystemExit(main(sys.argv))

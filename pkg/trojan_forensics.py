"""Compatibility shim.

Tests and CI expect an executable CLI at repo root named:
  trojan_forensics.py

The implementation lives in scripts/trojan_forensics.py.
"""

from __future__ import annotations

from scripts.trojan_forensics import main as _main  # noqa: F401

if __name__ == "__main__":
    raise SystemExit(_main())

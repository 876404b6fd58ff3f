#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""run_pipeline.py

Forensics orchestrator:
- decompose every attack instance (form selection included)
- extract attack features, cluster them, summarize each cluster
- synthesize one scanner spec per cluster

and the scanner evaluation protocol (synthesized vs. vanilla, per family).

Stages communicate only via files under one run directory:

  <out_base>/<run_id>/
    decompositions/<instance_id>/   x~, t~, metrics.json, png/
    summaries/cluster_<id>/         summary.json + mu/sigma containers
    scanners/cluster_<id>.spec      scanner spec (JSON)
    metrics.json                    deterministic metrics table
    report.txt                      human-readable tables
    run_manifest.json               resolved config + artifact sha256
    FAILED                          only when a stage raised

Profiles are TOML (stdlib tomllib on Python >= 3.11).

Usage:
  python trojan_forensics.py forensics run --config profiles/forensics_example.toml
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np
import torch

from scripts.bfl_container import sha256_file, write_json
from scripts.decomposer import DecompositionConfig, DecompositionResult, decompose, decomposition_quality, load_result, save_result
from scripts.errors import ArgumentError, ConfigurationError
from scripts.reconstructor import ReconConfig, load_reconstructor
from scripts.remover import UnlearnConfig
from scripts.scanner import (
    InversionConfig,
    ScanVerdict,
    SynthesizedScanner,
    evaluate_scanner,
    load_scanner,
    save_scanner,
    summarize_verdicts,
    synthesize_scanner,
    vanilla_scanner,
    z_from_percentile,
)
from scripts.summarizer import METHODS, cluster_purity, extract_features, save_summary, summarize_cluster, summarize_pool
from scripts.zoo_factory import AttackInstance, Dataset, TrainConfig, ZooSpecEntry, load_dataset, load_instance, load_zoo

logger = logging.getLogger(__name__)

T = TypeVar("T")

MANIFEST_NAME = "run_manifest.json"
FAILED_MARKER = "FAILED"
VOLATILE_KEYS = ("utc", "run_id")


def _utc_run_id() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")


def _load_toml(path: Path) -> dict:
    try:
        import tomllib  # py3.11+
    except ModuleNotFoundError:  # py3.10
        import tomli as tomllib

    try:
        return tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"Invalid profile {path}: {e}") from e


def _ensure_dir(p: Path) -> None:
    p.mkdir(parents=True, exist_ok=True)


def resolve_path(p: str) -> Path:
    return Path(p) if os.path.isabs(p) else (Path.cwd() / p).resolve()


# ---------------------------------------------------------------------------
# profile
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathsConfig:
    data: str = "./runs/data"
    zoo: str = "./runs/zoo"
    instances: str = "./runs/instances"
    reconstructor: str = "./runs/recon"
    decompositions: str = ""
    scanners: Tuple[str, ...] = ()
    out_base: str = "./runs"


@dataclass(frozen=True)
class StagesConfig:
    decompose: bool = True
    summarize: bool = True
    synthesize: bool = True


@dataclass(frozen=True)
class SeedsConfig:
    data: int = 0
    zoo: int = 0
    instances: int = 0
    recon: int = 0
    cluster: int = 0


@dataclass(frozen=True)
class DataConfig:
    count: int = 2000
    size: int = 32
    num_classes: int = 10
    channels: int = 3
    fractions: Tuple[float, ...] = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class InstanceConfig:
    n_trojaned: int = 10
    n_validation: int = 100
    n_natural: int = 0
    n_adversarial: int = 0
    clean_target: Optional[int] = None


@dataclass(frozen=True)
class SummarizeConfig:
    method: str = "kmeans_silhouette"

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"[summarize].method must be one of {list(METHODS)}, got {self.method!r}")


@dataclass(frozen=True)
class SynthesizeConfig:
    delta_size: float = 100.0
    delta_pixel: float = 10.0
    z: float = 1.04
    percentile: Tuple[float, ...] = ()

    @property
    def resolved_z(self) -> float:
        if self.percentile:
            if len(self.percentile) != 2:
                raise ConfigurationError("[synthesize].percentile must be [low, high]")
            return z_from_percentile(*self.percentile)
        return self.z


@dataclass(frozen=True)
class ScanConfig:
    clean_samples: int = 200
    vanilla_form: str = ""


@dataclass(frozen=True)
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    stages: StagesConfig = field(default_factory=StagesConfig)
    seeds: SeedsConfig = field(default_factory=SeedsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    zoo: Tuple[ZooSpecEntry, ...] = ()
    instances: InstanceConfig = field(default_factory=InstanceConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    decompose: DecompositionConfig = field(default_factory=DecompositionConfig)
    summarize: SummarizeConfig = field(default_factory=SummarizeConfig)
    synthesize: SynthesizeConfig = field(default_factory=SynthesizeConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    jobs: int = 1
    run_id: str = ""
    profile: str = ""

    @property
    def outdir(self) -> Path:
        return resolve_path(self.paths.out_base) / self.run_id


def _section(raw: Mapping[str, Any], name: str, cls: Type[T], profile_path: Path, exclude: Sequence[str] = ()) -> T:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigurationError(f"Invalid profile: [{name}] must be a table: {profile_path}")
    known = {f.name for f in fields(cls)} - set(exclude)  # type: ignore[arg-type]
    unknown = sorted(set(sec) - known - set(exclude))
    if unknown:
        raise ConfigurationError(f"Invalid profile: unknown key(s) {unknown} in [{name}]: {profile_path}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in sec.items() if k in known}
    try:
        return cls(**kwargs)
    except (TypeError, ConfigurationError) as e:
        raise ConfigurationError(f"Invalid profile: [{name}] {e}: {profile_path}") from e


def _zoo_entries(raw: Mapping[str, Any], profile_path: Path) -> Tuple[ZooSpecEntry, ...]:
    zoo = raw.get("zoo", {})
    items = zoo.get("entries", []) if isinstance(zoo, dict) else None
    if not isinstance(items, list) or not all(isinstance(x, dict) for x in items):
        raise ConfigurationError(f"Invalid profile: [[zoo.entries]] must be an array of tables: {profile_path}")
    out = []
    for i, item in enumerate(items):
        if "family" not in item:
            raise ConfigurationError(f"Invalid profile: [[zoo.entries]] #{i} needs a family: {profile_path}")
        try:
            out.append(ZooSpecEntry(**{k: dict(v) if isinstance(v, dict) else v for k, v in item.items()}))
        except TypeError as e:
            raise ConfigurationError(f"Invalid profile: [[zoo.entries]] #{i}: {e}: {profile_path}") from e
    return tuple(out)


def _parse_profile(profile_path: Path) -> PipelineConfig:
    if not profile_path.exists():
        raise ConfigurationError(f"Profile not found: {profile_path}")
    raw = _load_toml(profile_path)
    known = {"paths", "stages", "seeds", "data", "train", "zoo", "instances", "recon", "decompose", "summarize", "synthesize", "scan", "unlearn"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"Invalid profile: unknown section(s) {unknown}: {profile_path}")
    scan_keys = {f.name for f in fields(ScanConfig)}
    inversion_keys = {f.name for f in fields(InversionConfig)}
    return PipelineConfig(
        paths=_section(raw, "paths", PathsConfig, profile_path),
        stages=_section(raw, "stages", StagesConfig, profile_path),
        seeds=_section(raw, "seeds", SeedsConfig, profile_path),
        data=_section(raw, "data", DataConfig, profile_path),
        train=_section(raw, "train", TrainConfig, profile_path),
        zoo=_zoo_entries(raw, profile_path),
        instances=_section(raw, "instances", InstanceConfig, profile_path),
        recon=_section(raw, "recon", ReconConfig, profile_path),
        decompose=_section(raw, "decompose", DecompositionConfig, profile_path),
        summarize=_section(raw, "summarize", SummarizeConfig, profile_path),
        synthesize=_section(raw, "synthesize", SynthesizeConfig, profile_path),
        inversion=_section(raw, "scan", InversionConfig, profile_path, exclude=sorted(scan_keys)),
        scan=_section(raw, "scan", ScanConfig, profile_path, exclude=sorted(inversion_keys)),
        unlearn=_section(raw, "unlearn", UnlearnConfig, profile_path),
        profile=str(profile_path),
    )


def load_config(
    profile: Optional[str] = None,
    seed: Optional[int] = None,
    jobs: Optional[int] = None,
    out: Optional[str] = None,
    run_id: Optional[str] = None,
) -> PipelineConfig:
    """Profile values (or defaults), then CLI overrides; `seed` replaces every stage seed."""
    cfg = _parse_profile(resolve_path(profile)) if profile else PipelineConfig()
    if seed is not None:
        cfg = replace(
            cfg,
            seeds=SeedsConfig(seed, seed, seed, seed, seed),
            decompose=replace(cfg.decompose, seed=seed),
            inversion=replace(cfg.inversion, seed=seed),
            unlearn=replace(cfg.unlearn, seed=seed),
        )
    if jobs is not None:
        if jobs < 1:
            raise ArgumentError("--jobs must be >= 1")
        cfg = replace(cfg, jobs=jobs)
    if out:
        cfg = replace(cfg, paths=replace(cfg.paths, out_base=out))
    return replace(cfg, run_id=run_id or cfg.run_id or _utc_run_id())


def resolved_config(cfg: PipelineConfig) -> Dict[str, Any]:
    return json.loads(json.dumps(asdict(cfg), sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# run artifacts
# ---------------------------------------------------------------------------


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_run_manifest(outdir: Path, run_id: str, config: Mapping[str, Any], returncode: int, command: str) -> Path:
    artifacts = []
    for p in sorted(q for q in outdir.rglob("*") if q.is_file() and q.name != MANIFEST_NAME):
        artifacts.append({"path": p.relative_to(outdir).as_posix(), "sha256": sha256_file(p), "bytes": p.stat().st_size})
    manifest = {
        "run_id": run_id,
        "command": command,
        "config": dict(config),
        "artifacts": artifacts,
        "returncode": returncode,
        "utc": datetime.now(timezone.utc).isoformat(),
    }
    path = outdir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def mark_failed(outdir: Path, stage: str, err: BaseException) -> Path:
    _ensure_dir(outdir)
    marker = outdir / FAILED_MARKER
    marker.write_text(f"stage: {stage}\nerror: {err.__class__.__name__}: {err}\n", encoding="utf-8")
    logger.error("stage %s failed: %s", stage, err)
    return marker


def render_table(rows: Sequence[Mapping[str, Any]], columns: Sequence[str], title: str = "") -> str:
    """Fixed-width text table; floats with 3 decimals, None as '-'."""

    def _cell(v: Any) -> str:
        if v is None:
            return "-"
        if isinstance(v, bool):
            return "yes" if v else "no"
        if isinstance(v, float):
            return f"{v:.3f}"
        return str(v)

    cells = [[_cell(r.get(c)) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = [title] if title else []
    lines.append("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip())
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def _map(jobs: int, fn: Callable[[Any], T], items: Sequence[Any]) -> List[T]:
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def list_instances(path: str) -> List[Path]:
    root = resolve_path(path)
    if not root.is_dir():
        raise ConfigurationError(f"instance directory not found: {root}")
    if (root / "instance.json").exists():
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "instance.json").exists())


def load_split(path: str, split: str) -> Dataset:
    """`path` is either a dataset dir or a root holding train/val/test dataset dirs."""
    root = resolve_path(path)
    if (root / "meta.json").exists():
        return load_dataset(root)
    if (root / split / "meta.json").exists():
        return load_dataset(root / split)
    raise ConfigurationError(f"dataset not found: {root} (nor {root / split})")


# ---------------------------------------------------------------------------
# forensics
# ---------------------------------------------------------------------------


def _instance_row(inst: AttackInstance, result: DecompositionResult) -> Dict[str, Any]:
    m = result.metrics
    row: Dict[str, Any] = {
        "instance": inst.instance_id,
        "family": inst.family or "-",
        "variant": result.variant,
        "validation_asr": float(m.get("validation_asr", 0.0)),
        "clean_accuracy": float(m.get("clean_accuracy", 0.0)),
        "low_confidence": bool(m.get("low_confidence", False)),
    }
    if inst.clean_truth is not None:
        quality = decomposition_quality(result, inst)
        for part in ("clean", "trigger"):
            for k, v in quality[part].items():
                row[f"{part}_{k}"] = float(v)
    return row


def run_forensics(cfg: PipelineConfig, command: str = "forensics run") -> Dict[str, Any]:
    """Decompose -> summarize -> synthesize. Raises after writing FAILED on any stage error."""
    inst_dirs = list_instances(cfg.paths.instances)
    if not inst_dirs:
        raise ArgumentError(f"no attack instances found under {resolve_path(cfg.paths.instances)}")
    if cfg.stages.decompose and not resolve_path(cfg.paths.reconstructor).is_dir():
        raise ConfigurationError(f"reconstructor not found: {resolve_path(cfg.paths.reconstructor)}")
    if not cfg.stages.decompose and not cfg.paths.decompositions:
        raise ConfigurationError("[stages].decompose = false needs [paths].decompositions")

    outdir = cfg.outdir
    _ensure_dir(outdir)
    resolved = resolved_config(cfg)
    logger.info("run %s: %d instance(s) -> %s", cfg.run_id, len(inst_dirs), outdir)

    report: Dict[str, Any] = {"run_id": cfg.run_id, "instances": [], "clusters": [], "scanners": []}
    metrics: Dict[str, Any] = {"instances": [], "clustering": None, "clusters": [], "scanners": []}
    stage = "load"
    try:
        instances = [load_instance(d) for d in inst_dirs]

        stage = "decompose"
        if cfg.stages.decompose:
            recon, features = load_reconstructor(resolve_path(cfg.paths.reconstructor))
            results = _map(cfg.jobs, lambda inst: decompose(inst, recon, cfg.decompose, features), instances)
            for inst, res in zip(instances, results):
                res.instance_id = inst.instance_id
                res.metrics["family"] = inst.family
                save_result(res, outdir / "decompositions" / inst.instance_id)
        else:
            src = resolve_path(cfg.paths.decompositions)
            results = [load_result(src / inst.instance_id) for inst in instances]
        rows = [_instance_row(inst, res) for inst, res in zip(instances, results)]
        metrics["instances"] = rows
        report["instances"] = rows

        if cfg.stages.summarize:
            stage = "summarize"
            vectors = [extract_features(res, inst.family) for inst, res in zip(instances, results)]
            if len(vectors) == 1:
                clustering_labels = np.zeros(1, dtype=np.int64)
                summaries = [summarize_cluster(vectors, 0)]
                details: Dict[str, Any] = {vectors[0].kind: {"k": 1, "members": 1}}
            else:
                clustering, summaries = summarize_pool(vectors, cfg.summarize.method, cfg.seeds.cluster)
                clustering_labels, details = clustering.labels, clustering.details
            families = [inst.family or "unknown" for inst in instances]
            metrics["clustering"] = {
                "method": cfg.summarize.method,
                "assignments": {inst.instance_id: int(lab) for inst, lab in zip(instances, clustering_labels)},
                "purity": cluster_purity(clustering_labels, families),
                "details": details,
            }
            for s in summaries:
                save_summary(s, outdir / "summaries" / f"cluster_{s.cluster_id}")
                info = {
                    "cluster": s.cluster_id,
                    "kind": s.kind,
                    "members": s.member_count,
                    "dimensions": s.dimensions,
                    "families": ",".join(f"{k}:{v}" for k, v in s.families.items()) or "-",
                }
                metrics["clusters"].append(info)
                report["clusters"].append(info)

            if cfg.stages.synthesize:
                stage = "synthesize"
                z = cfg.synthesize.resolved_z
                for s in summaries:
                    scanner = synthesize_scanner(s, cfg.synthesize.delta_size, cfg.synthesize.delta_pixel, z, cfg.inversion)
                    path = save_scanner(scanner, outdir / "scanners" / f"cluster_{s.cluster_id}.spec")
                    info = {"scanner": scanner.name, "form": scanner.form, "specs": len(scanner.specs), "path": path.relative_to(outdir).as_posix()}
                    metrics["scanners"].append(info)
                    report["scanners"].append(info)

        stage = "report"
        write_json(outdir / "metrics.json", _jsonable(metrics))
        (outdir / "report.txt").write_text(render_forensics_report(report), encoding="utf-8")
    except Exception as e:
        mark_failed(outdir, stage, e)
        write_run_manifest(outdir, cfg.run_id, resolved, 1, command)
        raise
    write_run_manifest(outdir, cfg.run_id, resolved, 0, command)
    report["outdir"] = str(outdir)
    return report


def render_forensics_report(report: Mapping[str, Any]) -> str:
    parts = [f"run_id = {report['run_id']}\n"] if report.get("run_id") else []
    inst_cols = ["instance", "family", "variant", "validation_asr", "clean_accuracy", "low_confidence"]
    if report.get("instances") and "clean_ssim" in report["instances"][0]:
        inst_cols += ["clean_psnr", "clean_ssim", "trigger_ssim"]
    parts.append(render_table(report.get("instances", []), inst_cols, "[decomposition]"))
    if report.get("clusters"):
        parts.append(render_table(report["clusters"], ["cluster", "kind", "members", "dimensions", "families"], "[summaries]"))
    if report.get("scanners"):
        parts.append(render_table(report["scanners"], ["scanner", "form", "specs", "path"], "[scanners]"))
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# scanner evaluation
# ---------------------------------------------------------------------------

SCAN_COLUMNS = ["scanner", "family", "TP", "FN", "TN", "FP", "ACC", "PN_REASR", "CL_REASR"]


def scan_samples(cfg: PipelineConfig) -> Dataset:
    data = load_split(cfg.paths.data, "val")
    n = min(len(data), cfg.scan.clean_samples)
    perm = torch.randperm(len(data), generator=torch.Generator().manual_seed(cfg.seeds.data))
    return data.subset(torch.sort(perm[:n]).values, split="scan")


def _family_rows(name: str, evaluation: Mapping[str, Any]) -> List[Dict[str, Any]]:
    """One row for the whole zoo, then one per trojaned family (each against all clean models)."""
    verdicts = evaluation["verdicts"]
    rows = [{"scanner": name, "family": "all", **{k: evaluation[k] for k in SCAN_COLUMNS[2:]}}]
    families = sorted({v["family"] for v in verdicts if v["label"] == "trojaned"})
    for fam in families:
        subset = [v for v in verdicts if v["label"] == "clean" or v["family"] == fam]
        light = [
            ScanVerdict(v["model_id"], {}, {}, int(v["best_target"]), float(v["best_reasr"]), bool(v["trojaned"]), 0.0)
            for v in subset
        ]
        counts = summarize_verdicts(light, [v["label"] for v in subset])
        rows.append({"scanner": name, "family": fam, **{k: counts[k] for k in SCAN_COLUMNS[2:]}})
    return rows


def run_scan_eval(
    cfg: PipelineConfig,
    scanner_paths: Sequence[str] = (),
    vanilla_form: Optional[str] = None,
    command: str = "scan",
) -> Dict[str, Any]:
    """Evaluate every scanner spec (and optionally the vanilla baseline) on the zoo."""
    paths = list(scanner_paths) or list(cfg.paths.scanners)
    vanilla = vanilla_form if vanilla_form is not None else (cfg.scan.vanilla_form or None)
    if not paths and not vanilla:
        raise ArgumentError("no scanner spec given (use --scanner or --vanilla-form)")
    scanners: List[SynthesizedScanner] = [load_scanner(resolve_path(p)) for p in paths]
    if vanilla:
        scanners.insert(0, vanilla_scanner(vanilla, cfg.inversion))
    zoo = load_zoo(resolve_path(cfg.paths.zoo))
    if not zoo:
        raise ArgumentError(f"empty zoo: {resolve_path(cfg.paths.zoo)}")
    clean = scan_samples(cfg)

    outdir = cfg.outdir
    _ensure_dir(outdir)
    resolved = resolved_config(cfg)
    stage = "scan"
    try:
        evaluations = [evaluate_scanner(zoo, s, clean, cfg.jobs) for s in scanners]
        rows: List[Dict[str, Any]] = []
        for s, ev in zip(scanners, evaluations):
            rows.extend(_family_rows(s.name or s.form, ev))
        rows.sort(key=lambda r: (r["family"] != "all", r["family"], r["scanner"]))
        report = {"rows": rows, "evaluations": evaluations}
        stage = "report"
        write_json(outdir / "scan_report.json", _jsonable(report))
        (outdir / "scan_report.txt").write_text(render_table(rows, SCAN_COLUMNS, "[scan]"), encoding="utf-8")
    except Exception as e:
        mark_failed(outdir, stage, e)
        write_run_manifest(outdir, cfg.run_id, resolved, 1, command)
        raise
    write_run_manifest(outdir, cfg.run_id, resolved, 0, command)
    report["outdir"] = str(outdir)
    return report


def render_report(report: Mapping[str, Any]) -> str:
    """Re-render a stored scan_report.json or forensics metrics report."""
    if "rows" in report:
        return render_table(report["rows"], SCAN_COLUMNS, "[scan]")
    if "instances" in report:
        return render_forensics_report(report)
    raise ArgumentError("unrecognized report: expected 'rows' or 'instances'")

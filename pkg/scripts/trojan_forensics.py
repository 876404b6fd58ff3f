#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""trojan_forensics.py

Batch CLI for backdoor forensics.

  data synth        synthetic shapes dataset (train/val/test)
  zoo build         train clean and poisoned classifiers from a profile
  zoo eval          accuracy / ASR table of a zoo
  zoo instances     attack instances from the trojaned entries of a zoo
  recon train       denoising reconstructor + clean feature network
  decompose         split one instance into clean images and a trigger
  summarize         features -> clusters -> attack summaries
  synthesize        one scanner spec per attack summary
  scan              evaluate scanner specs on a zoo (or one model)
  unlearn           remove a backdoor with a decomposed trigger
  forensics run     decompose + summarize + synthesize in one run directory
  report            re-render a stored report

Exit codes: 0 success, 1 stage failure, 2 usage / configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from scripts.bfl_container import read_json, write_json
from scripts.decomposer import VARIANTS, decompose, decomposition_quality, load_result, save_result
from scripts.errors import ArgumentError, ConfigurationError, ForensicsError, FormatError
from scripts.reconstructor import load_reconstructor, save_reconstructor, train_feature_extractor, train_reconstructor
from scripts.remover import draw_clean_subset, unlearn
from scripts.run_pipeline import (
    PipelineConfig,
    load_config,
    load_split,
    render_report,
    render_table,
    resolve_path,
    resolved_config,
    run_forensics,
    run_scan_eval,
    scan_samples,
)
from scripts.scanner import load_scanner, save_scanner, scan_model, synthesize_scanner, vanilla_scanner
from scripts.summarizer import METHODS, cluster_purity, extract_features, load_summary, save_summary, summarize_pool
from scripts.trigger_algebra import load_trigger
from scripts.zoo_factory import (
    build_instance,
    build_zoo,
    list_zoo,
    load_entry,
    load_instance,
    make_shapes_dataset,
    persist_zoo,
    save_dataset,
    save_entry,
    save_instance,
    split_dataset,
    zoo_table,
)

__tool_id__ = "trojan_forensics"
__version__ = "0.1"

logger = logging.getLogger("trojan_forensics")

LOG_FORMAT = "[%(name)s] %(levelname)s %(message)s"


def _common() -> argparse.ArgumentParser:
    """Global flags, accepted before or after the subcommand."""
    c = argparse.ArgumentParser(add_help=False)
    c.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Seed for every stage (overrides the profile)")
    c.add_argument("--config", default=argparse.SUPPRESS, help="TOML profile")
    c.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="Parallel workers across instances/models")
    c.add_argument("--out", default=argparse.SUPPRESS, help="Output directory (run base for 'forensics run' and 'scan')")
    c.add_argument("--run-id", default=argparse.SUPPRESS, help="Override run id (default: UTC timestamp)")
    c.add_argument("--log-level", default=argparse.SUPPRESS, help="DEBUG|INFO|WARNING|ERROR")
    c.add_argument("--progress", action="store_true", default=argparse.SUPPRESS, help="Show progress bars")
    return c


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = argparse.ArgumentParser(prog=__tool_id__, description="Backdoor forensics: decomposition, summarization, scanner synthesis.", parents=[common])
    sub = p.add_subparsers(dest="cmd")

    data = sub.add_parser("data", help="Dataset utilities").add_subparsers(dest="action")
    sp = data.add_parser("synth", parents=[common], help="Write a synthetic shapes dataset (train/val/test)")
    sp.add_argument("--count", type=int, default=None)
    sp.add_argument("--size", type=int, default=None)
    sp.add_argument("--classes", type=int, default=None)

    zoo = sub.add_parser("zoo", help="Model zoo").add_subparsers(dest="action")
    sp = zoo.add_parser("build", parents=[common], help="Train the zoo listed in the profile")
    sp.add_argument("--data", default=None, help="Dataset dir (default: [paths].data)")
    sp = zoo.add_parser("eval", parents=[common], help="Accuracy / ASR table")
    sp.add_argument("--zoo", required=True)
    sp.add_argument("--data", default=None, help="Dataset dir (default: [paths].data)")
    sp = zoo.add_parser("instances", parents=[common], help="Attack instances from trojaned entries")
    sp.add_argument("--zoo", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--n-trojaned", type=int, default=None)
    sp.add_argument("--n-validation", type=int, default=None)
    sp.add_argument("--n-natural", type=int, default=None)
    sp.add_argument("--n-adversarial", type=int, default=None)
    sp.add_argument("--clean-target", type=int, default=None, help="Also build adversarial instances for clean entries")

    recon = sub.add_parser("recon", help="Reconstructor").add_subparsers(dest="action")
    sp = recon.add_parser("train", parents=[common], help="Train reconstructor + feature network")
    sp.add_argument("--data", required=True)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--noise-level", type=float, default=None)

    sp = sub.add_parser("decompose", parents=[common], help="Decompose one attack instance")
    sp.add_argument("--instance", "--samples", dest="instance", required=True, help="Attack instance dir (stamped + validation samples)")
    sp.add_argument("--recon", required=True)
    sp.add_argument("--zoo-entry", default=None)
    sp.add_argument("--form", choices=["auto", "patch", "transform"], default=None)
    sp.add_argument("--variant", choices=list(VARIANTS), default=None)
    sp.add_argument("--steps", type=int, default=None)

    sp = sub.add_parser("summarize", parents=[common], help="Cluster decompositions into attack summaries")
    sp.add_argument("--decompositions", required=True, nargs="+", help="Result dirs, or dirs holding result dirs")
    sp.add_argument("--method", choices=list(METHODS), default=None)

    sp = sub.add_parser("synthesize", parents=[common], help="Scanner specs from attack summaries")
    sp.add_argument("--summary", "--summaries", dest="summaries", required=True)
    sp.add_argument("--delta-size", type=float, default=None)
    sp.add_argument("--delta-pixel", type=float, default=None)
    sp.add_argument("--z", type=float, default=None)
    sp.add_argument("--percentile", type=float, nargs=2, metavar=("LOW", "HIGH"), default=None)

    sp = sub.add_parser("scan", parents=[common], help="Evaluate scanners on a zoo")
    sp.add_argument("--zoo", default=None)
    sp.add_argument("--model", default=None, help="Scan a single zoo entry instead of evaluating a zoo")
    sp.add_argument("--data", required=True)
    sp.add_argument("--scanner", action="append", default=[])
    sp.add_argument("--vanilla-form", choices=["patch", "transform"], default=None)
    sp.add_argument("--victim", type=int, default=None)
    sp.add_argument("--report", default=None, help="Also write the text table here")

    sp = sub.add_parser("unlearn", parents=[common], help="Unlearn a backdoor with a decomposed trigger")
    sp.add_argument("--zoo-entry", required=True)
    sp.add_argument("--trigger", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--target", type=int, default=None)

    forensics = sub.add_parser("forensics", help="End-to-end forensics").add_subparsers(dest="action")
    sp = forensics.add_parser("run", parents=[common], help="Decompose, summarize and synthesize")
    sp.add_argument("--instances", default=None)
    sp.add_argument("--recon", default=None)

    sp = sub.add_parser("report", parents=[common], help="Re-render a stored report as text")
    sp.add_argument("--input", required=True)
    return p


def _configure_logging(level: str) -> None:
    numeric = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric, int):
        raise ArgumentError(f"unknown log level {level!r}")
    logging.basicConfig(level=numeric, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(
        getattr(args, "config", None),
        getattr(args, "seed", None),
        getattr(args, "jobs", None),
        getattr(args, "out", None),
        getattr(args, "run_id", None),
    )
    if getattr(args, "progress", False):
        cfg = replace(
            cfg,
            train=replace(cfg.train, progress=True),
            recon=replace(cfg.recon, progress=True),
            decompose=replace(cfg.decompose, progress=True),
            inversion=replace(cfg.inversion, progress=True),
            unlearn=replace(cfg.unlearn, progress=True),
        )
    logger.info("resolved config: %s", json.dumps({"cmd": _command(args), **resolved_config(cfg)}, sort_keys=True))
    return cfg


def _command(args: argparse.Namespace) -> str:
    return " ".join(x for x in (args.cmd, getattr(args, "action", None)) if x)


def _out(args: argparse.Namespace) -> Path:
    out = getattr(args, "out", None)
    if not out:
        raise ArgumentError(f"{_command(args)}: --out is required")
    return resolve_path(out)


def _print(msg: str) -> None:
    print(f"[{__tool_id__}] {msg}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_data_synth(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    d = cfg.data
    ds = make_shapes_dataset(
        args.count or d.count, args.size or d.size, args.classes or d.num_classes, cfg.seeds.data, "all", d.channels
    )
    out = _out(args)
    for part in split_dataset(ds, d.fractions, cfg.seeds.data):
        save_dataset(part, out / part.split)
        _print(f"{part.split}: {len(part)} images -> {out / part.split}")
    return 0


def cmd_zoo_build(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    if not cfg.zoo:
        raise ArgumentError("no [[zoo.entries]] in the profile (use --config)")
    data = args.data or cfg.paths.data
    train, val = load_split(data, "train"), load_split(data, "val")
    entries = build_zoo(cfg.zoo, train, val, cfg.train, cfg.jobs)
    paths = persist_zoo(entries, _out(args))
    _print(f"zoo: {len(paths)} entries -> {_out(args)}")
    return 0


def cmd_zoo_eval(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    entries = [load_entry(p) for p in list_zoo(resolve_path(args.zoo))]
    if not entries:
        raise ArgumentError(f"empty zoo: {resolve_path(args.zoo)}")
    rows = zoo_table(entries, load_split(args.data or cfg.paths.data, "test"))
    print(render_table(rows, ["entry", "label", "family", "arch", "accuracy", "asr"], "[zoo]"), end="")
    if getattr(args, "out", None):
        write_json(_out(args) / "zoo_table.json", rows)
    return 0


def cmd_zoo_instances(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    ic = cfg.instances
    n_trojaned = args.n_trojaned if args.n_trojaned is not None else ic.n_trojaned
    n_validation = args.n_validation if args.n_validation is not None else ic.n_validation
    n_natural = args.n_natural if args.n_natural is not None else ic.n_natural
    n_adversarial = args.n_adversarial if args.n_adversarial is not None else ic.n_adversarial
    clean_target = args.clean_target if args.clean_target is not None else ic.clean_target
    data = load_split(args.data, "test")
    out = _out(args)
    written = 0
    for i, path in enumerate(list_zoo(resolve_path(args.zoo))):
        entry = load_entry(path)
        if entry.label == "trojaned":
            inst = build_instance(entry, data, n_trojaned, n_validation, cfg.seeds.instances + i, n_natural, n_adversarial)
        elif clean_target is not None:
            inst = build_instance(entry, data, n_trojaned, n_validation, cfg.seeds.instances + i, 0, n_trojaned, target=clean_target)
        else:
            continue
        save_instance(inst, out / inst.instance_id, zoo_entry=path)
        written += 1
    if not written:
        raise ArgumentError("no instance built: the zoo has no trojaned entries (use --clean-target for clean ones)")
    _print(f"instances: {written} -> {out}")
    return 0


def cmd_recon_train(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    rc = replace(
        cfg.recon,
        epochs=args.epochs if args.epochs is not None else cfg.recon.epochs,
        noise_level=args.noise_level if args.noise_level is not None else cfg.recon.noise_level,
    )
    train = load_split(args.data, "train")
    r = train_reconstructor(train, rc.epochs, rc.noise_level, cfg.seeds.recon, rc)
    features = train_feature_extractor(train, cfg.seeds.recon, rc)
    out = save_reconstructor(r, _out(args), features)
    _print(f"reconstructor -> {out} {json.dumps(r.metrics, sort_keys=True)}")
    return 0


def cmd_decompose(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    model = load_entry(resolve_path(args.zoo_entry)).model if args.zoo_entry else None
    inst = load_instance(resolve_path(args.instance), model)
    dc = cfg.decompose
    if args.form:
        dc = replace(dc, form=args.form)
    if args.variant:
        dc = replace(dc, variant=args.variant)
    if args.steps:
        dc = replace(dc, steps=args.steps)
    recon, features = load_reconstructor(resolve_path(args.recon))
    result = decompose(inst, recon, dc, features)
    result.metrics["family"] = inst.family
    out = save_result(result, _out(args))
    if inst.clean_truth is not None:
        write_json(out / "quality.json", decomposition_quality(result, inst))
    _print(f"{inst.instance_id}: {result.variant} asr={result.metrics['validation_asr']:.3f} -> {out}")
    return 0


def _result_dirs(root: Path) -> List[Path]:
    if (root / "metrics.json").exists():
        return [root]
    if not root.is_dir():
        raise ConfigurationError(f"decomposition directory not found: {root}")
    return sorted(p for p in root.iterdir() if (p / "metrics.json").exists() and (p / "trigger").is_dir())


def cmd_summarize(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    dirs = sorted({d for root in args.decompositions for d in _result_dirs(resolve_path(root))})
    if len(dirs) < 2:
        raise ArgumentError(f"summarize needs at least two decompositions, found {len(dirs)}")
    results = [load_result(d) for d in dirs]
    vectors = [extract_features(r, str(r.metrics.get("family", ""))) for r in results]
    method = args.method or cfg.summarize.method
    clustering, summaries = summarize_pool(vectors, method, cfg.seeds.cluster)
    out = _out(args)
    for s in summaries:
        save_summary(s, out / f"cluster_{s.cluster_id}")
    families = [v.family or "unknown" for v in vectors]
    write_json(
        out / "clustering.json",
        {
            "method": method,
            "assignments": {v.instance_id: int(lab) for v, lab in zip(vectors, clustering.labels)},
            "purity": cluster_purity(clustering.labels, families),
        },
    )
    _print(f"{len(summaries)} cluster(s) -> {out}")
    return 0


def _summary_dirs(root: Path) -> List[Path]:
    if (root / "summary.json").exists():
        return [root]
    if not root.is_dir():
        raise ConfigurationError(f"summary directory not found: {root}")
    return sorted(p for p in root.iterdir() if (p / "summary.json").exists())


def cmd_synthesize(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    sc = cfg.synthesize
    if args.percentile:
        sc = replace(sc, percentile=tuple(args.percentile))
    if args.z is not None:
        sc = replace(sc, z=args.z, percentile=())
    delta_size = args.delta_size if args.delta_size is not None else sc.delta_size
    delta_pixel = args.delta_pixel if args.delta_pixel is not None else sc.delta_pixel
    dirs = _summary_dirs(resolve_path(args.summaries))
    if not dirs:
        raise ArgumentError(f"no attack summaries under {resolve_path(args.summaries)}")
    out = _out(args)
    for d in dirs:
        s = load_summary(d)
        path = save_scanner(synthesize_scanner(s, delta_size, delta_pixel, sc.resolved_z, cfg.inversion), out / f"cluster_{s.cluster_id}.spec")
        _print(f"scanner -> {path}")
    return 0


def cmd_scan(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    cfg = replace(cfg, paths=replace(cfg.paths, data=args.data, zoo=args.zoo or cfg.paths.zoo))
    if args.model:
        if len(args.scanner) > 1:
            raise ArgumentError("--model scans with one scanner at a time")
        scanner = load_scanner(resolve_path(args.scanner[0])) if args.scanner else vanilla_scanner(args.vanilla_form or "patch", cfg.inversion)
        entry = load_entry(resolve_path(args.model))
        verdict = scan_model(entry.model, scanner, scan_samples(cfg), entry.entry_id, args.victim, cfg.jobs)
        print(json.dumps(verdict.to_dict(), indent=2, sort_keys=True))
        return 0
    for p in args.scanner:
        if not resolve_path(p).exists():
            raise ConfigurationError(f"scanner spec not found: {resolve_path(p)}")
    report = run_scan_eval(cfg, args.scanner, args.vanilla_form, command="scan")
    text = render_report(report)
    print(text, end="")
    if args.report:
        path = resolve_path(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    _print(f"scan report -> {report['outdir']}")
    return 0


def cmd_unlearn(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    entry = load_entry(resolve_path(args.zoo_entry))
    trigger = load_trigger(resolve_path(args.trigger))
    train = load_split(args.data, "train")
    test = load_split(args.data, "test")
    uc = cfg.unlearn
    subset = draw_clean_subset(train, uc.clean_fraction, uc.seed)
    result = unlearn(entry.model, trigger, subset, uc, args.target, eval_data=test, asr_trigger=entry.recipe)
    out = _out(args)
    if not result.failed:
        entry.model = result.model
        entry.metrics = {**entry.metrics, "unlearn_accuracy": result.accuracy, "unlearn_asr": result.asr}
        save_entry(entry, out / "model")
    write_json(out / "unlearn.json", result.to_dict())
    _print(f"unlearn {'FAILED' if result.failed else 'ok'}: asr {result.base_asr:.3f} -> {result.asr:.3f}, accuracy {result.base_accuracy:.3f} -> {result.accuracy:.3f}")
    return 1 if result.failed else 0


def cmd_forensics_run(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    paths = cfg.paths
    if args.instances:
        paths = replace(paths, instances=args.instances)
    if args.recon:
        paths = replace(paths, reconstructor=args.recon)
    cfg = replace(cfg, paths=paths)
    report = run_forensics(cfg, command="forensics run")
    print((Path(report["outdir"]) / "report.txt").read_text(encoding="utf-8"), end="")
    _print(f"done: run_id={cfg.run_id} -> {report['outdir']}")
    return 0


def cmd_report(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    path = resolve_path(args.input)
    if not path.exists():
        raise ConfigurationError(f"report not found: {path}")
    print(render_report(read_json(path)), end="")
    return 0


COMMANDS = {
    "data synth": cmd_data_synth,
    "zoo build": cmd_zoo_build,
    "zoo eval": cmd_zoo_eval,
    "zoo instances": cmd_zoo_instances,
    "recon train": cmd_recon_train,
    "decompose": cmd_decompose,
    "summarize": cmd_summarize,
    "synthesize": cmd_synthesize,
    "scan": cmd_scan,
    "unlearn": cmd_unlearn,
    "forensics run": cmd_forensics_run,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_help()
        return 0
    args = parser.parse_args(argv)
    handler = COMMANDS.get(_command(args))
    if handler is None:
        parser.print_help(sys.stderr)
        return 2

    try:
        _configure_logging(getattr(args, "log_level", "INFO"))
        cfg = _config(args)
        return handler(args, cfg)
    except (ArgumentError, ConfigurationError, FormatError) as e:
        # Contract: usage / configuration problems exit 2 with the message on stderr
        sys.stderr.write(f"[{__tool_id__}] error: {e}\n")
        return 2
    except ForensicsError as e:
        sys.stderr.write(f"[{__tool_id__}] stage failed: {e.__class__.__name__}: {e}\n")
        return 1
    except Exception as e:
        logger.debug("unexpected failure in %r", _command(args), exc_info=True)
        sys.stderr.write(f"[{__tool_id__}] stage failed: {e.__class__.__name__}: {e}\n")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

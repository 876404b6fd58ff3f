from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from scripts import trojan_forensics as cli
from scripts.summarizer import AttackSummary, save_summary

pytestmark = pytest.mark.contract


def test_cli_help_runs(run_cli):
    res = run_cli(["--help"])
    assert res.returncode == 0, res.stderr
    assert "forensics" in res.stdout.lower()


def test_cli_without_arguments_prints_help(run_cli):
    res = run_cli([])
    assert res.returncode == 0
    assert "usage" in res.stdout.lower()


@pytest.mark.parametrize("args", [["zoo"], ["forensics"], ["nonsense"]])
def test_incomplete_or_unknown_command_exits_2(run_cli, args):
    res = run_cli(args)
    assert res.returncode == 2, res.stdout + res.stderr


def test_missing_report_names_the_path(run_cli, tmp_path):
    missing = tmp_path / "nope" / "scan_report.json"
    res = run_cli(["report", "--input", missing])
    assert res.returncode == 2
    assert str(missing) in res.stderr


def test_missing_profile_exits_2(run_cli, tmp_path):
    missing = tmp_path / "absent.toml"
    res = run_cli(["report", "--input", missing, "--config", missing])
    assert res.returncode == 2
    assert "absent.toml" in res.stderr


def test_invalid_profile_exits_2(run_cli, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[summarize]\nmethod = 'spectral'\n", encoding="utf-8")
    report = tmp_path / "r.json"
    report.write_text(json.dumps({"rows": []}), encoding="utf-8")
    res = run_cli(["report", "--input", report, "--config", bad])
    assert res.returncode == 2
    assert "method" in res.stderr


def test_unknown_log_level_exits_2(run_cli, tmp_path):
    report = tmp_path / "r.json"
    report.write_text(json.dumps({"rows": []}), encoding="utf-8")
    res = run_cli(["report", "--input", report, "--log-level", "chatty"])
    assert res.returncode == 2


def test_forensics_run_on_empty_instance_dir_exits_2(run_cli, tmp_path):
    empty = tmp_path / "instances"
    empty.mkdir()
    res = run_cli(["forensics", "run", "--instances", empty, "--recon", tmp_path / "recon"], with_out=True)
    assert res.returncode == 2
    assert "no attack instances" in res.stderr


def test_forensics_run_missing_instances_dir_names_it(run_cli, tmp_path):
    missing = tmp_path / "ghost"
    res = run_cli(["forensics", "run", "--instances", missing, "--recon", tmp_path / "recon"], with_out=True)
    assert res.returncode == 2
    assert str(missing) in res.stderr


def test_scan_with_missing_scanner_exits_2(run_cli, tmp_path):
    spec = tmp_path / "missing.spec"
    res = run_cli(["scan", "--zoo", tmp_path / "zoo", "--data", tmp_path / "data", "--scanner", spec], with_out=True)
    assert res.returncode == 2
    assert str(spec) in res.stderr


def test_scan_without_any_scanner_exits_2(run_cli, tmp_path):
    (tmp_path / "zoo").mkdir()
    res = run_cli(["scan", "--zoo", tmp_path / "zoo", "--data", tmp_path / "data"], with_out=True)
    assert res.returncode == 2


def test_report_rerenders_scan_table(run_cli, tmp_path):
    rows = [
        {"scanner": "vanilla_patch", "family": "all", "TP": 3, "FN": 1, "TN": 4, "FP": 0, "ACC": 0.875, "PN_REASR": 0.9, "CL_REASR": 0.2},
        {"scanner": "cluster_0_patch_binomial", "family": "all", "TP": 4, "FN": 0, "TN": 4, "FP": 0, "ACC": 1.0, "PN_REASR": 0.97, "CL_REASR": None},
    ]
    p = tmp_path / "scan_report.json"
    p.write_text(json.dumps({"rows": rows}), encoding="utf-8")
    res = run_cli(["report", "--input", p])
    assert res.returncode == 0, res.stderr
    for col in ("TP", "FN", "TN", "FP", "ACC"):
        assert col in res.stdout
    assert "0.875" in res.stdout
    assert "cluster_0_patch_binomial" in res.stdout


def test_data_synth_writes_three_splits(run_cli, tmp_path):
    res = run_cli(["data", "synth", "--count", "40", "--size", "16", "--classes", "4", "--seed", "3"], with_out=True)
    assert res.returncode == 0, res.stderr
    for split in ("train", "val", "test"):
        meta = json.loads((res.outdir / split / "meta.json").read_text(encoding="utf-8"))
        assert meta["split"] == split
        assert meta["num_classes"] == 4


def test_resolved_config_is_logged(run_cli, tmp_path):
    res = run_cli(["data", "synth", "--count", "20", "--size", "16", "--classes", "2"], with_out=True)
    assert res.returncode == 0, res.stderr
    line = next(ln for ln in res.stderr.splitlines() if "resolved config:" in ln)
    payload = json.loads(line.split("resolved config:", 1)[1])
    assert payload["cmd"] == "data synth"
    assert "seeds" in payload and "inversion" in payload


def test_synthesize_from_summary_dir(run_cli, tmp_path: Path):
    summary = AttackSummary(
        cluster_id=0,
        kind="patch_binomial",
        mu={"mask_size": np.array([1316.83]), "centroid_i": np.array([20.0]), "centroid_j": np.array([21.0]), "pattern": np.full((3, 8, 8), 0.5)},
        sigma={"mask_size": np.array([283.58]), "centroid_i": np.array([2.0]), "centroid_j": np.array([2.0]), "pattern": np.full((3, 8, 8), 0.1)},
        member_count=3,
    )
    save_summary(summary, tmp_path / "summaries" / "cluster_0")
    res = run_cli(["synthesize", "--summary", tmp_path / "summaries", "--z", "1.0"], with_out=True)
    assert res.returncode == 0, res.stderr
    spec = json.loads((res.outdir / "cluster_0.spec").read_text(encoding="utf-8"))
    assert spec["form"] == "patch"
    size = next(s for s in spec["specs"] if s["feature"] == "mask_size")
    assert size["z"] == 1.0 and size["delta"] == 100.0
    assert size["mu"] == pytest.approx(1316.83)


def test_unexpected_error_exits_1_without_traceback(monkeypatch, capsys, tmp_path):
    # erreur hors hiérarchie ForensicsError : code 1, message court sur stderr
    def boom(args, cfg):
        raise RuntimeError("shape '[-1, 3, 9, 16, 16]' is invalid")

    monkeypatch.setattr(cli, "_configure_logging", lambda level: None)
    monkeypatch.setitem(cli.COMMANDS, "report", boom)
    assert cli.main(["report", "--input", str(tmp_path / "r.json")]) == 1
    err = capsys.readouterr().err
    assert "stage failed: RuntimeError" in err
    assert "Traceback" not in err


def test_decompose_accepts_samples_alias():
    args = cli.build_parser().parse_args(["decompose", "--samples", "inst", "--recon", "r", "--form", "auto"])
    assert args.instance == "inst"


def test_zoo_build_reads_data_dir_from_profile(run_cli, tmp_path):
    missing = tmp_path / "profile_data"
    prof = tmp_path / "zoo.toml"
    prof.write_text(f'[paths]\ndata = "{missing.as_posix()}"\n\n[[zoo.entries]]\nfamily = "clean"\n', encoding="utf-8")
    res = run_cli(["zoo", "build", "--config", prof], with_out=True)
    assert res.returncode == 2
    assert str(missing) in res.stderr

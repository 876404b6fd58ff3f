import os
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator

import pytest
import torch

from scripts.reconstructor import FeatureExtractor, Reconstructor
from scripts.zoo_factory import (
    ARCHITECTURES,
    Dataset,
    TrainConfig,
    ZooEntry,
    build_instance,
    make_shapes_dataset,
    poison_and_train,
    split_dataset,
    train_clean,
)

from .config import CLI_PATH, FORENSICS_TRAIN_EPOCHS, REPO_ROOT, TINY_CLASSES, TINY_COUNT, TINY_SIZE
from .oracles import ORACLE_ARCH, CornerOracle, corner_recipe


def _run(cmd, cwd=None) -> subprocess.CompletedProcess:
    env = dict(os.environ)
    env["PYTHONPATH"] = os.pathsep.join([str(REPO_ROOT), env.get("PYTHONPATH", "")]).rstrip(os.pathsep)
    return subprocess.run(cmd, capture_output=True, text=True, encoding="utf-8", cwd=cwd, env=env)


@dataclass
class CLIResult:
    """Résultat CLI compatible avec deux patterns de tests.

    - Pattern A: r = run_cli(...); r.returncode / r.stdout / r.stderr
    - Pattern B: proc, outdir = run_cli(...)
    """
    proc: subprocess.CompletedProcess
    outdir: Path

    @property
    def returncode(self) -> int:
        return int(self.proc.returncode)

    @property
    def stdout(self) -> str:
        return self.proc.stdout or ""

    @property
    def stderr(self) -> str:
        return self.proc.stderr or ""

    def __iter__(self) -> Iterator:
        yield self.proc
        yield self.outdir


@pytest.fixture(scope="session")
def cli_path():
    """
    Mode dev (par défaut): si le CLI est absent, on skip les tests CLI.
    Mode strict: FORENSICS_STRICT_CLI=1 rend l'absence bloquante.
    """
    strict = os.getenv("FORENSICS_STRICT_CLI", "0").strip() == "1"
    if not CLI_PATH.exists():
        msg = f"CLI introuvable: {CLI_PATH}"
        if strict:
            raise AssertionError(msg)
        pytest.skip(msg + " (mode dev: tests CLI skippés)")
    return str(CLI_PATH)


@pytest.fixture
def run_cli(tmp_path, cli_path):
    """Exécute le CLI comme une boîte noire depuis la racine du dépôt.

    - `--out` est ajouté (tmp_path/out) si absent et si `with_out=True`.
    - Retour: CLIResult (proxy CompletedProcess + outdir, itérable).
    """

    def _runner(args, outdir=None, with_out=False) -> CLIResult:
        outdir_p = Path(outdir) if outdir else (tmp_path / "out")
        cmd = ["python3", cli_path] + [str(a) for a in args]
        if with_out and "--out" not in cmd:
            cmd += ["--out", str(outdir_p)]
        proc = _run(cmd, cwd=str(REPO_ROOT))
        return CLIResult(proc=proc, outdir=outdir_p)

    return _runner


# ---------------------------------------------------------------------------
# données et modèles minuscules (session)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def tiny_data() -> Dict[str, Dataset]:
    ds = make_shapes_dataset(TINY_COUNT, size=TINY_SIZE, num_classes=TINY_CLASSES, seed=0)
    train, val, test = split_dataset(ds, (0.8, 0.1, 0.1), seed=0)
    return {"train": train, "val": val, "test": test}


@pytest.fixture(scope="session")
def tiny_train_cfg() -> TrainConfig:
    return TrainConfig(epochs=FORENSICS_TRAIN_EPOCHS, batch_size=32, width=8)


@pytest.fixture(scope="session")
def clean_entry(tiny_data, tiny_train_cfg) -> ZooEntry:
    entry = train_clean(tiny_data["train"], tiny_train_cfg.epochs, 0, tiny_train_cfg, tiny_data["val"])
    entry.entry_id = "000_clean_clean"
    return entry


@pytest.fixture(scope="session")
def patch_entry(tiny_data, tiny_train_cfg) -> ZooEntry:
    entry = poison_and_train(tiny_data["train"], corner_recipe(), 0.1, tiny_train_cfg.epochs, 1, tiny_train_cfg, tiny_data["val"])
    entry.entry_id = "001_trojaned_patch"
    return entry


# ---------------------------------------------------------------------------
# oracle à porte dérobée connue
# ---------------------------------------------------------------------------


@pytest.fixture
def oracle_arch(monkeypatch):
    """Enregistre l'oracle pour que save/load_classifier le reconstruisent."""
    monkeypatch.setitem(ARCHITECTURES, ORACLE_ARCH, CornerOracle)
    return ORACLE_ARCH


@pytest.fixture
def oracle() -> CornerOracle:
    return CornerOracle(num_classes=TINY_CLASSES, target=0, size=3, image_size=TINY_SIZE).eval()


@pytest.fixture
def oracle_entry(oracle) -> ZooEntry:
    return ZooEntry(model=oracle, label="trojaned", recipe=corner_recipe(), entry_id="000_trojaned_patch")


@pytest.fixture
def oracle_instance(oracle_entry, tiny_data):
    return build_instance(oracle_entry, tiny_data["test"], n_trojaned=4, n_validation=24, seed=0)


@pytest.fixture
def tiny_recon() -> Reconstructor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        r = Reconstructor(in_channels=3, width=8, noise_level=0.1)
    return r.eval().requires_grad_(False)


@pytest.fixture
def oracle_features(oracle) -> FeatureExtractor:
    return FeatureExtractor(oracle)

"""Seuils de bureau sur un zoo 32x32 entraîné (FORENSICS_DESK=1).

Décomposition par famille, choix de forme, pureté du clustering,
scanner synthétisé contre vanilla, robustesse (mauvaises classifications
naturelles, exemples adverses) et unlearning.
"""

from __future__ import annotations

from typing import Dict, List, Tuple

import pytest

from scripts.decomposer import VARIANTS, DecompositionConfig, DecompositionResult, decompose, select_form, variant_form
from scripts.reconstructor import FeatureExtractor, ReconConfig, Reconstructor, train_feature_extractor, train_reconstructor
from scripts.remover import UnlearnConfig, draw_clean_subset, unlearn
from scripts.scanner import InversionConfig, SynthesizedScanner, evaluate_scanner, scan_model, synthesize_scanner, vanilla_scanner
from scripts.summarizer import METHODS, FeatureVector, cluster_features, cluster_purity, extract_features, summarize_pool
from scripts.zoo_factory import (
    FAMILIES,
    PATCHING_FAMILIES,
    AttackInstance,
    Dataset,
    InjectionRecipe,
    TrainConfig,
    ZooEntry,
    asr,
    build_instance,
    make_shapes_dataset,
    poison_and_train,
    split_dataset,
    train_clean,
)

from .config import DESK_CLASSES, DESK_COUNT, DESK_EPOCHS, DESK_SIZE, DESK_STEPS, DESK_ZOO, FORENSICS_DESK

pytestmark = [
    pytest.mark.acceptance,
    pytest.mark.slow,
    pytest.mark.skipif(not FORENSICS_DESK, reason="desk-scale run (set FORENSICS_DESK=1)"),
]

TARGET = 0
POISON_RATE = 0.1
N_TROJANED = 10
N_VALIDATION = 100

# seuils
DECOMPOSED_ASR = 0.85
FORM_GAP = 0.1
PURITY = 0.9
VANILLA_ON_WARP = 0.70
SYNTHESIZED_ON_WARP = 0.85
NATURAL_ASR = 0.8
ADVERSARIAL_ASR = 0.7
REMOVED_ASR = 0.15
MAX_DROP = 0.05
ZOO_ASR = 0.95


def _form(family: str) -> str:
    return "patch" if family in PATCHING_FAMILIES else "transform"


# ---------------------------------------------------------------------------
# zoo du bureau (module)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_data() -> Dict[str, Dataset]:
    ds = make_shapes_dataset(DESK_COUNT, size=DESK_SIZE, num_classes=DESK_CLASSES, seed=0)
    train, val, test = split_dataset(ds, (0.8, 0.1, 0.1), seed=0)
    return {"train": train, "val": val, "test": test}


@pytest.fixture(scope="module")
def desk_cfg() -> TrainConfig:
    return TrainConfig(epochs=DESK_EPOCHS, batch_size=64, width=32)


@pytest.fixture(scope="module")
def desk_recon(desk_data) -> Tuple[Reconstructor, FeatureExtractor]:
    cfg = ReconConfig(epochs=10, noise_level=0.2, feature_epochs=DESK_EPOCHS)
    r = train_reconstructor(desk_data["train"], cfg.epochs, cfg.noise_level, seed=0, cfg=cfg)
    return r, train_feature_extractor(desk_data["train"], seed=1, cfg=cfg)


@pytest.fixture(scope="module")
def trojaned(desk_data, desk_cfg):
    """Modèles empoisonnés par (famille, graine), entraînés à la demande."""
    cache: Dict[Tuple[str, int], ZooEntry] = {}

    def _get(family: str, seed: int = 0) -> ZooEntry:
        if (family, seed) not in cache:
            recipe = InjectionRecipe(family, TARGET, {})
            entry = poison_and_train(desk_data["train"], recipe, POISON_RATE, desk_cfg.epochs, 300 + seed, desk_cfg, desk_data["val"])
            entry.entry_id = f"{family}_{seed}"
            cache[family, seed] = entry
        return cache[family, seed]

    return _get


@pytest.fixture(scope="module")
def decomposed(trojaned, desk_data, desk_recon):
    cache: Dict[Tuple[str, int, int], Tuple[AttackInstance, DecompositionResult]] = {}
    recon, features = desk_recon

    def _get(family: str, model_seed: int = 0, instance_seed: int = 0) -> Tuple[AttackInstance, DecompositionResult]:
        key = (family, model_seed, instance_seed)
        if key not in cache:
            inst = build_instance(trojaned(family, model_seed), desk_data["test"], N_TROJANED, N_VALIDATION, seed=instance_seed)
            cfg = DecompositionConfig(steps=DESK_STEPS, form=_form(family), seed=instance_seed)
            cache[key] = (inst, decompose(inst, recon, cfg, features))
        return cache[key]

    return _get


@pytest.fixture(scope="module")
def clean_zoo(desk_data, desk_cfg) -> List[ZooEntry]:
    entries = []
    for i in range(DESK_ZOO):
        entry = train_clean(desk_data["train"], desk_cfg.epochs, 500 + i, desk_cfg, desk_data["val"])
        entry.entry_id = f"{i:03d}_clean_clean"
        entries.append(entry)
    return entries


@pytest.fixture(scope="module")
def trojaned_zoo(desk_data, desk_cfg):
    """Modèles scannés ; graines disjointes de celles des modèles de forensics."""
    cache: Dict[str, List[ZooEntry]] = {}

    def _get(family: str) -> List[ZooEntry]:
        if family not in cache:
            recipe = InjectionRecipe(family, TARGET, {})
            cache[family] = []
            for i in range(DESK_ZOO):
                entry = poison_and_train(desk_data["train"], recipe, POISON_RATE, desk_cfg.epochs, 600 + i, desk_cfg, desk_data["val"])
                entry.entry_id = f"{DESK_ZOO + i:03d}_trojaned_{family}"
                cache[family].append(entry)
        return cache[family]

    return _get


def _largest_summary_scanner(vectors: List[FeatureVector]) -> SynthesizedScanner:
    _, summaries = summarize_pool(vectors)
    best = max(summaries, key=lambda s: (s.member_count, -s.cluster_id))
    return synthesize_scanner(best, config=InversionConfig())


# ---------------------------------------------------------------------------
# décomposition et choix de forme
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("family", FAMILIES)
def test_decomposition_quality_per_family(family, trojaned, decomposed):
    entry = trojaned(family)
    assert entry.metrics["val_asr"] >= ZOO_ASR, entry.metrics

    inst, result = decomposed(family)
    assert result.metrics["clean_accuracy_basis"] == "labels"
    assert result.metrics["clean_accuracy"] == 1.0, result.metrics
    assert result.metrics["validation_holdout"] > 0
    assert result.metrics["validation_asr"] >= DECOMPOSED_ASR, result.metrics
    assert result.metrics["final_loss"] <= 0.5 * result.metrics["initial_loss"]
    assert result.clean.shape == inst.trojaned.shape


@pytest.mark.parametrize("family", ["patch", "filter_linear", "warp"])
def test_winning_form_beats_every_losing_variant(family, trojaned, desk_data, desk_recon):
    recon, features = desk_recon
    inst = build_instance(trojaned(family), desk_data["test"], N_TROJANED, N_VALIDATION, seed=0)
    sel = select_form(inst, recon, DecompositionConfig(steps=DESK_STEPS), features=features)
    assert sel.form == _form(family), sel.to_dict()
    winner = sel.probe_asr[sel.variant]
    for variant in VARIANTS:
        if variant_form(variant) != sel.form:
            assert winner - sel.probe_asr[variant] >= FORM_GAP, sel.to_dict()


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pool_vectors(decomposed) -> List[FeatureVector]:
    vectors = []
    for family in ("patch", "blend", "filter_linear"):
        for s in range(5):
            _, result = decomposed(family, instance_seed=s)
            vectors.append(extract_features(result, family))
    return vectors


@pytest.mark.parametrize("method", METHODS)
def test_cluster_purity_under_every_method(method, pool_vectors):
    clustering = cluster_features(pool_vectors, method, seed=0)
    assert cluster_purity(clustering.labels, [v.family for v in pool_vectors]) >= PURITY


# ---------------------------------------------------------------------------
# scanners
# ---------------------------------------------------------------------------


def _forensics_scanner(decomposed, family: str) -> SynthesizedScanner:
    return _largest_summary_scanner([extract_features(decomposed(family, model_seed=s)[1], family) for s in range(3)])


def test_synthesized_scanner_beats_vanilla_on_warp(decomposed, clean_zoo, trojaned_zoo, desk_data):
    scanner = _forensics_scanner(decomposed, "warp")
    assert scanner.form == "transform"
    zoo = clean_zoo + trojaned_zoo("warp")
    vanilla = evaluate_scanner(zoo, vanilla_scanner("patch", InversionConfig()), desk_data["val"])
    synthesized = evaluate_scanner(zoo, scanner, desk_data["val"])
    assert vanilla["ACC"] <= VANILLA_ON_WARP, vanilla
    assert synthesized["ACC"] >= SYNTHESIZED_ON_WARP, synthesized


def test_synthesized_scanner_not_worse_on_patch(decomposed, clean_zoo, trojaned_zoo, desk_data):
    scanner = _forensics_scanner(decomposed, "patch")
    zoo = clean_zoo + trojaned_zoo("patch")
    vanilla = evaluate_scanner(zoo, vanilla_scanner("patch", InversionConfig()), desk_data["val"])
    synthesized = evaluate_scanner(zoo, scanner, desk_data["val"])
    assert synthesized["ACC"] >= vanilla["ACC"], (synthesized, vanilla)


# ---------------------------------------------------------------------------
# robustesse
# ---------------------------------------------------------------------------


def test_natural_misclassifications_keep_trigger(trojaned, desk_data, desk_recon):
    recon, features = desk_recon
    inst = build_instance(trojaned("patch"), desk_data["test"], N_TROJANED, N_VALIDATION, seed=0, n_natural=5)
    assert inst.kinds.count("natural") == 5
    result = decompose(inst, recon, DecompositionConfig(steps=DESK_STEPS, form="patch"), features)
    assert result.metrics["validation_asr"] >= NATURAL_ASR, result.metrics


def test_adversarial_instances_on_clean_models(clean_zoo, desk_data, desk_recon):
    recon, features = desk_recon
    vectors = []
    for entry in clean_zoo:
        inst = build_instance(entry, desk_data["test"], N_TROJANED, N_VALIDATION, seed=0, n_adversarial=N_TROJANED, target=TARGET)
        result = decompose(inst, recon, DecompositionConfig(steps=DESK_STEPS), features)
        assert result.metrics["validation_asr"] < ADVERSARIAL_ASR, (entry.entry_id, result.metrics)
        vectors.append(extract_features(result, "clean"))

    scanner = _largest_summary_scanner(vectors)
    for entry in clean_zoo:
        verdict = scan_model(entry.model, scanner, desk_data["val"], model_id=entry.entry_id)
        assert not verdict.trojaned, verdict.to_dict()


# ---------------------------------------------------------------------------
# unlearning
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("family", ["patch", "blend"])
def test_unlearning_with_decomposed_trigger(family, trojaned, decomposed, desk_data):
    entry = trojaned(family)
    test = desk_data["test"]
    assert asr(entry.model, test, entry.recipe, TARGET) >= ZOO_ASR

    _, result = decomposed(family)
    subset = draw_clean_subset(desk_data["train"], 0.05, seed=0)
    cfg = UnlearnConfig(clean_fraction=0.05, epochs=10, max_drop=MAX_DROP, seed=0)
    removal = unlearn(entry.model, result.trigger, subset, cfg, target=TARGET, eval_data=test, asr_trigger=entry.recipe)

    assert not removal.failed, removal.to_dict()
    assert removal.base_asr >= ZOO_ASR
    assert removal.asr <= REMOVED_ASR, removal.to_dict()
    assert removal.base_accuracy - removal.accuracy <= MAX_DROP

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from scripts.bfl_container import read_json, write_json
from scripts.errors import ArgumentError, ConfigurationError, DimensionError, FormatError
from scripts.trigger_algebra import PatchTrigger, TransformTrigger, identity_transform, stamp
from scripts.zoo_factory import (
    MAX_WARP_DISPLACEMENT,
    PGD_EPS,
    Dataset,
    InjectionRecipe,
    TrainConfig,
    ZooEntry,
    ZooSpecEntry,
    apply_recipe,
    asr,
    build_instance,
    build_zoo,
    load_dataset,
    load_entry,
    load_instance,
    load_zoo,
    make_shapes_dataset,
    persist_zoo,
    pgd_targeted,
    poison_and_train,
    poison_indices,
    predict,
    recipe_trigger,
    save_dataset,
    save_entry,
    save_instance,
    split_dataset,
    warp_grid,
    zoo_table,
)

from .oracles import CornerOracle, corner_recipe

SHAPE = (3, 16, 16)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def test_shapes_dataset_is_seeded_and_in_range():
    a = make_shapes_dataset(30, size=16, num_classes=4, seed=5)
    b = make_shapes_dataset(30, size=16, num_classes=4, seed=5)
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
    assert a.images.shape == (30, 3, 16, 16)
    assert float(a.images.min()) >= 0.0 and float(a.images.max()) <= 1.0
    assert int(a.labels.max()) < 4


def test_grayscale_dataset():
    ds = make_shapes_dataset(5, size=16, num_classes=3, channels=1)
    assert ds.image_shape == (1, 16, 16)


def test_dataset_validation():
    with pytest.raises(ConfigurationError):
        make_shapes_dataset(10, num_classes=11)
    with pytest.raises(ArgumentError):
        make_shapes_dataset(0)
    with pytest.raises(DimensionError):
        Dataset(torch.zeros(3, 16, 16), torch.zeros(3, dtype=torch.long))
    with pytest.raises(ConfigurationError):
        Dataset(torch.zeros(2, 3, 4, 4), torch.tensor([0, 7]), num_classes=4)


def test_split_partitions_everything(tiny_data):
    total = sum(len(d) for d in tiny_data.values())
    assert total == 600
    assert [d.split for d in tiny_data.values()] == ["train", "val", "test"]
    with pytest.raises(ConfigurationError):
        split_dataset(tiny_data["test"], (0.5, 0.6))


def test_dataset_persistence(tmp_path, tiny_data):
    back = load_dataset(save_dataset(tiny_data["val"], tmp_path / "val"))
    assert back.split == "val" and back.num_classes == tiny_data["val"].num_classes
    assert torch.allclose(back.images, tiny_data["val"].images)
    assert torch.equal(back.labels, tiny_data["val"].labels)


# ---------------------------------------------------------------------------
# recipes
# ---------------------------------------------------------------------------


def test_unknown_family_is_rejected():
    with pytest.raises(ConfigurationError):
        InjectionRecipe("rainbow", 0)


@pytest.mark.parametrize(
    "family,params,form",
    [
        ("patch", {"size": 4, "position": "top_left", "pattern": "checker"}, "patch"),
        ("blend", {"ratio": 0.2}, "patch"),
        ("sinusoid", {"amplitude": 0.3}, "patch"),
        ("filter_linear", {"scale": [1.3, 1.0, 0.7]}, "transform"),
    ],
)
def test_recipe_triggers_reproduce_apply_recipe(family, params, form):
    recipe = InjectionRecipe(family, 1, params)
    trig = recipe_trigger(recipe, SHAPE)
    assert recipe.form == form == trig.form
    x = torch.rand(4, *SHAPE)
    assert torch.allclose(apply_recipe(x, recipe), stamp(x, trig))


def test_solid_patch_recipe_covers_its_square():
    trig = recipe_trigger(corner_recipe(size=3), SHAPE)
    assert isinstance(trig, PatchTrigger)
    assert float(trig.mask.sum()) == 9.0
    assert float(trig.mask[12:15, 12:15].min()) == 1.0


def test_blend_mask_is_uniform_ratio():
    trig = recipe_trigger(InjectionRecipe("blend", 0, {"ratio": 0.15}), SHAPE)
    assert torch.allclose(trig.mask, torch.full((16, 16), 0.15))


def test_filter_linear_is_a_scaled_identity():
    trig = recipe_trigger(InjectionRecipe("filter_linear", 0, {"scale": [2.0, 1.0, 0.5], "offset": [0.1, 0.0, 0.0]}), SHAPE)
    assert isinstance(trig, TransformTrigger)
    ident = identity_transform(SHAPE).weights
    assert torch.allclose(trig.weights[1], ident[1])
    assert torch.allclose(trig.weights[0], 2.0 * ident[0])
    assert torch.allclose(trig.biases[0], torch.full((16, 16), 0.1))


def test_warp_is_small_and_seeded():
    recipe = InjectionRecipe("warp", 2, {"strength": 1.0, "grid": 4, "seed": 3})
    assert recipe.form == "transform"
    assert recipe_trigger(recipe, SHAPE) is None
    g1, g2 = warp_grid(recipe, 16, 16), warp_grid(recipe, 16, 16)
    assert torch.equal(g1, g2)
    ys, xs = torch.meshgrid(torch.linspace(-1, 1, 16), torch.linspace(-1, 1, 16), indexing="ij")
    dx = (g1[0, ..., 0] - xs) * 15 / 2
    dy = (g1[0, ..., 1] - ys) * 15 / 2
    mean_disp = float(torch.sqrt(dx**2 + dy**2).mean())
    assert mean_disp == pytest.approx(1.0, abs=1e-3)
    x = torch.rand(2, *SHAPE)
    out = apply_recipe(x, recipe)
    assert out.shape == x.shape
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_warp_strength_limits():
    with pytest.raises(ConfigurationError):
        warp_grid(InjectionRecipe("warp", 0, {"strength": MAX_WARP_DISPLACEMENT + 0.5}), 16, 16)
    with pytest.raises(ConfigurationError):
        warp_grid(InjectionRecipe("warp", 0, {"grid": 1}), 16, 16)


def test_patch_leaving_the_image_is_rejected():
    with pytest.raises(ConfigurationError):
        recipe_trigger(InjectionRecipe("patch", 0, {"size": 8, "position": [12, 12]}), SHAPE)


# ---------------------------------------------------------------------------
# poisoning and training
# ---------------------------------------------------------------------------


def test_poison_indices_count_and_eligibility():
    labels = torch.tensor([0, 1, 2, 3] * 25)
    recipe = InjectionRecipe("patch", 0, {})
    idx = poison_indices(labels, recipe, 0.1, seed=0)
    assert idx.size == math.ceil(0.1 * 100)
    assert (labels[torch.from_numpy(idx)] != 0).all()
    assert np.array_equal(idx, poison_indices(labels, recipe, 0.1, seed=0))

    victim = InjectionRecipe("patch", 0, {}, victim=2)
    idx = poison_indices(labels, victim, 0.5, seed=1)
    assert idx.size == 25
    assert (labels[torch.from_numpy(idx)] == 2).all()


def test_poison_rate_must_stay_below_one(tiny_data, tiny_train_cfg):
    with pytest.raises(ArgumentError):
        poison_and_train(tiny_data["train"], corner_recipe(), 1.0, 1, 0, tiny_train_cfg)


def test_zoo_entry_labels_match_recipes(oracle):
    with pytest.raises(ConfigurationError):
        ZooEntry(model=oracle, label="trojaned")
    with pytest.raises(ConfigurationError):
        ZooEntry(model=oracle, label="clean", recipe=corner_recipe())
    with pytest.raises(ConfigurationError):
        ZooEntry(model=oracle, label="suspicious")


def test_trained_entries_carry_metrics(clean_entry, patch_entry):
    assert clean_entry.label == "clean" and clean_entry.recipe is None
    assert 0.0 <= clean_entry.metrics["val_accuracy"] <= 1.0
    assert patch_entry.label == "trojaned"
    assert patch_entry.metrics["poisoned"] > 0
    assert "val_asr" in patch_entry.metrics


def test_entry_persistence_reproduces_predictions(tmp_path, patch_entry, tiny_data):
    back = load_entry(save_entry(patch_entry, tmp_path / "001_trojaned_patch"))
    assert back.recipe == patch_entry.recipe
    assert back.entry_id == "001_trojaned_patch"
    x = tiny_data["test"].images
    assert torch.equal(predict(back.model, x), predict(patch_entry.model, x))


@pytest.mark.parametrize("recipe", [{"family": "patch"}, "patch", {"family": "laser", "target": 0}, {"family": "patch", "target": "zero"}])
def test_malformed_recipe_is_a_format_error(tmp_path, patch_entry, recipe):
    d = save_entry(patch_entry, tmp_path / "001_trojaned_patch")
    meta = read_json(d / "meta.json")
    meta["recipe"] = recipe
    write_json(d / "meta.json", meta)
    with pytest.raises(FormatError) as ei:
        load_entry(d)
    assert "meta.json" in str(ei.value)
    assert "recipe" in ei.value.reason

def test_zoo_persistence_and_table(tmp_path, clean_entry, patch_entry, tiny_data):
    persist_zoo([clean_entry, patch_entry], tmp_path / "zoo")
    zoo = load_zoo(tmp_path / "zoo")
    assert [e.label for e in zoo] == ["clean", "trojaned"]
    rows = zoo_table(zoo, tiny_data["test"])
    assert "asr" not in rows[0] and "asr" in rows[1]
    assert rows[1]["family"] == "patch"


def test_build_zoo_seeds_each_entry(tiny_data):
    small = tiny_data["train"].subset(list(range(64)))
    specs = [ZooSpecEntry("clean", count=2, seed=4)]
    cfg = TrainConfig(epochs=1, batch_size=32, width=4)
    entries = build_zoo(specs, small, None, cfg)
    assert [e.seed for e in entries] == [4, 5]
    assert [e.entry_id for e in entries] == ["000_clean_clean", "001_clean_clean"]


def test_asr_with_the_oracle(oracle, tiny_data):
    assert asr(oracle, tiny_data["test"], corner_recipe(), 0) == 1.0
    with pytest.raises(ArgumentError):
        asr(oracle, tiny_data["test"].subset(torch.nonzero(tiny_data["test"].labels == 0).flatten()), corner_recipe(), 0)


# ---------------------------------------------------------------------------
# attack instances
# ---------------------------------------------------------------------------


def test_instance_from_oracle(oracle_instance, tiny_data):
    inst = oracle_instance
    assert inst.trojaned.shape == (4, *SHAPE)
    assert inst.kinds == ["trojaned"] * 4
    assert inst.flagged == []
    assert inst.family == "patch"
    assert isinstance(inst.trigger_truth, PatchTrigger)
    # validation samples never reuse a trojaned sample's clean source
    for x in inst.clean_truth:
        assert not any(torch.equal(x, v) for v in inst.validation)
    assert (inst.source_labels != inst.target).all()


def test_instance_with_adversarial_examples(oracle_entry, tiny_data):
    inst = build_instance(oracle_entry, tiny_data["test"], n_trojaned=4, n_validation=10, n_adversarial=2)
    assert inst.kinds == ["trojaned", "trojaned", "adversarial", "adversarial"]
    delta = (inst.trojaned[2:] - inst.clean_truth[2:]).abs().max()
    assert float(delta) <= PGD_EPS + 1e-6


def test_instance_argument_errors(oracle, oracle_entry, tiny_data):
    clean = ZooEntry(model=oracle, label="clean")
    with pytest.raises(ArgumentError):
        build_instance(clean, tiny_data["test"])
    with pytest.raises(ArgumentError):
        build_instance(clean, tiny_data["test"], n_trojaned=2, target=0)
    with pytest.raises(ArgumentError):
        build_instance(oracle_entry, tiny_data["test"], n_trojaned=2, n_natural=2, n_adversarial=1)


def test_pgd_stays_in_the_ball(oracle, tiny_data):
    x = tiny_data["test"].images[:3]
    adv = pgd_targeted(oracle, x, target=0, steps=5)
    assert float((adv - x).abs().max()) <= PGD_EPS + 1e-6
    assert float(adv.min()) >= 0.0 and float(adv.max()) <= 1.0


def test_instance_persistence_references_the_zoo_entry(tmp_path, oracle_arch, oracle_entry, oracle_instance):
    entry_dir = save_entry(oracle_entry, tmp_path / "zoo" / oracle_entry.entry_id)
    d = save_instance(oracle_instance, tmp_path / "inst", zoo_entry=entry_dir)
    back = load_instance(d)
    assert isinstance(back.model, CornerOracle)
    assert back.target == oracle_instance.target
    assert back.kinds == oracle_instance.kinds
    assert torch.allclose(back.trojaned, oracle_instance.trojaned)
    assert isinstance(back.trigger_truth, PatchTrigger)


def test_instance_without_entry_needs_a_model(tmp_path, oracle_instance):
    d = save_instance(oracle_instance, tmp_path / "inst")
    with pytest.raises(ConfigurationError):
        load_instance(d)

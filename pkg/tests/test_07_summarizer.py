from __future__ import annotations

import numpy as np
import pytest
import torch

from scripts.decomposer import DecompositionResult
from scripts.errors import ArgumentError, ConfigurationError
from scripts.summarizer import (
    METHODS,
    FeatureVector,
    classify_mask_distribution,
    cluster_features,
    cluster_matrix,
    cluster_purity,
    descriptor,
    extract_features,
    load_summary,
    save_summary,
    sigma_floor,
    summarize_cluster,
    summarize_pool,
)
from scripts.trigger_algebra import PatchTrigger, TransformTrigger, identity_transform


def _binomial(mask_size, ci=20.0, cj=21.0, pattern=None, instance_id="", family=""):
    return FeatureVector(
        kind="patch_binomial",
        blocks={
            "mask_size": np.array([mask_size]),
            "centroid_i": np.array([ci]),
            "centroid_j": np.array([cj]),
            "pattern": np.zeros((3, 8, 8)) if pattern is None else pattern,
        },
        instance_id=instance_id,
        family=family,
    )


def _blobs(n_per_blob=6, seed=0):
    rng = np.random.default_rng(seed)
    vs = []
    for i in range(n_per_blob):
        pattern = np.clip(0.9 + 0.02 * rng.standard_normal((3, 16, 16)), 0.0, 1.0)
        vs.append(_binomial(9.0 + rng.normal(0, 0.3), 14.0 + rng.normal(0, 0.2), 14.0 + rng.normal(0, 0.2), pattern, f"a{i}", "patch"))
    for i in range(n_per_blob):
        pattern = np.clip(0.1 + 0.02 * rng.standard_normal((3, 16, 16)), 0.0, 1.0)
        vs.append(_binomial(64.0 + rng.normal(0, 0.3), 4.0 + rng.normal(0, 0.2), 4.0 + rng.normal(0, 0.2), pattern, f"b{i}", "blend"))
    return vs


# ---------------------------------------------------------------------------
# classification des masques et vecteurs
# ---------------------------------------------------------------------------


def test_mask_distribution_classes():
    binary = np.zeros((16, 16))
    binary[12:15, 12:15] = 1.0
    assert classify_mask_distribution(binary) == "binomial"
    assert classify_mask_distribution(np.full((16, 16), 0.3)) == "constant"
    rng = np.random.default_rng(0)
    assert classify_mask_distribution(rng.uniform(0.0, 1.0, (16, 16))) == "general"
    assert classify_mask_distribution(torch.from_numpy(binary)) == "binomial"


def test_feature_vector_validates_kind_and_blocks():
    with pytest.raises(ConfigurationError):
        FeatureVector(kind="patch_strange", blocks={})
    with pytest.raises(ConfigurationError):
        FeatureVector(kind="patch_binomial", blocks={"pattern": np.zeros((3, 4, 4))})


def test_extract_features_from_patch_result():
    mask = torch.zeros(16, 16)
    mask[12:15, 12:15] = 1.0
    result = DecompositionResult(
        clean=torch.zeros(1, 3, 16, 16),
        trigger=PatchTrigger(mask, torch.full((3, 16, 16), 0.8)),
        form="patch",
        variant="patch_binomial",
        instance_id="inst_0",
    )
    v = extract_features(result, family="patch")
    assert v.kind == "patch_binomial"
    assert float(v.blocks["mask_size"][0]) == pytest.approx(9.0)
    assert float(v.blocks["centroid_i"][0]) == pytest.approx(13.0)
    assert v.instance_id == "inst_0" and v.family == "patch"
    assert descriptor(v).shape == (73,)


def test_extract_features_from_transform_result():
    c, h, w = 3, 8, 8
    trig = identity_transform((c, h, w))
    result = DecompositionResult(clean=torch.zeros(1, c, h, w), trigger=trig, form="transform", variant="transform_complex")
    v = extract_features(result)
    assert v.kind == "transform"
    assert v.flat().shape == (9 * c * h * w + c * h * w,)
    assert descriptor(v).shape == (73,)


def test_constant_and_general_masks_give_their_kinds():
    base = dict(clean=torch.zeros(1, 3, 8, 8), form="patch", variant="patch_uniform")
    const = DecompositionResult(trigger=PatchTrigger(torch.full((8, 8), 0.4), torch.rand(3, 8, 8)), **base)
    assert extract_features(const).kind == "patch_constant"
    gen = torch.Generator().manual_seed(0)
    general = DecompositionResult(trigger=PatchTrigger(torch.rand((8, 8), generator=gen), torch.rand(3, 8, 8)), **base)
    v = extract_features(general)
    assert v.kind == "patch_general"
    assert set(v.blocks) == {"mask", "pattern"}


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("method", METHODS)
def test_two_blobs_give_two_clusters(method):
    vs = _blobs()
    result = cluster_features(vs, method=method, seed=0)
    assert result.labels.tolist() == [0] * 6 + [1] * 6
    assert result.method == method
    assert result.details["patch_binomial"]["members"] == 12


def test_kinds_never_share_a_cluster():
    vs = _blobs(3)
    tr = [
        FeatureVector("transform", {"weights": identity_transform((3, 16, 16), torch.float64).weights.numpy(), "biases": np.full((3, 16, 16), b)})
        for b in (0.0, 0.01)
    ]
    result = cluster_features(vs + tr)
    binomial = set(result.labels[:6].tolist())
    transform = set(result.labels[6:].tolist())
    assert binomial.isdisjoint(transform)


def test_clustering_needs_two_vectors():
    with pytest.raises(ArgumentError):
        cluster_features([_binomial(9.0)])


def test_unknown_method_is_rejected():
    with pytest.raises(ConfigurationError):
        cluster_matrix(np.zeros((4, 2)), method="spectral")


def test_identical_rows_are_one_cluster():
    labels, details = cluster_matrix(np.ones((5, 3)))
    assert labels.tolist() == [0] * 5
    assert details["degenerate"]


def test_cluster_purity():
    truth = ["a", "a", "b", "b"]
    assert cluster_purity([0, 0, 1, 1], truth) == 1.0
    assert cluster_purity([0, 0, 0, 0], truth) == 0.5
    assert cluster_purity([0, 1, 2, 3], truth) == 1.0
    with pytest.raises(ArgumentError):
        cluster_purity([0, 1], truth)


# ---------------------------------------------------------------------------
# résumés gaussiens
# ---------------------------------------------------------------------------


def test_summary_mean_and_sample_std():
    members = [_binomial(s) for s in (1033.25, 1316.83, 1600.41)]
    s = summarize_cluster(members, cluster_id=4)
    assert s.cluster_id == 4 and s.member_count == 3
    assert float(s.mu["mask_size"][0]) == pytest.approx(1316.83)
    assert float(s.sigma["mask_size"][0]) == pytest.approx(283.58, abs=0.01)
    # constant dimensions fall back to the floor
    assert float(s.sigma["centroid_i"][0]) == pytest.approx(0.05 * 20.0 + 1e-3)
    assert np.allclose(s.sigma["pattern"], 1e-3)
    assert s.dimensions == 3 + 3 * 8 * 8


def test_summary_ignores_member_order():
    vs = _blobs(4)[:4]
    a = summarize_cluster(vs)
    b = summarize_cluster(list(reversed(vs)))
    for name in a.mu:
        assert np.array_equal(a.mu[name], b.mu[name])
        assert np.array_equal(a.sigma[name], b.sigma[name])
    assert a.members == b.members


def test_single_member_summary_uses_floor():
    s = summarize_cluster([_binomial(100.0)])
    assert np.allclose(s.sigma["mask_size"], sigma_floor(np.array([100.0])))


def test_summary_rejects_empty_and_mixed():
    with pytest.raises(ArgumentError):
        summarize_cluster([])
    tr = FeatureVector("transform", {"weights": np.zeros((3, 24, 24)), "biases": np.zeros((3, 8, 8))})
    with pytest.raises(ConfigurationError):
        summarize_cluster([_binomial(9.0), tr])


def test_summarize_pool_counts_families():
    clustering, summaries = summarize_pool(_blobs(), seed=0)
    assert len(summaries) == 2
    assert [s.cluster_id for s in summaries] == [0, 1]
    assert summaries[0].families == {"patch": 6}
    assert summaries[1].families == {"blend": 6}
    assert summaries[0].members == sorted(f"a{i}" for i in range(6))
    assert float(summaries[0].mu["mask_size"][0]) < float(summaries[1].mu["mask_size"][0])


def test_summary_persistence(tmp_path):
    s = summarize_cluster(_blobs(3)[:3], cluster_id=2)
    back = load_summary(save_summary(s, tmp_path / "cluster_2"))
    assert back.kind == s.kind and back.cluster_id == 2
    assert back.members == s.members
    assert back.families == s.families
    for name in s.mu:
        assert np.array_equal(back.mu[name], s.mu[name])
        assert np.array_equal(back.sigma[name], s.sigma[name])

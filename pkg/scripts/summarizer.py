#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""summarizer.py

Attack features from decompositions, clustering into attack types, and
per-dimension Gaussian summaries of each cluster.

Feature kinds (vectors of different kinds are never compared):
  patch_binomial   mask_size, centroid_i, centroid_j, pattern
  patch_constant   pattern
  patch_general    mask, pattern
  transform        weights, biases

Clustering runs on a fixed-length descriptor (9 summary statistics and an
8x8 thumbnail), standardised per partition.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.cluster import DBSCAN, KMeans
from sklearn.metrics import silhouette_score
from sklearn.mixture import GaussianMixture
from sklearn.neighbors import NearestNeighbors
from sklearn.preprocessing import StandardScaler

from forensics_warnings import ForensicsInfoWarning
from scripts.bfl_container import read_array, read_json, write_array, write_json
from scripts.decomposer import DecompositionResult
from scripts.errors import ArgumentError, ConfigurationError
from scripts.trigger_algebra import PatchTrigger, identity_transform, mask_centroid

logger = logging.getLogger(__name__)

KINDS = ("patch_binomial", "patch_constant", "patch_general", "transform")
BLOCKS = {
    "patch_binomial": ("mask_size", "centroid_i", "centroid_j", "pattern"),
    "patch_constant": ("pattern",),
    "patch_general": ("mask", "pattern"),
    "transform": ("weights", "biases"),
}
METHODS = ("kmeans_silhouette", "kmeans_elbow", "gmm_silhouette", "dbscan")

BINOMIAL_FRACTION = 0.9
BINOMIAL_TOLERANCE = 0.1
CONSTANT_STD = 0.05
SUPPORT_EPS = 1e-3
SILHOUETTE_MIN = 0.5
ELBOW_MIN_DROP = 0.8
K_RANGE = (2, 8)
THUMB = 8


def classify_mask_distribution(mask: Any) -> str:
    m = np.asarray(mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else mask, dtype=np.float64)
    near = (np.abs(m) <= BINOMIAL_TOLERANCE) | (np.abs(m - 1.0) <= BINOMIAL_TOLERANCE)
    if near.mean() >= BINOMIAL_FRACTION:
        return "binomial"
    support = m[m > SUPPORT_EPS]
    if support.size and support.std() < CONSTANT_STD and 0.1 < support.mean() < 0.9:
        return "constant"
    return "general"


@dataclass(frozen=True)
class FeatureVector:
    kind: str
    blocks: Dict[str, np.ndarray]
    instance_id: str = ""
    family: str = ""

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown feature kind {self.kind!r}")
        missing = set(BLOCKS[self.kind]) - set(self.blocks)
        if missing:
            raise ConfigurationError(f"{self.kind} feature is missing blocks {sorted(missing)}")

    @property
    def form(self) -> str:
        return "transform" if self.kind == "transform" else "patch"

    def flat(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.blocks[name], dtype=np.float64).ravel() for name in BLOCKS[self.kind]])


def _thumbnail(img: np.ndarray) -> np.ndarray:
    t = torch.from_numpy(np.asarray(img, dtype=np.float64))
    t = t.mean(dim=0, keepdim=True) if t.dim() == 3 else t.unsqueeze(0)
    return F.adaptive_avg_pool2d(t.unsqueeze(0), (THUMB, THUMB)).reshape(-1).numpy()


def _per_channel(x: np.ndarray, fn: Any) -> np.ndarray:
    vals = np.array([fn(ch) for ch in x], dtype=np.float64)
    return np.resize(vals, 3)


def descriptor(v: FeatureVector) -> np.ndarray:
    """73 values: 3 channel means, 3 channel stds, 3 shape terms, 8x8 thumbnail."""
    b = v.blocks
    if v.kind == "transform":
        w = np.asarray(b["weights"], dtype=np.float64)
        c = w.shape[0]
        delta = w - identity_transform((c, w.shape[1] // 3, w.shape[2] // 3), torch.float64).weights.numpy()
        biases = np.asarray(b["biases"], dtype=np.float64)
        shape_terms = [float(np.abs(delta).mean()), float(biases.mean()), float(biases.std())]
        main, thumb_src = w[:, 1::3, 1::3], delta
    else:
        pattern = np.asarray(b["pattern"], dtype=np.float64)
        h, w_ = pattern.shape[-2:]
        if v.kind == "patch_binomial":
            shape_terms = [float(b["mask_size"]) / (h * w_), float(b["centroid_i"]) / h, float(b["centroid_j"]) / w_]
            main = pattern
        elif v.kind == "patch_general":
            mask = np.asarray(b["mask"], dtype=np.float64)
            ci, cj = (float(t) for t in mask_centroid(torch.from_numpy(mask)))
            shape_terms = [float(mask.sum()) / (h * w_), ci / h, cj / w_]
            main = pattern * mask
        else:
            shape_terms = [0.0, 0.0, 0.0]
            main = pattern
        thumb_src = main
    stats = np.concatenate([_per_channel(main, np.mean), _per_channel(main, np.std), shape_terms])
    return np.concatenate([stats, _thumbnail(thumb_src)])


def extract_features(result: DecompositionResult, family: str = "") -> FeatureVector:
    trig = result.trigger
    if isinstance(trig, PatchTrigger):
        mask = trig.mask.detach().double()
        pattern = trig.pattern.detach().double().numpy()
        dist = classify_mask_distribution(mask)
        if dist == "binomial":
            ci, cj = mask_centroid(mask)
            blocks = {
                "mask_size": np.array([float(mask.sum())]),
                "centroid_i": np.array([float(ci)]),
                "centroid_j": np.array([float(cj)]),
                "pattern": pattern,
            }
        elif dist == "constant":
            blocks = {"pattern": pattern}
        else:
            blocks = {"mask": mask.numpy(), "pattern": pattern}
        kind = f"patch_{dist}"
    else:
        blocks = {"weights": trig.weights.detach().double().numpy(), "biases": trig.biases.detach().double().numpy()}
        kind = "transform"
    return FeatureVector(kind=kind, blocks=blocks, instance_id=result.instance_id, family=family)


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------


class ClusteringResult(NamedTuple):
    labels: np.ndarray
    method: str
    details: Dict[str, Dict[str, Any]]


def _silhouette(X: np.ndarray, labels: np.ndarray) -> float:
    if len(set(labels.tolist())) < 2 or len(set(labels.tolist())) >= X.shape[0]:
        return float("-inf")
    try:
        return float(silhouette_score(X, labels))
    except ValueError as e:
        warnings.warn(f"silhouette failed: {e}", ForensicsInfoWarning, stacklevel=2)
        return float("-inf")


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Renumber clusters by first appearance."""
    mapping: Dict[int, int] = {}
    out = np.empty(labels.shape[0], dtype=np.int64)
    for i, lab in enumerate(labels.tolist()):
        out[i] = mapping.setdefault(lab, len(mapping))
    return out


def _by_silhouette(X: np.ndarray, fit: Any, ks: range) -> Tuple[np.ndarray, Dict[str, Any]]:
    best_k, best_score, best_labels = 1, float("-inf"), np.zeros(X.shape[0], dtype=np.int64)
    for k in ks:
        labels = np.asarray(fit(k))
        score = _silhouette(X, labels)
        if score > best_score:
            best_k, best_score, best_labels = k, score, labels
    if best_score < SILHOUETTE_MIN:
        return np.zeros(X.shape[0], dtype=np.int64), {"k": 1, "score": best_score if np.isfinite(best_score) else None}
    return best_labels, {"k": best_k, "score": best_score}


def _by_elbow(X: np.ndarray, seed: int, ks: range) -> Tuple[np.ndarray, Dict[str, Any]]:
    fits = {k: KMeans(n_clusters=k, n_init=10, random_state=seed).fit(X) for k in range(1, ks.stop)}
    inertia = {k: float(m.inertia_) for k, m in fits.items()}
    if inertia[1] <= 0.0:
        return np.zeros(X.shape[0], dtype=np.int64), {"k": 1, "inertia": inertia}
    drops = {k: 1.0 - inertia[k] / inertia[k - 1] if inertia[k - 1] > 0 else 0.0 for k in ks}
    knee = max(ks, key=lambda k: (drops[k], -k))
    if 1.0 - inertia[knee] / inertia[1] < ELBOW_MIN_DROP:
        return np.zeros(X.shape[0], dtype=np.int64), {"k": 1, "inertia": inertia}
    return np.asarray(fits[knee].labels_), {"k": knee, "inertia": inertia}


def _by_dbscan(X: np.ndarray) -> Tuple[np.ndarray, Dict[str, Any]]:
    n = X.shape[0]
    kth = min(4, n - 1)
    dist, _ = NearestNeighbors(n_neighbors=kth + 1).fit(X).kneighbors(X)
    eps = float(np.percentile(dist[:, kth], 90))
    eps = eps if eps > 0 else 1e-6
    labels = DBSCAN(eps=eps, min_samples=2).fit_predict(X)
    noise = labels == -1
    if noise.all():
        return np.zeros(n, dtype=np.int64), {"eps": eps, "noise": int(noise.sum())}
    if noise.any():
        # noise joins the cluster of its nearest clustered point
        nn_model = NearestNeighbors(n_neighbors=1).fit(X[~noise])
        _, idx = nn_model.kneighbors(X[noise])
        labels = labels.copy()
        labels[noise] = labels[~noise][idx[:, 0]]
    return labels, {"eps": eps, "noise": int(noise.sum())}


def cluster_matrix(X: Any, method: str = "kmeans_silhouette", seed: int = 0) -> Tuple[np.ndarray, Dict[str, Any]]:
    """Cluster the rows of X (one partition); returns canonical labels and details."""
    if method not in METHODS:
        raise ConfigurationError(f"clustering method must be one of {list(METHODS)}, got {method!r}")
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2 or np.ptp(X, axis=0).max() == 0.0:
        return np.zeros(n, dtype=np.int64), {"k": 1, "degenerate": True}
    Xs = StandardScaler().fit_transform(X)
    ks = range(K_RANGE[0], min(K_RANGE[1], n - 1) + 1)
    if len(ks) == 0:
        return np.zeros(n, dtype=np.int64), {"k": 1, "too_small": True}
    if method == "kmeans_silhouette":
        labels, details = _by_silhouette(Xs, lambda k: KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(Xs), ks)
    elif method == "gmm_silhouette":
        labels, details = _by_silhouette(
            Xs,
            lambda k: GaussianMixture(n_components=k, covariance_type="diag", reg_covar=1e-3, random_state=seed).fit(Xs).predict(Xs),
            ks,
        )
    elif method == "kmeans_elbow":
        labels, details = _by_elbow(Xs, seed, ks)
    else:
        labels, details = _by_dbscan(Xs)
    return _canonical(np.asarray(labels)), details


def cluster_features(vs: Sequence[FeatureVector], method: str = "kmeans_silhouette", seed: int = 0) -> ClusteringResult:
    if len(vs) < 2:
        raise ArgumentError("clustering needs at least two feature vectors")
    labels = np.full(len(vs), -1, dtype=np.int64)
    details: Dict[str, Dict[str, Any]] = {}
    offset = 0
    for kind in KINDS:
        idx = [i for i, v in enumerate(vs) if v.kind == kind]
        if not idx:
            continue
        part, info = cluster_matrix(np.stack([descriptor(vs[i]) for i in idx]), method, seed)
        labels[idx] = part + offset
        info["members"] = len(idx)
        details[kind] = info
        offset += int(part.max()) + 1
    logger.info("clustered %d vectors with %s into %d clusters", len(vs), method, offset)
    return ClusteringResult(labels=labels, method=method, details=details)


def cluster_purity(assignments: Sequence[int], truth: Sequence[Any]) -> float:
    a = np.asarray(assignments)
    t = np.asarray(truth)
    if a.size == 0 or a.size != t.size:
        raise ArgumentError("purity needs equally long, non-empty assignments and truth")
    total = 0
    for c in np.unique(a):
        _, counts = np.unique(t[a == c], return_counts=True)
        total += int(counts.max())
    return total / a.size


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


@dataclass
class AttackSummary:
    cluster_id: int
    kind: str
    mu: Dict[str, np.ndarray]
    sigma: Dict[str, np.ndarray]
    member_count: int
    members: List[str] = field(default_factory=list)
    families: Dict[str, int] = field(default_factory=dict)

    @property
    def form(self) -> str:
        return "transform" if self.kind == "transform" else "patch"

    @property
    def dimensions(self) -> int:
        return int(sum(m.size for m in self.mu.values()))


def sigma_floor(mu: np.ndarray) -> np.ndarray:
    return 0.05 * np.abs(mu) + 1e-3


def summarize_cluster(members: Sequence[FeatureVector], cluster_id: int = 0) -> AttackSummary:
    """Per-dimension sample mean and std (ddof=1), floored; member order is irrelevant."""
    if not members:
        raise ArgumentError("cannot summarize an empty cluster")
    kinds = {v.kind for v in members}
    if len(kinds) != 1:
        raise ConfigurationError(f"cluster mixes feature kinds {sorted(kinds)}")
    kind = members[0].kind
    rows = np.stack([v.flat() for v in members])
    order = np.lexsort(rows.T[::-1])
    rows = rows[order]
    mu_flat = rows.mean(axis=0)
    sd_flat = rows.std(axis=0, ddof=1) if rows.shape[0] > 1 else np.zeros_like(mu_flat)
    sd_flat = np.maximum(sd_flat, sigma_floor(mu_flat))

    mu: Dict[str, np.ndarray] = {}
    sigma: Dict[str, np.ndarray] = {}
    offset = 0
    for name in BLOCKS[kind]:
        shape = np.asarray(members[0].blocks[name]).shape
        n = int(np.prod(shape))
        mu[name] = mu_flat[offset : offset + n].reshape(shape)
        sigma[name] = sd_flat[offset : offset + n].reshape(shape)
        offset += n
    families: Dict[str, int] = {}
    for v in members:
        if v.family:
            families[v.family] = families.get(v.family, 0) + 1
    return AttackSummary(
        cluster_id=cluster_id,
        kind=kind,
        mu=mu,
        sigma=sigma,
        member_count=len(members),
        members=sorted(v.instance_id for v in members),
        families=dict(sorted(families.items())),
    )


def summarize_pool(vs: Sequence[FeatureVector], method: str = "kmeans_silhouette", seed: int = 0) -> Tuple[ClusteringResult, List[AttackSummary]]:
    clustering = cluster_features(vs, method, seed)
    summaries = []
    for cid in sorted(set(clustering.labels.tolist())):
        members = [v for v, lab in zip(vs, clustering.labels) if lab == cid]
        summaries.append(summarize_cluster(members, cid))
    return clustering, summaries


def save_summary(summary: AttackSummary, directory: Union[str, Path]) -> Path:
    d = Path(directory)
    blocks: Dict[str, Any] = {}
    for name in BLOCKS[summary.kind]:
        mu, sd = summary.mu[name], summary.sigma[name]
        entry: Dict[str, Any] = {"shape": list(mu.shape)}
        if mu.size == 1:
            entry["mu"] = float(mu.ravel()[0])
            entry["sigma"] = float(sd.ravel()[0])
        else:
            write_array(d / f"mu_{name}.bfl", mu, float64=True)
            write_array(d / f"sigma_{name}.bfl", sd, float64=True)
            entry["files"] = [f"mu_{name}.bfl", f"sigma_{name}.bfl"]
        blocks[name] = entry
    write_json(
        d / "summary.json",
        {
            "cluster_id": summary.cluster_id,
            "kind": summary.kind,
            "form": summary.form,
            "member_count": summary.member_count,
            "members": summary.members,
            "families": summary.families,
            "blocks": blocks,
        },
    )
    return d


def load_summary(directory: Union[str, Path]) -> AttackSummary:
    d = Path(directory)
    meta = read_json(d / "summary.json")
    kind = str(meta["kind"])
    if kind not in KINDS:
        raise ConfigurationError(f"{d / 'summary.json'}: unknown kind {kind!r}")
    mu: Dict[str, np.ndarray] = {}
    sigma: Dict[str, np.ndarray] = {}
    for name in BLOCKS[kind]:
        entry = meta["blocks"][name]
        shape = tuple(entry["shape"])
        if "mu" in entry:
            mu[name] = np.full(shape, float(entry["mu"]))
            sigma[name] = np.full(shape, float(entry["sigma"]))
        else:
            mu[name] = read_array(d / f"mu_{name}.bfl").astype(np.float64).reshape(shape)
            sigma[name] = read_array(d / f"sigma_{name}.bfl").astype(np.float64).reshape(shape)
    return AttackSummary(
        cluster_id=int(meta["cluster_id"]),
        kind=kind,
        mu=mu,
        sigma=sigma,
        member_count=int(meta["member_count"]),
        members=list(meta.get("members", [])),
        families=dict(meta.get("families", {})),
    )

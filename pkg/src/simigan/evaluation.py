"""Clustering evaluation: k-means over encoded codes, Hungarian-matched
accuracy, normalized mutual information, mode coverage, and a 2-D
projection export for plotting."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .errors import ContractError


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list  # per-iteration inertia within the winning restart


@dataclass
class ClusterReport:
    predicted_labels: np.ndarray  # raw cluster indices per sample
    acc: float
    nmi: float
    permutation: list[int]  # cluster index -> class index
    mode_frequencies: list[int]  # per-class counts after applying permutation
    confusion: np.ndarray  # [cluster, class] contingency counts

    def to_json_dict(self):
        return {
            "acc": self.acc,
            "nmi": self.nmi,
            "permutation": list(self.permutation),
            "confusion": [int(v) for v in self.confusion.reshape(-1)],
        }

    def to_json(self):
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def csv_row(self):
        flat = ";".join(str(int(v)) for v in self.confusion.reshape(-1))
        perm = ";".join(str(p) for p in self.permutation)
        return f"{self.acc!r},{self.nmi!r},{perm},{flat}"


def _kmeans_once(points, k, rng):
    n = points.shape[0]
    sq_norms = np.einsum("ij,ij->i", points, points)

    def dist_sq_to(centers):
        # ||x - c||^2 via expansion; clip tiny negatives from cancellation
        d = sq_norms[:, None] - 2.0 * points @ centers.T
        d += np.einsum("ij,ij->i", centers, centers)[None, :]
        return np.maximum(d, 0.0)

    # k-means++ seeding
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = dist_sq_to(centroids[:1]).reshape(-1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)  # all points coincide with a centroid
        else:
            idx = rng.choice(n, p=closest / total)
        centroids[j] = points[idx]
        closest = np.minimum(closest, dist_sq_to(centroids[j : j + 1]).reshape(-1))

    labels = np.zeros(n, dtype=np.int64)
    history = []
    for _ in range(300):
        dists = dist_sq_to(centroids)
        new_labels = np.argmin(dists, axis=1)
        point_d = dists[np.arange(n), new_labels]
        history.append(float(point_d.sum()))
        for j in range(k):
            members = new_labels == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
            else:
                far = int(np.argmax(point_d))
                centroids[j] = points[far]
                point_d[far] = 0.0  # a later empty cluster picks the next-farthest
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    dists = dist_sq_to(centroids)
    labels = np.argmin(dists, axis=1)
    inertia = float(dists[np.arange(n), labels].sum())
    return KMeansResult(
        labels=labels, centroids=centroids, inertia=inertia, inertia_history=history
    )


def kmeans(points, k, restarts=10, seed=0):
    """Best-of-restarts k-means with k-means++ seeding.

    Empty clusters are re-seeded at the farthest point; a restart converges
    when assignments stop changing or after 300 iterations.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < k:
        raise ContractError(f"kmeans: {points.shape[0]} points for k={k}")
    root = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        result = _kmeans_once(points, k, np.random.default_rng(root.integers(2**63)))
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def _check_labels(true_labels, pred_labels, num_classes=None):
    true_labels = np.asarray(true_labels, dtype=np.int64)
    pred_labels = np.asarray(pred_labels, dtype=np.int64)
    if true_labels.shape != pred_labels.shape or true_labels.ndim != 1:
        raise ContractError(
            f"label arrays misaligned: {true_labels.shape} vs {pred_labels.shape}"
        )
    if true_labels.size == 0:
        raise ContractError("label arrays are empty")
    if num_classes is not None:
        for name, arr in (("true", true_labels), ("predicted", pred_labels)):
            if arr.min() < 0 or arr.max() >= num_classes:
                raise ContractError(
                    f"{name} labels outside [0, {num_classes}): {arr.min()}..{arr.max()}"
                )
    return true_labels, pred_labels


def hungarian_acc(true_labels, pred_labels, num_classes):
    """Accuracy under the best cluster-to-class bijection, plus the bijection."""
    true_labels, pred_labels = _check_labels(true_labels, pred_labels, num_classes)
    contingency = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(contingency, (pred_labels, true_labels), 1)
    rows, cols = linear_sum_assignment(contingency, maximize=True)
    permutation = [0] * num_classes
    for r, c in zip(rows, cols):
        permutation[r] = int(c)
    matched = contingency[rows, cols].sum()
    return float(matched) / true_labels.size, permutation


def nmi(true_labels, pred_labels):
    """Normalized mutual information, 2 I(Y;C) / (H(Y) + H(C)), in [0, 1]."""
    true_labels, pred_labels = _check_labels(true_labels, pred_labels)
    n = true_labels.size
    joint = {}
    for a, b in zip(true_labels, pred_labels):
        joint[(a, b)] = joint.get((a, b), 0) + 1
    p_true = np.bincount(true_labels) / n
    p_pred = np.bincount(pred_labels) / n

    def entropy(p):
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())

    h_true, h_pred = entropy(p_true), entropy(p_pred)
    info = 0.0
    for (a, b), count in joint.items():
        p_ab = count / n
        info += p_ab * np.log(p_ab / (p_true[a] * p_pred[b]))
    if h_true + h_pred == 0.0:
        return 0.0
    return 2.0 * info / (h_true + h_pred)


def encode(encoder, features):
    """Concatenated (continuous head, softmax of logits head), off the tape."""
    with ad.no_grad():
        cont, logits = encoder.forward_heads(np.asarray(features, dtype=np.float64))
        probs = ad.softmax(logits)
    return np.concatenate([cont.data, probs.data], axis=1)


def encode_and_score(encoder, features, true_labels, num_classes, restarts=10, seed=0):
    """Encode a split, cluster with k-means, and score against ground truth."""
    codes = encode(encoder, features)
    result = kmeans(codes, num_classes, restarts=restarts, seed=seed)
    acc, permutation = hungarian_acc(true_labels, result.labels, num_classes)
    true_arr = np.asarray(true_labels, dtype=np.int64)
    contingency = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(contingency, (result.labels, true_arr), 1)
    mapped = np.array([permutation[c] for c in result.labels])
    return ClusterReport(
        predicted_labels=result.labels,
        acc=acc,
        nmi=nmi(true_labels, result.labels),
        permutation=permutation,
        mode_frequencies=np.bincount(mapped, minlength=num_classes).tolist(),
        confusion=contingency,
    )


@dataclass
class ModeCoverage:
    purity: list[float]  # per conditioning class
    plurality: list[int]  # oracle class each conditioning class lands on
    coverage: int  # distinct plurality classes hit


def mode_coverage(oracle, batches_per_class):
    """Purity and coverage of per-class generated batches.

    ``oracle`` maps a feature batch to class indices (for synthetic data a
    nearest-true-centroid classifier); purity is the plurality fraction per
    conditioning class, coverage the number of distinct plurality classes.
    """
    purity, plurality = [], []
    for batch in batches_per_class:
        assigned = np.asarray(oracle(batch), dtype=np.int64)
        counts = np.bincount(assigned)
        top = int(np.argmax(counts))
        plurality.append(top)
        purity.append(float(counts[top]) / assigned.size)
    return ModeCoverage(purity=purity, plurality=plurality, coverage=len(set(plurality)))


def project_2d(points):
    """Projection onto the two leading principal axes.

    Deterministic sign convention: each axis is flipped so its
    largest-magnitude coordinate is positive.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] < 2:
        raise ContractError(f"project_2d: need at least 2 columns, got {points.shape}")
    centered = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2]
    for i in range(2):
        j = int(np.argmax(np.abs(axes[i])))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    return centered @ axes.T

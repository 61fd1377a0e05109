"""Dataset loading, normalization, synthetic benchmarks, and imbalance
subsampling.

Loaders return immutable feature/label bundles; labels are carried only for
evaluation and the imbalance protocol, never consumed by training proper.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ContractError, ParseError

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray  # (N, d)
    labels: np.ndarray | None  # (N,) int class indices, or None
    num_classes: int
    normalization: str = "none"  # none | signed | unit
    image_shape: tuple[int, int] | None = None

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]


@dataclass
class NormParams:
    """Per-feature affine map fitted on the training split."""

    mode: str  # signed -> [-1, 1], unit -> [0, 1]
    lo: np.ndarray
    hi: np.ndarray


@dataclass
class ImbalanceSpec:
    """Per-class retention fractions; classes not listed keep everything."""

    fractions: dict[int, float]

    def __post_init__(self):
        for cls, frac in self.fractions.items():
            if not 0.0 < frac <= 1.0:
                raise ContractError(f"imbalance fraction for class {cls} must be in (0, 1], got {frac}")


def _read_exact(fh, count, path, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise ParseError(f"{path}: truncated reading {what}: wanted {count} bytes, got {len(buf)}")
    return buf


def load_idx(images_path, labels_path):
    """Load the big-endian magic-numbered image/label container pair."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path, "image header"))
        if magic != _IDX_IMAGES_MAGIC:
            raise ParseError(f"{images_path}: bad image magic 0x{magic:08x} at offset 0")
        payload = _read_exact(fh, count * rows * cols, images_path, f"{count} images of {rows}x{cols}")
        images = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
        images = images.reshape(count, rows * cols)
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, labels_path, "label header"))
        if magic != _IDX_LABELS_MAGIC:
            raise ParseError(f"{labels_path}: bad label magic 0x{magic:08x} at offset 0")
        labels = np.frombuffer(_read_exact(fh, label_count, labels_path, f"{label_count} labels"), dtype=np.uint8)
    if count != label_count:
        raise ParseError(
            f"{images_path}: {count} images but {labels_path} has {label_count} labels"
        )
    labels = labels.astype(np.int64)
    return Dataset(
        features=images,
        labels=labels,
        num_classes=int(labels.max()) + 1 if labels.size else 0,
        image_shape=(rows, cols),
    )


def load_csv(path, label_column=None, num_classes=None):
    """Load a rectangular numeric CSV with a header row.

    ``label_column`` names the class column when present; ``num_classes``
    fixes the expected class count (labels at or above it are an error).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        label_idx = None
        if label_column is not None:
            if label_column not in header:
                raise ParseError(f"{path}: no column named {label_column!r} in header")
            label_idx = header.index(label_column)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno}: {len(row)} cells, header has {len(header)}")
            try:
                values = [float(cell) for cell in row]
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: non-numeric cell ({exc})") from None
            if label_idx is not None:
                labels.append(values.pop(label_idx))
            rows.append(values)
    features = np.asarray(rows, dtype=np.float64)
    if features.ndim != 2:
        features = features.reshape(len(rows), -1)
    label_arr = None
    if label_idx is not None:
        label_arr = np.asarray(labels)
        if not np.all(label_arr == np.floor(label_arr)):
            raise ParseError(f"{path}: label column contains non-integer values")
        label_arr = label_arr.astype(np.int64)
        if label_arr.size and label_arr.min() < 0:
            raise ParseError(f"{path}: negative class label {label_arr.min()}")
        inferred = int(label_arr.max()) + 1 if label_arr.size else 0
        if num_classes is not None and inferred > num_classes:
            raise ParseError(
                f"{path}: label {int(label_arr.max())} outside expected range [0, {num_classes})"
            )
    return Dataset(
        features=features,
        labels=label_arr,
        num_classes=num_classes if num_classes is not None else (inferred if label_arr is not None else 0),
    )


def synth_blobs(num_classes, per_class, dim, spread, noise, seed):
    """Gaussian blobs with rejection-enforced center separation.

    Centers sit at ``spread`` times random unit directions, re-drawn until
    all pairwise distances reach spread / 2; class k contributes
    ``per_class[k]`` points of isotropic noise around its center.
    """
    if num_classes < 1 or dim < 1:
        raise ContractError(f"synth_blobs: need at least one class and one dimension")
    counts = [per_class] * num_classes if isinstance(per_class, int) else list(per_class)
    if len(counts) != num_classes:
        raise ContractError(f"synth_blobs: {len(counts)} counts for {num_classes} classes")
    rng = np.random.default_rng(seed)
    for _ in range(10_000):
        dirs = rng.normal(size=(num_classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        centers = spread * dirs
        if num_classes == 1:
            break
        dists = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
        if dists[np.triu_indices(num_classes, k=1)].min() >= spread / 2.0:
            break
    else:
        raise ConfigError(
            f"synth_blobs: could not separate {num_classes} centers at spread {spread} in {dim}-d"
        )
    features = np.concatenate(
        [centers[k] + rng.normal(0.0, noise, size=(counts[k], dim)) for k in range(num_classes)]
    )
    labels = np.concatenate([np.full(counts[k], k, dtype=np.int64) for k in range(num_classes)])
    order = rng.permutation(labels.size)
    return Dataset(features=features[order], labels=labels[order], num_classes=num_classes)


def train_test_split(data, test_fraction, seed):
    """Disjoint-by-index split; the shuffle seed is independent of the data."""
    if not 0.0 < test_fraction < 1.0:
        raise ContractError(f"train_test_split: fraction {test_fraction} outside (0, 1)")
    order = np.random.default_rng(seed).permutation(data.n)
    n_test = max(1, int(round(test_fraction * data.n)))
    test_idx, train_idx = order[:n_test], order[n_test:]

    def take(idx):
        return replace(
            data,
            features=data.features[idx].copy(),
            labels=None if data.labels is None else data.labels[idx].copy(),
        )

    return take(train_idx), take(test_idx)


def subsample_imbalanced(data, spec, seed):
    """Retain ceil(fraction * count) uniformly chosen samples per class.

    Only membership changes; feature values are untouched. Applies to a
    training split; the caller keeps its test split intact.
    """
    if data.labels is None:
        raise ContractError("subsample_imbalanced: dataset has no labels")
    rng = np.random.default_rng(seed)
    keep = []
    for cls in range(data.num_classes):
        idx = np.flatnonzero(data.labels == cls)
        frac = spec.fractions.get(cls, 1.0)
        if frac * idx.size < 1.0:
            raise ContractError(
                f"subsample_imbalanced: class {cls} would be emptied "
                f"({frac} of {idx.size} samples)"
            )
        retained = math.ceil(frac * idx.size)
        keep.append(rng.choice(idx, size=retained, replace=False))
    keep = np.sort(np.concatenate(keep))
    return replace(data, features=data.features[keep].copy(), labels=data.labels[keep].copy())


def fit_normalization(data, mode):
    """Per-feature min/max from a training split."""
    if mode not in ("signed", "unit"):
        raise ContractError(f"fit_normalization: unknown mode {mode!r}")
    return NormParams(mode=mode, lo=data.features.min(axis=0), hi=data.features.max(axis=0))


def apply_normalization(data, params):
    """Affine map to the target range; test values may land outside it.

    Constant features map to the midpoint of the range.
    """
    span = params.hi - params.lo
    safe = np.where(span == 0, 1.0, span)
    unit = (data.features - params.lo) / safe
    unit = np.where(span == 0, 0.5, unit)
    if params.mode == "signed":
        mapped = unit * 2.0 - 1.0
    else:
        mapped = unit
    return replace(data, features=mapped, normalization=params.mode)


def normalize(data, mode):
    """Fit on ``data`` and apply; returns the dataset and the fitted map."""
    params = fit_normalization(data, mode)
    return apply_normalization(data, params), params


def denormalize(features, params):
    """Inverse of ``apply_normalization`` for generated samples."""
    if params.mode == "signed":
        unit = (features + 1.0) / 2.0
    else:
        unit = features
    span = params.hi - params.lo
    restored = unit * span + params.lo
    return np.where(span == 0, params.lo, restored)

"""Continuous-discrete mixture codes for the generator.

A code pairs a Gaussian vector with a categorical vector that is one-hot
during training and a convex mixture during class interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class LatentCode:
    """A batch of codes: rows of ``z_n`` pair with rows of ``z_M``."""

    z_n: np.ndarray  # (B, d_n) Gaussian draws
    z_M: np.ndarray  # (B, M) one-hot or convex mixture
    sigma: float

    def concat(self):
        return np.concatenate([self.z_n, self.z_M], axis=1)

    def __len__(self):
        return self.z_n.shape[0]


def one_hot(index, num_classes):
    """Unit vector marking ``index`` among ``num_classes`` entries."""
    if not 0 <= index < num_classes:
        raise ContractError(f"one_hot: index {index} outside [0, {num_classes})")
    v = np.zeros(num_classes)
    v[index] = 1.0
    return v


def one_hot_rows(indices, num_classes):
    """Stack of one-hot rows for an index sequence."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= num_classes):
        raise ContractError(
            f"one_hot_rows: indices outside [0, {num_classes}): {indices.min()}..{indices.max()}"
        )
    rows = np.zeros((indices.size, num_classes))
    rows[np.arange(indices.size), indices] = 1.0
    return rows


def sample_latent(batch, d_n, num_classes, sigma, class_source, rng):
    """Draw a batch of codes.

    ``class_source`` is either the string ``"uniform"`` or a sequence of
    class indices (e.g. hard assignments copied from the prior network, or a
    fixed list); indices are used verbatim, never re-sampled.
    """
    if sigma <= 0:
        raise ContractError(f"sample_latent: sigma must be positive, got {sigma}")
    z_n = rng.normal(0.0, sigma, size=(batch, d_n))
    if isinstance(class_source, str):
        if class_source != "uniform":
            raise ContractError(f"sample_latent: unknown class source {class_source!r}")
        indices = rng.integers(0, num_classes, size=batch)
    else:
        indices = np.asarray(class_source, dtype=np.int64)
        if indices.shape != (batch,):
            raise ContractError(
                f"sample_latent: class list has shape {indices.shape}, wanted ({batch},)"
            )
    return LatentCode(z_n=z_n, z_M=one_hot_rows(indices, num_classes), sigma=sigma)


def interpolate(z_n, class_a, class_b, tau, num_classes):
    """Code whose categorical part mixes two classes: tau of a, 1 - tau of b.

    The continuous part is passed through unchanged, so a sweep over tau at
    fixed ``z_n`` traverses between classes.
    """
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"interpolate: tau {tau} outside [0, 1]")
    z_n = np.asarray(z_n, dtype=np.float64).reshape(1, -1)
    mix = tau * one_hot(class_a, num_classes) + (1.0 - tau) * one_hot(class_b, num_classes)
    return LatentCode(z_n=z_n, z_M=mix.reshape(1, -1), sigma=0.0)

"""Phase 1: learn a categorical prior over the data.

The prior network is trained by minimizing a self-augmented consistency
term minus a weighted mutual-information term (marginal entropy of the
average assignment minus weighted conditional entropy). Augmentations are
an adversarial perturbation of bounded norm found by one power iteration,
random affine distortion for image-shaped data, or both added together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .nn import AdamState, build_network

AUGMENTATIONS = ("none", "affine", "vat", "both")

# keeps p * log(p) finite when a class's average probability underflows
_LOG_FLOOR = 1e-300


@dataclass
class AffineRanges:
    """Per-sample draw ranges for the image augmentation."""

    rotation_deg: float = 10.0
    scale_low: float = 0.3
    scale_high: float = 1.0
    shear: float = 0.3


@dataclass
class PriorConfig:
    beta_p: float = 0.1  # regularizer / information tradeoff
    beta_mu: float = 4.0  # conditional-entropy weight
    beta_t: float = 0.25  # perturbation radius
    epochs: int = 60
    batch: int = 256
    lr: float = 0.002
    augmentation: str = "vat"
    hidden: tuple[int, ...] = (256, 256)
    vat_xi: float = 1e-6
    affine: AffineRanges = field(default_factory=AffineRanges)
    beta1: float = 0.5
    beta2: float = 0.999

    def validate(self):
        if self.beta_t <= 0:
            raise ConfigError(f"prior.beta_t must be positive, got {self.beta_t}")
        if self.beta_p < 0 or self.beta_mu < 0:
            raise ConfigError("prior.beta_p and prior.beta_mu must be non-negative")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"prior.augmentation must be one of {AUGMENTATIONS}")
        if self.epochs < 0 or self.batch < 1 or self.lr <= 0:
            raise ConfigError("prior: epochs >= 0, batch >= 1 and lr > 0 required")


@dataclass
class PriorEpochStats:
    epoch: int
    total: float
    sat: float
    h_marginal: float
    h_conditional: float
    histogram: list[int]


def _check_distributions(probs):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ContractError(f"expected a batch of distributions, got shape {probs.shape}")
    if np.any(probs < 0):
        raise ContractError("distribution entries must be non-negative")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9):
        raise ContractError("distribution rows must sum to 1 within 1e-9")
    return probs


def _entropy(p):
    # natural log, 0 log 0 = 0
    terms = np.where(p > 0, p * np.log(np.maximum(p, _LOG_FLOOR)), 0.0)
    return float(-terms.sum())


def conditional_entropy(probs):
    """Mean per-row entropy of a batch of categorical distributions, in nats."""
    probs = _check_distributions(probs)
    return float(np.mean([_entropy(row) for row in probs]))


def marginal_entropy(probs):
    """Entropy of the row-average distribution, in nats."""
    probs = _check_distributions(probs)
    return _entropy(probs.mean(axis=0))


def predict_probs(net, x):
    """Class probabilities without touching the tape."""
    with ad.no_grad():
        return ad.softmax(net(x)).data


def hard_assignments(net, x):
    """Argmax class per sample; ties break toward the lowest index."""
    return np.argmax(predict_probs(net, x), axis=1)


def _sat_core(targets, logits):
    # cross-entropy of constant targets against live predictions
    logp = ad.log_softmax(logits)
    n = targets.shape[0]
    return ad.mul(ad.sum_all(ad.mul_const(logp, targets)), -1.0 / n)


def sat_loss(net, x, x_aug):
    """Consistency loss pushing predictions on ``x_aug`` toward those on ``x``.

    The prediction on ``x`` is a stop-gradient target, so only the augmented
    branch contributes gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    x_aug = np.asarray(x_aug, dtype=np.float64)
    if x.shape != x_aug.shape:
        raise ContractError(f"sat_loss: batches {x.shape} and {x_aug.shape} differ")
    targets = predict_probs(net, x)
    return _sat_core(targets, net(Tensor(x_aug)))


def vat_perturbation(net, x, beta_t, xi=1e-6, rng=None):
    """Norm-bounded adversarial perturbation from one power iteration.

    A random unit direction is probed at step ``xi``; the gradient of the
    consistency loss with respect to the probe gives the direction, scaled
    to norm ``beta_t`` per sample. Rows with a vanishing gradient fall back
    to their random probe direction.
    """
    if xi <= 0:
        raise ContractError(f"vat_perturbation: xi must be positive, got {xi}")
    if rng is None:
        rng = np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    d = rng.normal(size=x.shape)
    d /= np.linalg.norm(d, axis=1, keepdims=True)

    targets = predict_probs(net, x)
    probe = Tensor(xi * d, requires_grad=True)
    loss = _sat_core(targets, net(ad.add(Tensor(x), probe)))
    g = ad.backward(loss, wrt=[probe])[probe].data

    norms = np.linalg.norm(g, axis=1, keepdims=True)
    degenerate = norms[:, 0] < 1e-30
    direction = np.where(degenerate[:, None], d, g / np.where(degenerate[:, None], 1.0, norms))
    return beta_t * direction


def affine_transform(image, rotation_deg, scale, shear, fill=0.0):
    """Affine warp of one image about its center with bilinear sampling.

    ``scale`` is an (sx, sy) pair, ``shear`` an (kx, ky) pair; out-of-bounds
    samples take the ``fill`` value.
    """
    h, w = image.shape
    theta = np.deg2rad(rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shr = np.array([[1.0, shear[0]], [shear[1], 1.0]])
    scl = np.array([[scale[0], 0.0], [0.0, scale[1]]])
    inv = np.linalg.inv(rot @ shr @ scl)

    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([xs.ravel() - cx, ys.ravel() - cy])
    src = inv @ coords
    sx, sy = src[0] + cx, src[1] + cy

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0

    def sample(yi, xi):
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        out = np.full(yi.shape, fill, dtype=np.float64)
        out[inside] = image[yi[inside], xi[inside]]
        return out

    top = sample(y0, x0) * (1 - fx) + sample(y0, x0 + 1) * fx
    bottom = sample(y0 + 1, x0) * (1 - fx) + sample(y0 + 1, x0 + 1) * fx
    return (top * (1 - fy) + bottom * fy).reshape(h, w)


def affine_augment(x, image_shape, ranges, rng, fill=None):
    """Independent per-sample affine distortion of a flattened image batch."""
    x = np.asarray(x, dtype=np.float64)
    h, w = image_shape
    if x.shape[1] != h * w:
        raise ContractError(
            f"affine_augment: {x.shape[1]} features do not reshape to {h}x{w}"
        )
    if fill is None:
        fill = float(x.min())
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        rotation = rng.uniform(-ranges.rotation_deg, ranges.rotation_deg)
        scale = rng.uniform(ranges.scale_low, ranges.scale_high, size=2)
        shear = rng.uniform(-ranges.shear, ranges.shear, size=2)
        out[i] = affine_transform(
            x[i].reshape(h, w), rotation, scale, shear, fill
        ).reshape(-1)
    return out


def batch_objective(net, config, x, rng, image_shape=None):
    """Loss tensor and its scalar parts for one mini-batch.

    Parts carry the consistency term, the two entropies, the total, and the
    augmented batch actually used (for recomputation in diagnostics).
    """
    n = x.shape[0]
    sat_terms = []
    augmented = []
    if config.augmentation in ("affine", "both"):
        if image_shape is None:
            raise ConfigError("prior.augmentation includes affine but data has no image shape")
        x_aff = affine_augment(x, image_shape, config.affine, rng)
        sat_terms.append(sat_loss(net, x, x_aff))
        augmented.append(x_aff)
    if config.augmentation in ("vat", "both"):
        r = vat_perturbation(net, x, config.beta_t, config.vat_xi, rng)
        sat_terms.append(sat_loss(net, x, x + r))
        augmented.append(x + r)
    if config.augmentation == "none":
        sat_terms.append(sat_loss(net, x, x))
        augmented.append(x)
    sat = sat_terms[0]
    for extra in sat_terms[1:]:
        sat = ad.add(sat, extra)

    logits = net(Tensor(x))
    logp = ad.log_softmax(logits)
    probs = ad.exp(logp)
    h_cond = ad.mul(ad.sum_all(ad.mul(probs, logp)), -1.0 / n)
    avg = ad.mul(ad.col_sums(probs), 1.0 / n)
    h_marg = ad.neg(ad.sum_all(ad.mul(avg, ad.log(ad.add_const(avg, _LOG_FLOOR)))))

    info = ad.sub(h_marg, ad.mul(h_cond, config.beta_mu))
    total = ad.sub(sat, ad.mul(info, config.beta_p))
    parts = {
        "sat": sat.item(),
        "h_marginal": h_marg.item(),
        "h_conditional": h_cond.item(),
        "total": total.item(),
        "augmented": augmented,
    }
    return total, parts


def train_prior(config, dataset, seed=0):
    """Train the prior network; returns it with a per-epoch trace.

    The trace rows carry batch-averaged loss terms and the full-data hard
    assignment histogram at each epoch's end.
    """
    config.validate()
    if dataset.n == 0:
        raise ContractError("train_prior: dataset is empty")
    num_classes = dataset.num_classes
    if num_classes < 1:
        raise ContractError("train_prior: dataset declares no classes")
    rng = np.random.default_rng(seed)
    net = build_network(
        [dataset.d, *config.hidden, num_classes],
        ["relu"] * len(config.hidden) + ["linear"],
        seed=rng.integers(2**63),
    )
    adam = AdamState(net.params, lr=config.lr, beta1=config.beta1, beta2=config.beta2)

    features = dataset.features
    batch_size = min(config.batch, dataset.n)
    steps = max(1, dataset.n // batch_size)
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(dataset.n)
        sums = {"total": 0.0, "sat": 0.0, "h_marginal": 0.0, "h_conditional": 0.0}
        for step in range(steps):
            x = features[order[step * batch_size : (step + 1) * batch_size]]
            loss, parts = batch_objective(net, config, x, rng, dataset.image_shape)
            grads = ad.backward(loss, wrt=net.param_list())
            adam.step({p: grads[p] for p in net.param_list()})
            for key in sums:
                sums[key] += parts[key]
        assigned = hard_assignments(net, features)
        trace.append(
            PriorEpochStats(
                epoch=epoch,
                total=sums["total"] / steps,
                sat=sums["sat"] / steps,
                h_marginal=sums["h_marginal"] / steps,
                h_conditional=sums["h_conditional"] / steps,
                histogram=np.bincount(assigned, minlength=num_classes).tolist(),
            )
        )
    return net, trace


def write_prior_trace(trace, num_classes, path):
    """Per-epoch CSV: loss terms plus the hard-assignment histogram."""
    header = ["epoch", "total", "sat", "h_marginal", "h_conditional"]
    header += [f"count_{k}" for k in range(num_classes)]
    lines = [",".join(header)]
    for row in trace:
        cells = [
            str(row.epoch),
            repr(row.total),
            repr(row.sat),
            repr(row.h_marginal),
            repr(row.h_conditional),
        ]
        cells += [str(c) for c in row.histogram]
        lines.append(",".join(cells))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")

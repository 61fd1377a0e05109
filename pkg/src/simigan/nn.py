"""MLP construction, Adam updates, and binary parameter persistence.

One network class serves all four roles in the pipeline (prior, generator,
critic, encoder); the encoder additionally splits its output into a
continuous head and a categorical-logits head.
"""

from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ParseError

ACTIVATIONS = ("linear", "relu", "leaky_relu", "tanh", "sigmoid")

_MAGIC = b"SGP1"
_FORMAT_VERSION = 1


class NetworkHandle:
    """Fully-connected network with named parameters.

    Parameters are stored as ``w{i}`` / ``b{i}`` tensors with
    ``requires_grad`` set; ``head_split`` marks how many leading output
    units form the continuous head, the rest being categorical logits.
    """

    def __init__(self, layer_dims, activations, params, head_split=None, leaky_slope=0.2):
        self.layer_dims = list(layer_dims)
        self.activations = list(activations)
        self.params = params
        self.head_split = head_split
        self.leaky_slope = leaky_slope

    def forward(self, x):
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.ndim == 1:
            h = Tensor(h.data.reshape(1, -1), requires_grad=h.requires_grad)
        for i, act in enumerate(self.activations):
            h = ad.add(ad.matmul(h, self.params[f"w{i}"]), self.params[f"b{i}"])
            if act == "relu":
                h = ad.relu(h)
            elif act == "leaky_relu":
                h = ad.leaky_relu(h, self.leaky_slope)
            elif act == "tanh":
                h = ad.tanh(h)
            elif act == "sigmoid":
                h = ad.sigmoid(h)
        return h

    __call__ = forward

    def forward_heads(self, x):
        """Continuous head and logits head of the output."""
        if self.head_split is None:
            raise ContractError("forward_heads: network has no head split")
        out = self.forward(x)
        return (
            ad.slice_cols(out, 0, self.head_split),
            ad.slice_cols(out, self.head_split, self.layer_dims[-1]),
        )

    def param_items(self):
        return list(self.params.items())

    def param_list(self):
        return list(self.params.values())

    def checksum(self):
        """Order-stable digest of all parameter values."""
        return float(sum(np.sum(np.abs(v.data)) for v in self.params.values()))


def build_network(layer_dims, activations, head_split=None, seed=0, leaky_slope=0.2):
    """Glorot-uniform initialized MLP; biases start at zero.

    ``activations`` has one entry per weight layer; two builds with the same
    seed produce bit-identical parameters.
    """
    if len(layer_dims) < 2 or any(d < 1 for d in layer_dims):
        raise ContractError(f"build_network: bad layer dims {layer_dims}")
    if len(activations) != len(layer_dims) - 1:
        raise ContractError(
            f"build_network: {len(layer_dims) - 1} layers but {len(activations)} activations"
        )
    for act in activations:
        if act not in ACTIVATIONS:
            raise ContractError(f"build_network: unknown activation {act!r}")
    if head_split is not None and not 0 < head_split < layer_dims[-1]:
        raise ContractError(
            f"build_network: head split {head_split} outside output width {layer_dims[-1]}"
        )
    rng = np.random.default_rng(seed)
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"w{i}"] = Tensor(
            rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True
        )
        params[f"b{i}"] = Tensor(np.zeros(fan_out), requires_grad=True)
    return NetworkHandle(layer_dims, activations, params, head_split, leaky_slope)


class AdamState:
    """Bias-corrected Adam over a named parameter set, updating in place."""

    def __init__(self, params, lr, beta1=0.5, beta2=0.999, epsilon=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, grads):
        """Apply one update from a gradient map keyed by parameter tensor."""
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                raise ContractError(f"adam_step: missing gradient for parameter {name!r}")
            g = g.data
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / (1.0 - self.beta1**t)
            v_hat = self.v[name] / (1.0 - self.beta2**t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


def save_params(net, path):
    """Write parameters as (name, shape, float64 payload) records."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(net.params)))
        for name, p in net.params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(p.data.astype("<f8").tobytes())


def _read_exact(fh, count, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise ParseError(f"parameter file truncated reading {what}: wanted {count} bytes, got {len(buf)}")
    return buf


def load_params(net, path):
    """Restore parameters bit-exactly; names and shapes must match the net."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != _MAGIC:
            raise ParseError(f"bad parameter file magic {magic!r} at offset 0")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != _FORMAT_VERSION:
            raise ParseError(f"unsupported parameter file version {version}")
        loaded = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name!r}"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, f"shape of {name!r}"))
            n_bytes = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
            payload = _read_exact(fh, n_bytes, f"payload of {name!r}")
            loaded[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    for name, p in net.params.items():
        if name not in loaded:
            raise ParseError(f"parameter file is missing parameter {name!r}")
        if loaded[name].shape != p.data.shape:
            raise ParseError(
                f"parameter {name!r} has shape {loaded[name].shape}, network expects {p.data.shape}"
            )
    extra = set(loaded) - set(net.params)
    if extra:
        raise ParseError(f"parameter file has unknown parameters {sorted(extra)}")
    for name, arr in loaded.items():
        net.params[name].data = arr

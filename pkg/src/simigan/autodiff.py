"""Reverse-mode automatic differentiation over dense float64 tensors.

Operations record themselves onto an implicit tape: every result carries a
``TapeNode`` pointing at its inputs and a backward rule. The backward rules
are written in terms of the same public primitives, so running ``backward``
with ``create_graph=True`` records the gradient computation like any other
forward pass. Differentiating that recording again is what powers input
gradient penalties and perturbation solvers built on top of this module
(double backprop).

Conventions:

- all math is float64; inputs are coerced on tensor creation
- broadcasting is restricted to bias addition over the batch axis and 0-d
  (scalar) operands; any other shape mixing raises ``ShapeError``
- relu / leaky_relu capture their masks as constants, so their second
  derivative is treated as zero almost everywhere
- one tape per thread of execution; tensors themselves are plain values
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "TapeNode",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "square",
    "mul_const",
    "add_const",
    "sum_all",
    "mean_all",
    "row_sums",
    "col_sums",
    "tile_cols",
    "tile_rows",
    "concat_cols",
    "slice_cols",
    "softmax",
    "log_softmax",
    "l2norm_rows",
    "backward",
    "input_gradient",
    "second_order_check",
]

_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class TapeNode:
    """Record of one operation: inputs and the rule producing input gradients."""

    __slots__ = ("op", "inputs", "bwd")

    def __init__(self, op, inputs, bwd):
        self.op = op
        self.inputs = inputs
        self.bwd = bwd


class Tensor:
    """Dense float64 array, optionally attached to the differentiation tape.

    Tensors hash by identity; gradient maps returned by ``backward`` are
    keyed by the tensor objects themselves.
    """

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        """Copy of the value, severed from the tape."""
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(op, out_data, inputs, bwd):
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(inputs), bwd)
    return out


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        return add_const(a, float(b))
    if isinstance(a, (int, float)) and isinstance(b, Tensor):
        return add_const(b, float(a))
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _record("add", a.data + b.data, (a, b), lambda g: (g, g))
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return _record("add", a.data + b.data, (a, b), lambda g: (g, col_sums(g)))
    if b.ndim == 2 and a.ndim == 1 and a.shape[0] == b.shape[1]:
        return _record("add", a.data + b.data, (a, b), lambda g: (col_sums(g), g))
    if a.ndim == 0:
        return _record("add", a.data + b.data, (a, b), lambda g: (sum_all(g), g))
    if b.ndim == 0:
        return _record("add", a.data + b.data, (a, b), lambda g: (g, sum_all(g)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")


def add_const(a, c):
    """Add a constant scalar or ndarray; no gradient flows into the constant."""
    out = a.data + c
    if out.shape != a.shape:
        raise ShapeError(f"add_const: constant changes shape {a.shape} -> {out.shape}")
    return _record("add_const", out, (a,), lambda g: (g,))


def sub(a, b):
    if isinstance(b, (int, float)):
        return add_const(_as_tensor(a), -float(b))
    if isinstance(a, (int, float)):
        return add_const(neg(b), float(a))
    return add(a, neg(b))


def neg(a):
    return mul(a, -1.0)


def mul(a, b):
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        c = float(b)
        return _record("mul", a.data * c, (a,), lambda g: (mul(g, c),))
    if isinstance(a, (int, float)) and isinstance(b, Tensor):
        return mul(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _record("mul", a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)))
    if a.ndim == 0:
        return _record(
            "mul", a.data * b.data, (a, b), lambda g: (sum_all(mul(g, b)), mul(g, a))
        )
    if b.ndim == 0:
        return _record(
            "mul", a.data * b.data, (a, b), lambda g: (mul(g, b), sum_all(mul(g, a)))
        )
    raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not conform")


def mul_const(a, c):
    """Elementwise multiply by a constant ndarray of the same shape.

    The constant is outside the tape, which makes this the right tool for
    activation masks and stop-gradient targets.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: shapes {a.shape} and {c.shape} differ")
    return _record("mul_const", a.data * c, (a,), lambda g: (mul_const(g, c),))


def div(a, b):
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _record(
            "div",
            a.data / b.data,
            (a, b),
            lambda g: (div(g, b), neg(div(mul(g, a), square(b)))),
        )
    if b.ndim == 0:
        return _record(
            "div",
            a.data / b.data,
            (a, b),
            lambda g: (div(g, b), neg(div(sum_all(mul(g, a)), square(b)))),
        )
    raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not conform")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _record(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (transpose(g),))


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(a):
    mask = (a.data > 0).astype(np.float64)
    return _record("relu", a.data * mask, (a,), lambda g: (mul_const(g, mask),))


def leaky_relu(a, slope=0.2):
    mask = np.where(a.data > 0, 1.0, slope)
    return _record("leaky_relu", a.data * mask, (a,), lambda g: (mul_const(g, mask),))


def tanh(a):
    y_data = np.tanh(a.data)
    out = _record("tanh", y_data, (a,), None)
    if out.node is not None:
        out.node.bwd = lambda g: (mul(g, add_const(neg(square(out)), 1.0)),)
    return out


def sigmoid(a):
    y_data = 1.0 / (1.0 + np.exp(-a.data))
    out = _record("sigmoid", y_data, (a,), None)
    if out.node is not None:
        out.node.bwd = lambda g: (mul(g, mul(out, add_const(neg(out), 1.0))),)
    return out


def exp(a):
    out = _record("exp", np.exp(a.data), (a,), None)
    if out.node is not None:
        out.node.bwd = lambda g: (mul(g, out),)
    return out


def log(a):
    return _record("log", np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a):
    out = _record("sqrt", np.sqrt(a.data), (a,), None)
    if out.node is not None:
        out.node.bwd = lambda g: (div(g, mul(out, 2.0)),)
    return out


def square(a):
    return _record("square", a.data * a.data, (a,), lambda g: (mul(mul(g, a), 2.0),))


# ---------------------------------------------------------------------------
# reductions and shape plumbing; each expander is the adjoint of its reducer


def sum_all(a):
    return _record(
        "sum_all",
        np.asarray(np.sum(a.data)),
        (a,),
        lambda g: (_expand_full(g, a.shape),),
    )


def _expand_full(a, shape):
    if a.ndim != 0:
        raise ShapeError(f"expand_full: expected a scalar, got shape {a.shape}")
    return _record(
        "expand_full",
        np.full(shape, float(a.data)),
        (a,),
        lambda g: (sum_all(g),),
    )


def mean_all(a):
    return mul(sum_all(a), 1.0 / a.data.size)


def row_sums(a):
    """Sum along axis 1 of a matrix, keeping the column dimension."""
    if a.ndim != 2:
        raise ShapeError(f"row_sums: expected a matrix, got shape {a.shape}")
    d = a.shape[1]
    return _record(
        "row_sums",
        np.sum(a.data, axis=1, keepdims=True),
        (a,),
        lambda g: (tile_cols(g, d),),
    )


def tile_cols(a, width):
    """Tile an (N, 1) column across ``width`` columns."""
    if a.ndim != 2 or a.shape[1] != 1:
        raise ShapeError(f"tile_cols: expected an (N, 1) column, got shape {a.shape}")
    return _record(
        "tile_cols",
        np.broadcast_to(a.data, (a.shape[0], width)).copy(),
        (a,),
        lambda g: (row_sums(g),),
    )


def col_sums(a):
    """Sum along axis 0 of a matrix, producing a vector."""
    if a.ndim != 2:
        raise ShapeError(f"col_sums: expected a matrix, got shape {a.shape}")
    n = a.shape[0]
    return _record(
        "col_sums",
        np.sum(a.data, axis=0),
        (a,),
        lambda g: (tile_rows(g, n),),
    )


def tile_rows(a, count):
    """Tile a vector into ``count`` identical rows."""
    if a.ndim != 1:
        raise ShapeError(f"tile_rows: expected a vector, got shape {a.shape}")
    return _record(
        "tile_rows",
        np.broadcast_to(a.data, (count, a.shape[0])).copy(),
        (a,),
        lambda g: (col_sums(g),),
    )


def concat_cols(parts):
    """Concatenate matrices with equal row counts along axis 1."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat_cols: no operands")
    rows = parts[0].shape[0] if parts[0].ndim == 2 else None
    for p in parts:
        if p.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(
                "concat_cols: operands must be matrices with equal rows, got "
                + ", ".join(str(q.shape) for q in parts)
            )
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bwd(g):
        return tuple(slice_cols(g, bounds[i], bounds[i + 1]) for i in range(len(parts)))

    return _record(
        "concat_cols",
        np.concatenate([p.data for p in parts], axis=1),
        tuple(parts),
        bwd,
    )


def slice_cols(a, start, stop):
    """Column slice [start, stop) of a matrix."""
    if a.ndim != 2:
        raise ShapeError(f"slice_cols: expected a matrix, got shape {a.shape}")
    n, d = a.shape
    if not (0 <= start <= stop <= d):
        raise ContractError(f"slice_cols: bounds [{start}, {stop}) outside 0..{d}")

    def bwd(g):
        left = Tensor(np.zeros((n, start)))
        right = Tensor(np.zeros((n, d - stop)))
        return (concat_cols([left, g, right]),)

    return _record("slice_cols", a.data[:, start:stop].copy(), (a,), bwd)


# ---------------------------------------------------------------------------
# composites


def softmax(a):
    """Row-wise softmax of a matrix."""
    if a.ndim != 2:
        raise ShapeError(f"softmax: expected a matrix, got shape {a.shape}")
    shifted = add_const(a, -np.max(a.data, axis=1, keepdims=True))
    e = exp(shifted)
    return div(e, tile_cols(row_sums(e), a.shape[1]))


def log_softmax(a):
    """Row-wise log-softmax of a matrix."""
    if a.ndim != 2:
        raise ShapeError(f"log_softmax: expected a matrix, got shape {a.shape}")
    shifted = add_const(a, -np.max(a.data, axis=1, keepdims=True))
    lse = log(row_sums(exp(shifted)))
    return sub(shifted, tile_cols(lse, a.shape[1]))


def l2norm_rows(a):
    """Per-row Euclidean norm of a matrix, shaped (N, 1).

    The derivative at an exactly-zero row is undefined; callers that can hit
    that case should square the norm instead.
    """
    return sqrt(row_sums(square(a)))


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root):
    """Tensors carrying nodes, children before parents, each visited once."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if t.node is None or id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            if inp.node is not None and id(inp) not in visited:
                stack.append((inp, False))
    return order


def backward(loss, wrt=None, create_graph=False):
    """Gradient map of a scalar loss, keyed by tensor.

    ``wrt`` selects which tensors appear in the map; tensors the graph never
    touched get an exactly-zero gradient. When ``wrt`` is omitted, all
    requires-grad leaves reachable from the loss are used. With
    ``create_graph=True`` the returned gradients are themselves on the tape.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward: loss must be a Tensor")
    if loss.data.ndim != 0:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    order = _toposort(loss)
    if wrt is None:
        wrt_list, seen = [], set()
        for t in order:
            for inp in t.node.inputs:
                if inp.node is None and inp.requires_grad and id(inp) not in seen:
                    seen.add(id(inp))
                    wrt_list.append(inp)
        if loss.node is None and loss.requires_grad:
            wrt_list.append(loss)
    else:
        wrt_list = list(wrt)
    keep = {id(t) for t in wrt_list}

    grads = {id(loss): Tensor(np.ones((), dtype=np.float64))}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for t in reversed(order):
            g = grads.get(id(t))
            if g is None:
                continue
            if id(t) not in keep:
                del grads[id(t)]
            for inp, pg in zip(t.node.inputs, t.node.bwd(g)):
                if pg is None or not (inp.requires_grad or inp.node is not None):
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = pg if prev is None else add(prev, pg)
    return {t: grads.get(id(t), Tensor(np.zeros_like(t.data))) for t in wrt_list}


def input_gradient(net, x, scalar_head=None):
    """Differentiable gradient of a scalar reduction of ``net(x)`` w.r.t. x.

    ``net`` is any callable from Tensor to Tensor; ``scalar_head`` reduces the
    network output to a scalar (default: sum over all entries). The result
    stays on the tape, so penalties built from it back-propagate into the
    network parameters.
    """
    if scalar_head is None:
        scalar_head = sum_all
    if not x.requires_grad:
        raise ContractError("input_gradient: x must require gradients")
    out = scalar_head(net(x))
    if not isinstance(out, Tensor) or out.data.ndim != 0:
        raise ContractError("input_gradient: scalar_head must reduce the output to a scalar")
    return backward(out, wrt=[x], create_graph=True)[x]


def second_order_check(f, point, params, step=1e-5):
    """Max relative error of the double-backward path on one test function.

    ``f`` maps a Tensor built from ``point`` to a scalar Tensor, closing over
    ``params``. Compares the analytic parameter gradient of
    ``sum(square(d f / d point))`` against central finite differences of the
    same quantity under parameter perturbation. Diagnostic only.
    """
    point_data = np.asarray(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    def penalty_value():
        x = Tensor(point_data, requires_grad=True)
        g = backward(f(x), wrt=[x])[x]
        return float(np.sum(g.data * g.data))

    x = Tensor(point_data, requires_grad=True)
    g = backward(f(x), wrt=[x], create_graph=True)[x]
    analytic = backward(sum_all(square(g)), wrt=params)

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        ana = analytic[p].data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            hi = penalty_value()
            flat[i] = saved - step
            lo = penalty_value()
            flat[i] = saved
            fd = (hi - lo) / (2.0 * step)
            err = abs(ana[i] - fd) / max(abs(ana[i]), abs(fd), 1e-3)
            worst = max(worst, err)
    return worst

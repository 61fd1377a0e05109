import numpy as np
import pytest

from simigan import autodiff as ad
from simigan.errors import ContractError, ShapeError

from helpers import fd_gradients, max_rel_err


def t(data, grad=False):
    return ad.Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


def grad_of(loss, x):
    return ad.backward(loss, wrt=[x])[x].data


# ---------------------------------------------------------------------------
# forward values


def test_square_scalar():
    assert ad.square(t(3.0)).item() == 9.0


def test_softmax_uniform():
    y = ad.softmax(t([[0.0, 0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(y.data, [[0.25, 0.25, 0.25, 0.25]], atol=1e-15)


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4))
    want = np.zeros((2, 4))
    for i in range(2):
        for j in range(4):
            for k in range(3):
                want[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(ad.matmul(t(a), t(b)).data, want, atol=1e-12)


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match="matmul.*2, 3.*4, 5"):
        ad.matmul(t(np.zeros((2, 3))), t(np.zeros((4, 5))))
    with pytest.raises(ShapeError, match="add"):
        ad.add(t(np.zeros((2, 3))), t(np.zeros((3, 2))))


def test_log_softmax_matches_log_of_softmax():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 7))
    np.testing.assert_allclose(
        ad.log_softmax(t(x)).data, np.log(ad.softmax(t(x)).data), atol=1e-12
    )


# ---------------------------------------------------------------------------
# first-order gradients


def test_square_gradient():
    x = t(3.0, grad=True)
    assert grad_of(ad.square(x), x) == pytest.approx(6.0)


def test_softmax_sum_has_zero_gradient():
    x = t(np.random.default_rng(2).normal(size=(3, 5)), grad=True)
    g = grad_of(ad.sum_all(ad.softmax(x)), x)
    np.testing.assert_allclose(g, np.zeros((3, 5)), atol=1e-12)


def test_non_scalar_loss_rejected():
    x = t(np.zeros((2, 2)), grad=True)
    with pytest.raises(ContractError, match="scalar"):
        ad.backward(ad.square(x), wrt=[x])


def test_untouched_leaf_gets_zero_gradient():
    x = t(2.0, grad=True)
    unused = t(np.zeros((3, 2)), grad=True)
    grads = ad.backward(ad.square(x), wrt=[x, unused])
    assert grads[x].item() == pytest.approx(4.0)
    np.testing.assert_array_equal(grads[unused].data, np.zeros((3, 2)))


def _mlp_loss(w0, b0, w1, b1, w2, b2, x):
    h = ad.tanh(ad.add(ad.matmul(t(x), w0), b0))
    h = ad.leaky_relu(ad.add(ad.matmul(h, w1), b1))
    out = ad.add(ad.matmul(h, w2), b2)
    return ad.mean_all(ad.square(out))


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    dims = [(4, 5), (5, 5), (5, 2)]
    arrays = []
    for din, dout in dims:
        arrays.append(rng.normal(size=(din, dout)) * 0.7)
        arrays.append(rng.normal(size=dout) * 0.1)
    x = rng.normal(size=(6, 4))

    params = [t(a, grad=True) for a in arrays]

    loss = _mlp_loss(*params, x)
    grads = ad.backward(loss, wrt=params)

    def value(*arrs):
        return _mlp_loss(*[t(a) for a in arrs], x).item()

    fd = fd_gradients(value, [p.data for p in params])
    for p, f in zip(params, fd):
        assert max_rel_err(grads[p].data, f) < 1e-4


OP_CASES = {
    "add": lambda a, b: ad.add(a, b),
    "add_bias": lambda a, v: ad.add(a, v),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "div": lambda a, b: ad.div(a, ad.add_const(ad.square(b), 0.5)),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)),
    "relu": lambda a, _: ad.relu(a),
    "leaky_relu": lambda a, _: ad.leaky_relu(a),
    "tanh": lambda a, _: ad.tanh(a),
    "sigmoid": lambda a, _: ad.sigmoid(a),
    "exp": lambda a, _: ad.exp(a),
    "log": lambda a, _: ad.log(ad.add_const(ad.square(a), 0.1)),
    "sqrt": lambda a, _: ad.sqrt(ad.add_const(ad.square(a), 0.1)),
    "square": lambda a, _: ad.square(a),
    "softmax": lambda a, _: ad.mul_const(ad.softmax(a), np.arange(12.0).reshape(3, 4)),
    "log_softmax": lambda a, _: ad.mul_const(
        ad.log_softmax(a), np.arange(12.0).reshape(3, 4)
    ),
    "l2norm_rows": lambda a, _: ad.l2norm_rows(a),
    "row_sums": lambda a, _: ad.square(ad.row_sums(a)),
    "col_sums": lambda a, _: ad.square(ad.col_sums(a)),
    "tile_cols": lambda a, _: ad.square(ad.tile_cols(ad.row_sums(a), 3)),
    "concat_slice": lambda a, b: ad.square(
        ad.concat_cols([ad.slice_cols(a, 1, 3), b])
    ),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    fn = OP_CASES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(10):
        a = rng.normal(size=(3, 4)) + 0.05  # nudge off relu/abs kinks
        b = rng.normal(size=(3, 4)) + 0.05
        ta, tb = t(a, grad=True), t(b, grad=True)
        loss = ad.sum_all(ad.square(fn(ta, tb)))
        grads = ad.backward(loss, wrt=[ta, tb])

        def value(aa, bb):
            return ad.sum_all(ad.square(fn(t(aa), t(bb)))).item()

        fd = fd_gradients(value, [a, b])
        assert max_rel_err(grads[ta].data, fd[0]) < 1e-4, name
        assert max_rel_err(grads[tb].data, fd[1]) < 1e-4, name


def test_bias_add_gradient():
    rng = np.random.default_rng(4)
    a, v = rng.normal(size=(3, 4)), rng.normal(size=4)
    ta, tv = t(a, grad=True), t(v, grad=True)
    grads = ad.backward(ad.sum_all(ad.square(ad.add(ta, tv))), wrt=[ta, tv])

    def value(aa, vv):
        return ad.sum_all(ad.square(ad.add(t(aa), t(vv)))).item()

    fd = fd_gradients(value, [a, v])
    assert max_rel_err(grads[ta].data, fd[0]) < 1e-4
    assert max_rel_err(grads[tv].data, fd[1]) < 1e-4


def test_tape_replay_is_deterministic():
    rng = np.random.default_rng(5)
    x = t(rng.normal(size=(4, 3)), grad=True)
    w = t(rng.normal(size=(3, 2)), grad=True)
    loss = ad.mean_all(ad.square(ad.tanh(ad.matmul(x, w))))
    g1 = ad.backward(loss, wrt=[x, w])
    g2 = ad.backward(loss, wrt=[x, w])
    np.testing.assert_array_equal(g1[x].data, g2[x].data)
    np.testing.assert_array_equal(g1[w].data, g2[w].data)


def test_forward_is_bit_identical_across_runs():
    rng = np.random.default_rng(6)
    x, w = rng.normal(size=(5, 4)), rng.normal(size=(4, 4))
    a = ad.softmax(ad.matmul(t(x), ad.tanh(t(w)))).data
    b = ad.softmax(ad.matmul(t(x), ad.tanh(t(w)))).data
    np.testing.assert_array_equal(a, b)


def test_no_grad_suppresses_recording():
    x = t(2.0, grad=True)
    with ad.no_grad():
        y = ad.square(x)
    assert y.node is None and not y.requires_grad


# ---------------------------------------------------------------------------
# input gradients and the double-backward path


def test_input_gradient_linear_map():
    w = np.array([[1.0], [-2.0], [0.5]])
    net = lambda x: ad.matmul(x, t(w))
    for seed in range(3):
        x = t(np.random.default_rng(seed).normal(size=(4, 3)), grad=True)
        g = ad.input_gradient(net, x)
        np.testing.assert_allclose(g.data, np.tile(w.T, (4, 1)), atol=1e-12)


def test_input_gradient_of_squared_norm():
    x = t(np.random.default_rng(7).normal(size=(5, 3)), grad=True)
    g = ad.input_gradient(lambda v: ad.sum_all(ad.square(v)), x)
    np.testing.assert_allclose(g.data, 2 * x.data, atol=1e-12)


def test_input_gradient_requires_grad_flag():
    x = t(np.zeros((2, 2)))
    with pytest.raises(ContractError, match="require"):
        ad.input_gradient(lambda v: v, x)


def test_input_gradient_rejects_non_scalar_head():
    x = t(np.zeros((2, 2)), grad=True)
    with pytest.raises(ContractError, match="scalar"):
        ad.input_gradient(lambda v: v, x, scalar_head=lambda y: y)


def test_input_gradient_tanh_mlp_matches_finite_differences():
    rng = np.random.default_rng(8)
    w0, b0 = rng.normal(size=(3, 6)), rng.normal(size=6)
    w1, b1 = rng.normal(size=(6, 1)), rng.normal(size=1)

    def net(v):
        return ad.add(ad.matmul(ad.tanh(ad.add(ad.matmul(v, t(w0)), t(b0))), t(w1)), t(b1))

    x = rng.normal(size=(4, 3))
    tx = t(x, grad=True)
    g = ad.input_gradient(net, tx)

    def value(xx):
        return ad.sum_all(net(t(xx))).item()

    fd = fd_gradients(value, [x])[0]
    assert max_rel_err(g.data, fd) < 1e-4


def test_second_order_quadratic_closed_form():
    # f(x) = theta * sum(x^2): penalty = 4 theta^2 sum(x^2), quadratic in theta
    theta = t(1.5, grad=True)
    point = t(np.array([[1.0, -2.0, 0.5]]))
    err = ad.second_order_check(
        lambda x: ad.mul(ad.sum_all(ad.square(x)), theta), point, [theta]
    )
    assert err < 1e-6


def test_second_order_linear_in_x():
    # f(x) = x @ w: input gradient is w, penalty sum(w^2) per row
    rng = np.random.default_rng(9)
    w = t(rng.normal(size=(3, 1)), grad=True)
    point = t(rng.normal(size=(2, 3)))
    x = ad.Tensor(point.data, requires_grad=True)
    g = ad.input_gradient(lambda v: ad.matmul(v, w), x)
    penalty = ad.sum_all(ad.square(g))
    grads = ad.backward(penalty, wrt=[x, w])
    np.testing.assert_allclose(grads[x].data, np.zeros((2, 3)), atol=1e-12)
    # rows of g each equal w, so d penalty / d w = 2 * rows * w
    np.testing.assert_allclose(grads[w].data, 2 * 2 * w.data, atol=1e-10)
    assert ad.second_order_check(lambda v: ad.sum_all(ad.matmul(v, w)), point, [w]) < 1e-6


def test_second_order_random_mlp():
    rng = np.random.default_rng(10)
    w0 = t(rng.normal(size=(3, 5)) * 0.8, grad=True)
    b0 = t(rng.normal(size=5) * 0.1, grad=True)
    w1 = t(rng.normal(size=(5, 1)) * 0.8, grad=True)

    def f(x):
        return ad.sum_all(ad.matmul(ad.tanh(ad.add(ad.matmul(x, w0), b0)), w1))

    point = t(rng.normal(size=(2, 3)))
    assert ad.second_order_check(f, point, [w0, b0, w1]) < 1e-3


def test_relu_double_backward_has_zero_curvature():
    # d/dx of relu'(x) treated as zero: penalty gradient w.r.t. x vanishes
    x = t(np.array([[0.7, -0.3, 1.2]]), grad=True)
    g = ad.input_gradient(lambda v: ad.sum_all(ad.relu(v)), x)
    grads = ad.backward(ad.sum_all(ad.square(g)), wrt=[x])
    np.testing.assert_array_equal(grads[x].data, np.zeros((1, 3)))


SMOOTH_UNARY = [
    ad.tanh,
    ad.sigmoid,
    lambda v: ad.exp(ad.mul(v, 0.3)),
    lambda v: ad.log(ad.add_const(ad.square(v), 0.2)),
    lambda v: ad.sqrt(ad.add_const(ad.square(v), 0.2)),
    ad.square,
    ad.softmax,
    ad.log_softmax,
    lambda v: ad.tile_cols(ad.row_sums(v), 4),
    lambda v: ad.slice_cols(ad.concat_cols([v, v]), 2, 6),
    ad.transpose,
]

SMOOTH_BINARY = [
    ad.add,
    ad.sub,
    ad.mul,
    lambda a, b: ad.div(a, ad.add_const(ad.square(b), 0.7)),
    lambda a, b: ad.matmul(a, ad.transpose(b)),
    lambda a, b: ad.add(ad.mul(a, ad.sum_all(b)), b),
]


def _random_graph(ops_rng, a, b, depth):
    """Compose random smooth ops; keeps everything square so shapes close."""
    nodes = [a, b]
    for _ in range(depth):
        if ops_rng.random() < 0.5:
            op = SMOOTH_UNARY[ops_rng.integers(len(SMOOTH_UNARY))]
            operand = nodes[ops_rng.integers(len(nodes))]
            if operand.shape != (4, 4):
                continue
            nodes.append(op(operand))
        else:
            op = SMOOTH_BINARY[ops_rng.integers(len(SMOOTH_BINARY))]
            lhs = nodes[ops_rng.integers(len(nodes))]
            rhs = nodes[ops_rng.integers(len(nodes))]
            if lhs.shape != (4, 4) or rhs.shape != (4, 4):
                continue
            nodes.append(op(lhs, rhs))
    total = nodes[-1]
    return ad.mean_all(ad.square(total))


def test_random_graph_fuzzer_matches_finite_differences():
    # shared subexpressions and repeated operands exercise accumulation
    for trial in range(30):
        data_rng = np.random.default_rng(1000 + trial)
        av = data_rng.normal(size=(4, 4)) * 0.5
        bv = data_rng.normal(size=(4, 4)) * 0.5

        def value(aa, bb, seed=2000 + trial):
            return _random_graph(
                np.random.default_rng(seed), t(aa, grad=True), t(bb, grad=True), 6
            ).item()

        ta, tb = t(av, grad=True), t(bv, grad=True)
        loss = _random_graph(np.random.default_rng(2000 + trial), ta, tb, 6)
        grads = ad.backward(loss, wrt=[ta, tb])
        fd = fd_gradients(value, [av, bv])
        assert max_rel_err(grads[ta].data, fd[0]) < 1e-4, trial
        assert max_rel_err(grads[tb].data, fd[1]) < 1e-4, trial


def test_shared_graph_backward_for_disjoint_parameter_sets():
    # one recorded graph queried twice, as the generator/encoder updates do
    rng = np.random.default_rng(42)
    w_a = t(rng.normal(size=(3, 4)), grad=True)
    w_b = t(rng.normal(size=(4, 2)), grad=True)
    x = rng.normal(size=(5, 3))

    def graph():
        return ad.mean_all(ad.square(ad.tanh(ad.matmul(ad.matmul(t(x), w_a), w_b))))

    shared = graph()
    from_shared_a = ad.backward(shared, wrt=[w_a])[w_a].data
    from_shared_b = ad.backward(shared, wrt=[w_b])[w_b].data

    fresh_a = ad.backward(graph(), wrt=[w_a])[w_a].data
    fresh_b = ad.backward(graph(), wrt=[w_b])[w_b].data
    np.testing.assert_array_equal(from_shared_a, fresh_a)
    np.testing.assert_array_equal(from_shared_b, fresh_b)

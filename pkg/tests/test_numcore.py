import numpy as np
import pytest
from hypothesis import given, strategies as st

from turntake import numcore as nc
from turntake.numcore import ContractError, DimensionError, NonFiniteError, Tensor, grad_check

shapes = st.tuples(st.integers(1, 4), st.integers(1, 5))


def _arr(seed, shape, lo=-2.0, hi=2.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


@given(shapes, st.integers(0, 10_000))
def test_elementwise_grads(shape, seed):
    a, b = _arr(seed, shape), _arr(seed + 1, shape)
    for fn in (lambda x, y: nc.mul(nc.add(x, y), nc.sub(x, y)),
               lambda x, y: nc.mul(nc.tanh(x), nc.sigmoid(y)),
               lambda x, y: nc.mul(nc.exp(nc.mul(x, 0.3)), y)):
        assert grad_check(lambda x, y: nc.reduce_sum(fn(x, y)), [a, b]) < 1e-6


@given(st.integers(0, 10_000))
def test_log_and_pow(seed):
    a = _arr(seed, (3, 4), 0.5, 2.0)
    assert grad_check(lambda x: nc.reduce_sum(nc.log(x)), [a]) < 1e-6
    assert grad_check(lambda x: nc.reduce_sum(nc.pow_scalar(x, 2.5)), [a]) < 1e-6


def test_relu_grad_away_from_kink():
    a = np.array([[-1.0, 0.5], [2.0, -0.3]])
    assert grad_check(lambda x: nc.reduce_sum(nc.mul(nc.relu(x), x)), [a]) < 1e-6


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_matmul_batched_and_broadcast(b, n, k, seed):
    x, w = _arr(seed, (b, n, k)), _arr(seed + 1, (k, 3))
    assert grad_check(lambda p, q: nc.reduce_sum(nc.mul(nc.matmul(p, q), nc.matmul(p, q))), [x, w]) < 1e-6
    y = _arr(seed + 2, (b, k, 2))
    assert grad_check(lambda p, q: nc.reduce_sum(nc.matmul(p, q)), [x, y]) < 1e-6


def test_broadcast_add_reduces_gradient():
    x = Tensor(np.ones((3, 4)), requires_grad=True)
    bias = Tensor(np.zeros(4), requires_grad=True)
    nc.backward(nc.reduce_sum(nc.add(x, bias)))
    np.testing.assert_array_equal(bias.grad, np.full(4, 3.0))


def test_shape_ops():
    a = _arr(0, (2, 3, 4))
    assert grad_check(lambda x: nc.reduce_sum(nc.mul(nc.transpose(x, (2, 0, 1)), 2.0)), [a]) < 1e-6
    assert grad_check(lambda x: nc.reduce_mean(nc.pow_scalar(nc.reshape(x, (6, 4)), 2)), [a]) < 1e-6
    assert grad_check(lambda x: nc.reduce_sum(nc.pow_scalar(nc.index(x, (slice(None), 1)), 2)), [a]) < 1e-6
    b = _arr(1, (2, 3, 2))
    assert grad_check(lambda x, y: nc.reduce_sum(nc.pow_scalar(nc.concat([x, y], -1), 2)), [a, b]) < 1e-6


def test_index_with_repeated_rows_accumulates():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    nc.backward(nc.reduce_sum(nc.index(x, (np.array([0, 0, 2]),))))
    np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])


def test_softmax_rows_sum_to_one_and_masking():
    x = Tensor(_arr(0, (2, 3, 5)))
    mask = np.array([[True, True, False, False, False]] * 3)
    p = nc.softmax(x, mask=mask[None]).data
    np.testing.assert_allclose(p.sum(-1), 1.0)
    assert np.all(p[..., 2:] == 0)


def test_softmax_fully_masked_row_is_zero():
    p = nc.softmax(Tensor(np.ones((1, 3))), mask=np.zeros((1, 3), bool)).data
    assert np.all(p == 0)


def test_softmax_grad():
    a = _arr(3, (2, 4))
    w = _arr(4, (2, 4))
    mask = np.array([[True, True, True, False], [True, False, True, True]])
    assert grad_check(lambda x: nc.reduce_sum(nc.mul(nc.softmax(x, mask), w)), [a]) < 1e-6


def test_layer_norm_grad_and_stats():
    x, g, b = _arr(0, (2, 3, 6)), _arr(1, (6,), 0.5, 1.5), _arr(2, (6,))
    w = _arr(3, (2, 3, 6))
    assert grad_check(lambda p, q, r: nc.reduce_sum(nc.mul(nc.layer_norm(p, q, r), w)), [x, g, b]) < 1e-5
    out = nc.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(-1), 1.0, rtol=1e-4)


def test_dropout_is_inverted_and_identity_in_eval(rng):
    x = Tensor(np.ones((200, 200)))
    assert nc.dropout(x, 0.5, rng, training=False) is x
    y = nc.dropout(x, 0.25, rng, training=True).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}
    assert abs(y.mean() - 1.0) < 0.02
    with pytest.raises(ContractError):
        nc.dropout(x, 0.1, None, training=True)


@pytest.mark.parametrize("k", [1, 3])
def test_conv1d_grad(k):
    x, w, b = _arr(0, (2, 4, 3)), _arr(1, (k, 3, 2)), _arr(2, (2,))
    weight = _arr(3, (2, 4, 2))
    assert grad_check(lambda p, q, r: nc.reduce_sum(nc.mul(nc.conv1d(p, q, r), weight)), [x, w, b]) < 1e-6


def test_conv1d_rejects_even_kernel():
    with pytest.raises(DimensionError):
        nc.conv1d(Tensor(np.zeros((1, 3, 2))), Tensor(np.zeros((2, 2, 2))), Tensor(np.zeros(2)))


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_grad_with_padding(reverse):
    B, S, I, H = 3, 4, 2, 3
    x = _arr(0, (B, S, I))
    w_ih, w_hh, b = _arr(1, (I, 4 * H), -0.5, 0.5), _arr(2, (H, 4 * H), -0.5, 0.5), _arr(3, (4 * H,), -0.5, 0.5)
    mask = np.arange(S)[None, :] < np.array([4, 2, 1])[:, None]
    weight = _arr(4, (B, S, H))

    def f(x_, a, c, d):
        return nc.reduce_sum(nc.mul(nc.lstm(x_, a, c, d, mask=mask, reverse=reverse), weight))

    assert grad_check(f, [x, w_ih, w_hh, b]) < 1e-5


def test_lstm_padding_outputs_zero_and_matches_truncated():
    B, S, I, H = 2, 5, 3, 4
    rng = np.random.default_rng(0)
    x = rng.normal(size=(B, S, I))
    params = [Tensor(rng.normal(0, 0.4, s)) for s in ((I, 4 * H), (H, 4 * H), (4 * H,))]
    mask = np.arange(S)[None, :] < np.array([5, 3])[:, None]
    full = nc.lstm(Tensor(x), *params, mask=mask).data
    assert np.all(full[1, 3:] == 0)
    short = nc.lstm(Tensor(x[1:, :3]), *params).data
    np.testing.assert_allclose(full[1, :3], short[0], rtol=1e-12)
    rev_full = nc.lstm(Tensor(x), *params, mask=mask, reverse=True).data
    rev_short = nc.lstm(Tensor(x[1:, :3]), *params, reverse=True).data
    np.testing.assert_allclose(rev_full[1, :3], rev_short[0], rtol=1e-12)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        nc.backward(nc.mul(x, 2.0))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with nc.no_grad():
        assert not nc.grad_enabled()
        y = nc.reduce_sum(nc.mul(x, 2.0))
    assert nc.grad_enabled()
    assert y.is_leaf and not y.requires_grad


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    nc.backward(nc.reduce_sum(nc.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_non_finite_forward_is_reported():
    with pytest.raises(NonFiniteError), np.errstate(divide="ignore"):
        nc.log(Tensor(np.array([0.0, 1.0]), requires_grad=True))


def test_graph_topology_orders_parents_after_children():
    a = Tensor(np.ones(2), requires_grad=True)
    b = nc.mul(a, 3.0)
    c = nc.reduce_sum(nc.add(b, a))
    graph = nc.ComputeGraph.trace(c)
    order = graph.topological_index()
    assert order[id(c)] < order[id(b)]
    assert [id(t) for t in graph.leaves()] == [id(a)]

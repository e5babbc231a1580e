import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from escm2 import diffcore as dc
from escm2.diffcore import ContractError, DimensionError, Tensor, backward

from oracles import central_difference, relative_error


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _check_gradient(build, leaves, tol=1e-6):
    grads = backward(build(), wrt=leaves)
    for leaf in leaves:
        numeric = central_difference(lambda: build().item(), leaf.value)
        assert relative_error(grads[leaf], numeric) < tol


# --- forward values -------------------------------------------------------

def test_dense_identity_weights_returns_input(rng):
    x = rng.normal(size=(4, 3))
    out = dc.dense(x, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(out.value, x)


def test_dense_sigmoid_of_zero_is_half():
    out = dc.dense(np.zeros((2, 3)), np.ones((3, 4)), np.zeros(4), "sigmoid")
    np.testing.assert_array_equal(out.value, np.full((2, 4), 0.5))


def test_dense_matches_hand_multiplied_affine_map():
    x = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    w = np.array([[2.0, -1.0], [0.5, 4.0]])
    b = np.array([0.1, -0.2])
    expected = np.empty((3, 2))
    for i in range(3):
        for j in range(2):
            expected[i, j] = x[i, 0] * w[0, j] + x[i, 1] * w[1, j] + b[j]
    np.testing.assert_allclose(dc.dense(x, w, b).value, expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(dc.dense(x, w, b, "relu").value, np.maximum(expected, 0), atol=1e-15)


def test_dense_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        dc.dense(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))
    with pytest.raises(DimensionError):
        dc.dense(np.zeros((2, 3)), np.zeros((3, 2)), np.zeros(3))


def test_dense_unknown_activation():
    with pytest.raises(ValueError, match="activation"):
        dc.dense(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), "tanh")


def test_elementwise_shape_rules():
    a = Tensor(np.ones((3, 2)))
    assert dc.add(a, np.ones(2)).shape == (3, 2)
    assert dc.mul(a, 2.0).shape == (3, 2)
    with pytest.raises(DimensionError):
        dc.add(a, np.ones(3))
    with pytest.raises(DimensionError):
        dc.mul(np.ones((2, 2)), np.ones((3, 3)))


def test_matmul_rejects_nonconforming():
    with pytest.raises(DimensionError):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_mean_of_empty_tensor_raises():
    with pytest.raises(ContractError):
        dc.mean(np.zeros(0))


def test_bce_is_finite_at_saturated_predictions():
    out = dc.binary_cross_entropy(np.array([1.0, 0.0, 1.0, 0.0]), np.array([0.0, 1.0, 1.0, 0.0]))
    assert np.all(np.isfinite(out.value))
    assert out.value[0] == pytest.approx(-np.log(1e-7))
    assert out.value[2] == pytest.approx(0.0, abs=1e-6)


# --- backward -------------------------------------------------------------

def test_gradient_of_sum_is_one(rng):
    w = _param(rng, 5)
    g = backward(dc.total(w))[w]
    np.testing.assert_array_equal(g, np.ones(5))


def test_sigmoid_gradient_at_zero():
    w = Tensor(np.zeros(1), requires_grad=True)
    assert backward(dc.sigmoid(w))[w][0] == 0.25


def test_backward_needs_scalar(rng):
    w = _param(rng, 3)
    with pytest.raises(ContractError):
        backward(dc.sigmoid(w))


def test_backward_wrt_unreached_leaf_is_zero(rng):
    w, u = _param(rng, 3), _param(rng, 2)
    grads = backward(dc.total(w), wrt=[w, u])
    np.testing.assert_array_equal(grads[u], np.zeros(2))


def test_shared_subexpression_accumulates(rng):
    # f = sum(w * w + w); df/dw = 2w + 1, with w reached along three paths
    w = _param(rng, 4)
    g = backward(dc.total(w * w + w))[w]
    np.testing.assert_allclose(g, 2 * w.value + 1, rtol=1e-15)


@pytest.mark.parametrize("op", ["sigmoid", "softplus", "square", "log", "relu"])
def test_unary_gradients_match_finite_differences(rng, op):
    w = Tensor(rng.uniform(0.2, 2.0, size=6) * rng.choice([-1, 1], 6), requires_grad=True)
    if op == "log":
        w.value[:] = np.abs(w.value)
    fn = getattr(dc, op)
    _check_gradient(lambda: dc.total(dc.mul(fn(w), np.arange(1.0, 7.0))), [w])


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_broadcast_binary_gradients_match_finite_differences(rng, op):
    a = _param(rng, 4, 3)
    b = Tensor(rng.uniform(0.5, 2.0, size=3), requires_grad=True)
    s = Tensor(rng.uniform(0.5, 2.0, size=1), requires_grad=True)
    fn = getattr(dc, op)
    weights = rng.normal(size=(4, 3))
    _check_gradient(lambda: dc.total(dc.mul(fn(fn(a, b), s), weights)), [a, b, s])


def test_maximum_and_clamp_gradients(rng):
    w = Tensor(np.array([-1.0, 0.3, 0.7, 2.0]), requires_grad=True)
    g = backward(dc.total(dc.maximum(w, 0.5)))[w]
    np.testing.assert_array_equal(g, [0, 0, 1, 1])
    g = backward(dc.total(dc.clamp(w, 0.0, 1.0)))[w]
    np.testing.assert_array_equal(g, [0, 1, 1, 0])


def test_bce_gradients_in_label_and_prediction(rng):
    y = Tensor(rng.uniform(0.1, 0.9, size=5), requires_grad=True)
    z = _param(rng, 5)
    _check_gradient(lambda: dc.mean(dc.binary_cross_entropy(y, dc.sigmoid(z))), [y, z])


@pytest.mark.parametrize("activation", ["identity", "relu", "sigmoid", "softplus"])
def test_dense_gradients_match_finite_differences(rng, activation):
    x, w, b = _param(rng, 5, 4), _param(rng, 4, 3), _param(rng, 3)
    probe = rng.normal(size=(5, 3))
    _check_gradient(lambda: dc.total(dc.mul(dc.dense(x, w, b, activation), probe)), [x, w, b])


def test_dense_agrees_with_composed_ops(rng):
    x, w, b = _param(rng, 5, 4), _param(rng, 4, 3), _param(rng, 3)
    fused = dc.total(dc.sigmoid(dc.dense(x, w, b)))
    composed = dc.total(dc.sigmoid(dc.add(dc.matmul(x, w), b)))
    assert fused.item() == pytest.approx(composed.item(), rel=1e-14)
    g1, g2 = backward(fused, [x, w, b]), backward(composed, [x, w, b])
    for t in (x, w, b):
        np.testing.assert_allclose(g1[t], g2[t], rtol=1e-12, atol=1e-15)


# --- stop-gradient --------------------------------------------------------

def test_stop_gradient_is_forward_identity(rng):
    x = _param(rng, 3, 2)
    np.testing.assert_array_equal(dc.stop_gradient(x).value, x.value)


def test_stop_gradient_blocks_flow(rng):
    w = _param(rng, 4)
    assert np.all(backward(dc.total(dc.stop_gradient(w)), wrt=[w])[w] == 0)
    # w reaches the output both directly and through the detached copy
    g = backward(dc.total(dc.mul(w, dc.stop_gradient(w))), wrt=[w])[w]
    np.testing.assert_array_equal(g, w.value)


# --- embedding ------------------------------------------------------------

def _embedding_brute_force(table, ids):
    out = np.zeros((ids.shape[0], table.shape[1]))
    for i, row in enumerate(ids):
        for j in row:
            out[i] += table[j]
    return out / ids.shape[1]


@pytest.mark.parametrize("dense_path", [True, False])
def test_embedding_mean_matches_loop(rng, monkeypatch, dense_path):
    if not dense_path:
        monkeypatch.setattr(dc, "_ONE_HOT_LIMIT", 0)
    table = _param(rng, 9, 3)
    ids = rng.integers(0, 9, size=(7, 4))
    ids[0] = [2, 2, 5, 2]  # repeated id within a row
    out = dc.embedding_mean(table, ids)
    np.testing.assert_allclose(out.value, _embedding_brute_force(table.value, ids), atol=1e-15)
    probe = rng.normal(size=(7, 3))
    _check_gradient(lambda: dc.total(dc.mul(dc.embedding_mean(table, ids), probe)), [table])


def test_embedding_paths_agree(rng, monkeypatch):
    table = _param(rng, 11, 4)
    ids = rng.integers(0, 11, size=(20, 3))
    probe = rng.normal(size=(20, 4))
    g_dense = backward(dc.total(dc.mul(dc.embedding_mean(table, ids), probe)))[table]
    monkeypatch.setattr(dc, "_ONE_HOT_LIMIT", 0)
    g_sparse = backward(dc.total(dc.mul(dc.embedding_mean(table, ids), probe)))[table]
    np.testing.assert_allclose(g_dense, g_sparse, rtol=1e-12, atol=1e-15)


def test_embedding_errors(rng):
    table = _param(rng, 4, 2)
    with pytest.raises(IndexError):
        dc.embedding_mean(table, np.array([[0, 4]]))
    with pytest.raises(IndexError):
        dc.embedding_mean(table, np.array([[-1, 0]]))
    with pytest.raises(ContractError):
        dc.embedding_mean(table, np.zeros((3, 0), dtype=int))
    with pytest.raises(DimensionError):
        dc.embedding_mean(table, np.array([0, 1]))


# --- properties -----------------------------------------------------------

_vec = arrays(np.float64, st.integers(1, 8), elements=st.floats(-5, 5))


@settings(max_examples=60, deadline=None)
@given(_vec)
def test_sigmoid_gradient_property(v):
    w = Tensor(v.copy(), requires_grad=True)
    g = backward(dc.total(dc.sigmoid(w)))[w]
    s = 1 / (1 + np.exp(-v))
    np.testing.assert_allclose(g, s * (1 - s), rtol=1e-12, atol=1e-300)
    assert np.all(np.isfinite(dc.sigmoid(w).value))


@settings(max_examples=60, deadline=None)
@given(_vec, st.floats(-3, 3))
def test_linearity_of_gradient(v, c):
    w = Tensor(v.copy(), requires_grad=True)
    g = backward(dc.total(dc.mul(dc.square(w), c)))[w]
    np.testing.assert_allclose(g, 2 * c * v, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradients_are_deterministic(seed):
    r = np.random.default_rng(seed)
    table, w, b = _param(r, 6, 3), _param(r, 3, 2), _param(r, 2)
    ids = r.integers(0, 6, size=(5, 2))

    def run():
        h = dc.dense(dc.embedding_mean(table, ids), w, b, "sigmoid")
        return backward(dc.mean(dc.binary_cross_entropy(np.ones((5, 2)), h)), [table, w, b])

    g1, g2 = run(), run()
    for t in (table, w, b):
        assert np.array_equal(g1[t], g2[t])

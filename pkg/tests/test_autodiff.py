"""Gradient and invariant checks for the tensor core.

Every differentiable op is checked against central finite differences on
randomized inputs (100 seeds per op); softmax/layer-norm invariants are
property-tested with hypothesis.
"""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cladapt import autodiff as ad
from cladapt.autodiff import (
    OPS,
    ShapeError,
    TapeError,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy,
    embedding_lookup,
    finite_difference_gradient,
    forward_op,
    gather,
    layer_norm,
    log_softmax,
    logaddexp,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scaled_dot_attention,
    slice_,
    softmax,
    sub,
    sum_,
    transpose,
)

REL_TOL = 1e-4
ABS_FLOOR = 1e-8


def assert_grads_close(analytic, numeric):
    analytic = np.asarray(analytic).ravel()
    numeric = np.asarray(numeric).ravel()
    assert analytic.shape == numeric.shape
    for a, n in zip(analytic, numeric):
        if abs(n) < ABS_FLOOR and abs(a) < ABS_FLOOR:
            assert abs(a - n) <= ABS_FLOOR
        else:
            assert abs(a - n) / max(abs(a), abs(n)) < REL_TOL, (a, n)


def check_case(build, h=1e-5):
    """build(params) -> scalar Tensor; params created by the caller."""
    loss = build()
    backward(loss)
    for t in _gradcheck_params:
        fd = finite_difference_gradient(build, t, h=h)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        assert_grads_close(analytic, fd)


_gradcheck_params = []


def _params(*tensors):
    _gradcheck_params.clear()
    _gradcheck_params.extend(tensors)
    return tensors


def _rand(rng, *shape, away_from_zero=False):
    x = rng.normal(size=shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.05, x + 0.2 * np.sign(x + 1e-12), x)
    return Tensor(x, requires_grad=True)


def _weigher(rng, shape):
    w = Tensor(rng.normal(size=shape))
    return lambda out: sum_(mul(out, w))


def _case_add(rng):
    a, b = _params(_rand(rng, 3, 4), _rand(rng, 4))
    w = _weigher(rng, (3, 4))
    return lambda: w(add(a, b))


def _case_sub(rng):
    a, b = _params(_rand(rng, 2, 3), _rand(rng, 2, 3))
    w = _weigher(rng, (2, 3))
    return lambda: w(sub(a, b))


def _case_mul(rng):
    a, b = _params(_rand(rng, 3, 4), _rand(rng, 3, 1))
    w = _weigher(rng, (3, 4))
    return lambda: w(mul(a, b))


def _case_matmul(rng):
    a, b = _params(_rand(rng, 2, 3, 4), _rand(rng, 4, 5))
    w = _weigher(rng, (2, 3, 5))
    return lambda: w(matmul(a, b))


def _case_relu(rng):
    (a,) = _params(_rand(rng, 4, 5, away_from_zero=True))
    w = _weigher(rng, (4, 5))
    return lambda: w(relu(a))


def _case_layer_norm(rng):
    x, g, b = _params(_rand(rng, 3, 6), _rand(rng, 6), _rand(rng, 6))
    w = _weigher(rng, (3, 6))
    return lambda: w(layer_norm(x, g, b))


def _case_softmax(rng):
    (a,) = _params(_rand(rng, 3, 5))
    w = _weigher(rng, (3, 5))
    return lambda: w(softmax(a))


def _case_log_softmax(rng):
    (a,) = _params(_rand(rng, 3, 5))
    w = _weigher(rng, (3, 5))
    return lambda: w(log_softmax(a))


def _case_embedding(rng):
    ids = rng.integers(0, 6, size=(4,))
    (table,) = _params(_rand(rng, 6, 3))
    w = _weigher(rng, (4, 3))
    return lambda: w(embedding_lookup(table, ids))


def _case_attention(rng):
    q, k, v = _params(_rand(rng, 2, 3, 4), _rand(rng, 2, 5, 4), _rand(rng, 2, 5, 4))
    w = _weigher(rng, (2, 3, 4))
    return lambda: w(scaled_dot_attention(q, k, v))


def _case_cross_entropy(rng):
    targets = rng.integers(0, 5, size=(3,))
    (logits,) = _params(_rand(rng, 3, 5))
    return lambda: cross_entropy(logits, targets)


def _case_concat(rng):
    a, b = _params(_rand(rng, 2, 3), _rand(rng, 2, 2))
    w = _weigher(rng, (2, 5))
    return lambda: w(concat([a, b], axis=-1))


def _case_slice(rng):
    (a,) = _params(_rand(rng, 4, 5))
    w = _weigher(rng, (2, 4))
    return lambda: w(slice_(a, (slice(1, 3), slice(None, 4))))


def _case_mean(rng):
    (a,) = _params(_rand(rng, 3, 4))
    w = _weigher(rng, (3,))
    return lambda: w(mean(a, axis=-1))


def _case_sum(rng):
    (a,) = _params(_rand(rng, 3, 4))
    w = _weigher(rng, (4,))
    return lambda: w(sum_(a, axis=0))


def _case_logaddexp(rng):
    a, b = _params(_rand(rng, 3, 4), _rand(rng, 3, 4))
    w = _weigher(rng, (3, 4))
    return lambda: w(logaddexp(a, b))


def _case_gather(rng):
    ids = rng.integers(0, 5, size=(3, 2))
    (a,) = _params(_rand(rng, 3, 5))
    w = _weigher(rng, (3, 2))
    return lambda: w(gather(a, ids))


def _case_reshape_transpose(rng):
    (a,) = _params(_rand(rng, 2, 3, 4))
    w = _weigher(rng, (3, 8))
    return lambda: w(reshape(transpose(a, (1, 0, 2)), (3, 8)))


GRAD_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "matmul": _case_matmul,
    "relu": _case_relu,
    "layer_norm": _case_layer_norm,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "embedding_lookup": _case_embedding,
    "scaled_dot_attention": _case_attention,
    "cross_entropy": _case_cross_entropy,
    "concat": _case_concat,
    "slice": _case_slice,
    "mean": _case_mean,
    "sum": _case_sum,
    "logaddexp": _case_logaddexp,
    "gather": _case_gather,
    "reshape_transpose": _case_reshape_transpose,
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
@pytest.mark.parametrize("block", range(10))
def test_op_gradients_match_finite_differences(name, block):
    # 10 blocks x 10 seeds = 100 randomized inputs per op
    for seed in range(10 * block, 10 * block + 10):
        rng = np.random.default_rng(seed)
        check_case(GRAD_CASES[name](rng))


def test_relu_definition():
    out = relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    out = matmul(Tensor(np.eye(3)), Tensor(a))
    assert np.array_equal(out.data, a)


def test_layer_norm_constant_vector_maps_to_bias():
    x = Tensor(np.full((4,), 3.7))
    gain = Tensor(np.ones(4))
    bias = Tensor(np.full(4, 0.25))
    out = layer_norm(x, gain, bias)
    assert np.allclose(out.data, 0.25, atol=1e-9)
    # before affine: all zeros
    pre = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.allclose(pre.data, 0.0, atol=1e-9)


def test_layer_norm_normalizes_mean_and_variance():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(5, 16)) * 4 + 2)
    out = layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
    assert np.all(np.abs(out.data.mean(axis=-1)) < 1e-9)
    assert np.all(np.abs(out.data.var(axis=-1) - 1.0) < 1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8), st.integers(2, 8))
def test_softmax_rows_sum_to_one(seed, rows, cols):
    x = np.random.default_rng(seed).normal(size=(rows, cols)) * 5
    y = softmax(Tensor(x)).data
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) < 1e-9)
    ls = log_softmax(Tensor(x)).data
    assert np.all(np.abs(ls - np.log(y)) < 1e-9)


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3)), requires_grad=True)
    backward(sum_(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_product_gives_cross_grads():
    x = Tensor(3.0, requires_grad=True)
    y = Tensor(5.0, requires_grad=True)
    backward(mul(x, y))
    assert x.grad == 5.0 and y.grad == 3.0


def test_backward_rejects_nonscalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(TapeError, match="scalar"):
        backward(mul(x, x))


def test_backward_rejects_detached_loss():
    with pytest.raises(TapeError, match="detached"):
        backward(Tensor(1.0))


def test_backward_twice_is_an_error():
    x = Tensor(2.0, requires_grad=True)
    loss = mul(x, x)
    backward(loss)
    with pytest.raises(TapeError, match="already ran"):
        backward(loss)


def test_mlp_gradients_match_finite_differences():
    # random 3-layer MLP, every parameter checked at h=1e-5
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(2, 5)))
    ws = [Tensor(rng.normal(size=s) * 0.5, requires_grad=True)
          for s in [(5, 6), (6, 6), (6, 3)]]
    bs = [Tensor(rng.normal(size=s[1]) * 0.1, requires_grad=True)
          for s in [(5, 6), (6, 6), (6, 3)]]
    targets = np.array([0, 2])

    def build():
        hcur = x
        for w, b in zip(ws[:-1], bs[:-1]):
            hcur = relu(add(matmul(hcur, w), b))
        return cross_entropy(add(matmul(hcur, ws[-1]), bs[-1]), targets)

    backward(build())
    for t in ws + bs:
        assert_grads_close(t.grad, finite_difference_gradient(build, t))


def test_no_grad_suppresses_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = sum_(mul(x, x))
    assert not y.requires_grad and y.parents == ()


def test_shape_errors_name_the_operation():
    with pytest.raises(ShapeError, match="matmul"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError, match="add"):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError, match="layer_norm"):
        layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.ones(3)))


def test_forward_op_dispatch():
    out = forward_op("relu", Tensor([-2.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 2.0])
    assert set(OPS) == {
        "matmul", "add", "layer_norm", "relu", "softmax", "log_softmax",
        "embedding_lookup", "scaled_dot_attention", "cross_entropy",
        "concat", "slice", "mean",
    }
    with pytest.raises(ValueError, match="unknown operation"):
        forward_op("conv2d", Tensor([1.0]))


def test_logaddexp_handles_neg_inf():
    a = Tensor(np.array([0.5, -np.inf]), requires_grad=True)
    b = Tensor(np.array([-np.inf, -np.inf]), requires_grad=True)
    out = logaddexp(a, b)
    assert out.data[0] == 0.5 and np.isneginf(out.data[1])
    backward(sum_(out))
    assert np.array_equal(a.grad, [1.0, 0.0])
    assert np.array_equal(b.grad, [0.0, 0.0])


def test_tensor_invariants():
    t = Tensor(np.zeros((3, 4)))
    assert int(np.prod(t.shape)) == t.data.size
    x = Tensor(np.ones(2), requires_grad=True)
    backward(sum_(mul(x, x)))
    assert x.grad.shape == x.data.shape

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from losgraph import autodiff as ad
from losgraph.autodiff import NonFiniteError, Tensor, backward, gradcheck

TOL = 1e-6


def _erf_series(x: float, terms: int = 60) -> float:
    # Maclaurin series, independent of math.erf / scipy
    total = 0.0
    for n in range(terms):
        total += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * total


def _away_from_zero(rng, shape, low=0.2, high=1.5):
    return rng.uniform(low, high, shape) * rng.choice([-1.0, 1.0], shape)


# scalar-valued closures over every differentiable op, plus an input sampler
OPS = {
    "add": (lambda a, b: ad.tsum(ad.add(a, b) * ad.add(a, b)), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": (lambda a, b: ad.tsum(ad.sub(a, b) * a), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))]),
    "mul": (lambda a, b: ad.tsum(ad.mul(a, b)), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    "div": (lambda a, b: ad.tsum(ad.div(a, b)), lambda r: [r.normal(size=(2, 3)), r.uniform(0.5, 2, (2, 3))]),
    "neg": (lambda a: ad.tsum(ad.neg(a) * a), lambda r: [r.normal(size=(4,))]),
    "matmul": (lambda a, b: ad.tsum(ad.matmul(a, b) * ad.matmul(a, b)),
               lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))]),
    "exp": (lambda a: ad.tsum(ad.exp(a)), lambda r: [r.normal(size=(3,))]),
    "log": (lambda a: ad.tsum(ad.log(a)), lambda r: [r.uniform(0.5, 3.0, (3,))]),
    "sqrt": (lambda a: ad.tsum(ad.sqrt(a)), lambda r: [r.uniform(0.5, 3.0, (3,))]),
    "relu": (lambda a: ad.tsum(ad.relu(a) * a), lambda r: [_away_from_zero(r, (5,))]),
    "sigmoid": (lambda a: ad.tsum(ad.sigmoid(a)), lambda r: [r.normal(size=(5,))]),
    "softplus": (lambda a: ad.tsum(ad.softplus(a)), lambda r: [r.normal(size=(5,))]),
    "silu": (lambda a: ad.tsum(ad.silu(a)), lambda r: [r.normal(size=(5,))]),
    "gelu": (lambda a: ad.tsum(ad.gelu(a)), lambda r: [r.normal(size=(5,))]),
    "tsum": (lambda a: ad.tsum(ad.tsum(a, axis=1) * ad.tsum(a, axis=1)), lambda r: [r.normal(size=(3, 4))]),
    "tmean": (lambda a: ad.tsum(ad.tmean(a, axis=0, keepdims=True) * a), lambda r: [r.normal(size=(3, 4))]),
    "reshape": (lambda a: ad.tsum(ad.reshape(a, (6,)) * np.arange(6.0)), lambda r: [r.normal(size=(2, 3))]),
    "transpose": (lambda a: ad.tsum(ad.transpose(a) * np.arange(6.0).reshape(3, 2)), lambda r: [r.normal(size=(2, 3))]),
    "concat": (lambda a, b: ad.tsum(ad.concat([a, b], axis=1) * np.arange(10.0).reshape(2, 5)),
               lambda r: [r.normal(size=(2, 2)), r.normal(size=(2, 3))]),
    "take_rows": (lambda a: ad.tsum(ad.take_rows(a, [2, 0, 2]) * np.arange(9.0).reshape(3, 3)),
                  lambda r: [r.normal(size=(3, 3))]),
    "take_along": (lambda a: ad.tsum(ad.take_along(a, np.array([[[1, 1]], [[0, 1]]]), axis=1) * np.array([1.0, 2.0])),
                   lambda r: [r.normal(size=(2, 3, 2))]),
    "scatter_rows": (lambda a: ad.tsum(ad.scatter_rows(a, [1, 1, 0], 2) * ad.scatter_rows(a, [1, 1, 0], 2)),
                     lambda r: [r.normal(size=(3, 2))]),
    "softmax": (lambda a: ad.tsum(ad.softmax(a) * np.arange(4.0)), lambda r: [r.normal(size=(2, 4))]),
    "rms_norm": (lambda x, g: ad.tsum(ad.rms_norm(x, g) * np.arange(3.0)), lambda r: [r.normal(size=(2, 3)), r.normal(size=(3,))]),
    "layer_norm": (lambda x, g, b: ad.tsum(ad.layer_norm(x, g, b) * np.arange(4.0)),
                   lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,)), r.normal(size=(4,))]),
    "batch_norm": (lambda x, g, b: ad.tsum(ad.batch_norm(x, g, b) * np.arange(8.0).reshape(4, 2)),
                   lambda r: [r.normal(size=(4, 2)), r.normal(size=(2,)), r.normal(size=(2,))]),
    "batch_norm_eval": (lambda x, g, b: ad.tsum(ad.batch_norm(x, g, b, np.array([0.1, -0.2]), np.array([1.5, 0.7]))
                                                * np.arange(8.0).reshape(4, 2)),
                        lambda r: [r.normal(size=(4, 2)), r.normal(size=(2,)), r.normal(size=(2,))]),
    "huber": (lambda p, t: ad.tsum(ad.huber(p, t, 1.0)),
              lambda r: [np.array([0.3, -0.4, 2.5, -3.0]) + r.uniform(-0.1, 0.1, 4), r.uniform(-0.1, 0.1, 4)]),
    "selective_scan": (lambda x, dl, A, B, C: ad.tsum(ad.selective_scan(x, dl, A, B, C) * np.arange(12.0).reshape(1, 4, 3)),
                       lambda r: [r.normal(size=(1, 4, 3)), r.uniform(0.05, 0.5, (1, 4, 3)),
                                  -r.uniform(0.5, 2.0, (3, 2)), r.normal(size=(1, 4, 2)), r.normal(size=(1, 4, 2))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_matches_central_differences_at_ten_points(name):
    fn, sample = OPS[name]
    rng = np.random.default_rng(sorted(OPS).index(name))
    for _ in range(10):
        assert gradcheck(fn, sample(rng)) < TOL


def test_dropout_gradient_uses_the_same_mask():
    x = np.random.default_rng(0).normal(size=(6, 5))
    err = gradcheck(lambda a: ad.tsum(ad.dropout(a, 0.5, np.random.default_rng(3), True) * a), [x])
    assert err < TOL


def test_gelu_values():
    assert ad.gelu(Tensor(np.array([0.0]))).item() == 0.0
    assert ad.gelu(Tensor(np.array([10.0]))).item() == pytest.approx(10.0, abs=1e-12)
    expected = 0.5 * (1.0 + _erf_series(1.0 / math.sqrt(2.0)))
    assert ad.gelu(Tensor(np.array([1.0]))).item() == pytest.approx(expected, abs=1e-14)


def test_rms_norm_values():
    one = ad.rms_norm(Tensor(np.ones((1, 4))), np.ones(4), eps=0.0).data
    np.testing.assert_array_equal(one, np.ones((1, 4)))
    out = ad.rms_norm(Tensor(np.array([[3.0, 4.0]])), np.ones(2), eps=0.0).data
    np.testing.assert_allclose(out, [[3.0 / math.sqrt(12.5), 4.0 / math.sqrt(12.5)]], rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        ad.rms_norm(Tensor(np.zeros((2, 0))), np.ones(0))


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=8), st.floats(0.01, 50))
def test_rms_norm_scale_invariant_with_unit_rms(row, c):
    x = np.array([row])
    if np.sqrt((x ** 2).mean()) < 1e-3:
        return
    a = ad.rms_norm(Tensor(x), np.ones(x.shape[1]), eps=0.0).data
    b = ad.rms_norm(Tensor(x * c), np.ones(x.shape[1]), eps=0.0).data
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert np.sqrt((a ** 2).mean()) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("pred,target,expected", [(1.3, 1.3, 0.0), (0.5, 0.0, 0.125), (3.0, 0.0, 2.5)])
def test_huber_values(pred, target, expected):
    assert ad.huber(Tensor(np.array(pred)), np.array(target), 1.0).item() == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("delta", [0.3, 1.0, 2.0])
def test_huber_is_continuous_and_smooth_at_delta(delta):
    h = 1e-7

    def loss(r):
        return ad.huber(Tensor(np.array(r)), np.array(0.0), delta).item()

    assert abs(loss(delta + h) - loss(delta - h)) < 2 * delta * h + 1e-12
    left = ad.huber(Tensor(np.array(delta - 1e-12), requires_grad=True), np.array(0.0), delta)
    right = ad.huber(Tensor(np.array(delta + 1e-12), requires_grad=True), np.array(0.0), delta)
    slopes = []
    for out in (left, right):
        leaf = out._parents[0]
        backward(out)
        slopes.append(float(leaf.grad))
    assert abs(slopes[0] - slopes[1]) < 1e-9


def test_backward_simple_and_constant():
    x = Tensor(np.array(3.0), requires_grad=True)
    backward(x * x)
    assert float(x.grad) == 6.0
    y = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(ad.tsum(y * 0.0) + 5.0)
    np.testing.assert_array_equal(y.grad, [0.0, 0.0])


def test_gelu_of_linear_map_gradcheck():
    rng = np.random.default_rng(7)
    W, x = rng.normal(size=(3, 4)), rng.normal(size=(1, 3))
    assert gradcheck(lambda w, v: ad.tsum(ad.gelu(ad.matmul(v, w))), [W, x]) < 1e-6


def test_gradient_is_none_until_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.tsum(ad.exp(x))
    assert x.grad is None
    backward(y)
    np.testing.assert_allclose(x.grad, np.e)


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2.0)


def test_non_finite_results_raise():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor(np.array([0.0])))
    with pytest.raises(NonFiniteError):
        ad.exp(Tensor(np.array([1000.0])))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.tsum(x * 3.0)
    assert not y.requires_grad


def test_dropout_is_identity_in_eval_and_inverted_in_training():
    x = Tensor(np.ones((200, 50)))
    assert ad.dropout(x, 0.5, None, training=False) is x
    out = ad.dropout(x, 0.25, np.random.default_rng(0), training=True).data
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
    assert abs(out.mean() - 1.0) < 0.02

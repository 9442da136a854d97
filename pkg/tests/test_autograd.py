import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from meatvit import autograd as ag
from meatvit.autograd import Graph, Tensor, backward, grad_check
from meatvit.errors import (
    ContractError,
    DegenerateMaskError,
    NumericDomainError,
    ShapeError,
)


def central_difference(f, x, step=1e-6):
    """Independent numeric gradient of scalar ``f`` (numpy in, float out)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        grad[idx] = (f(xp) - f(xm)) / (2 * step)
    return grad


def delete_and_softmax(a, w):
    """Oracle: drop keys with w == 0, softmax the rest, scatter back with zeros."""
    a = np.asarray(a, dtype=np.float64)
    out = np.zeros_like(a)
    keep = np.flatnonzero(w > 0)
    sub = a[keep] - a[keep].max()
    e = np.exp(sub)
    out[keep] = e / e.sum()
    return out


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    out = ag.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[3], [4]])


def test_matmul_row_times_column():
    out = ag.matmul(Tensor([[1, 2]]), Tensor([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[11]])


def test_matmul_gradient_matches_finite_difference():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    b = Tensor([[3.0], [4.0]])
    backward(ag.tensor_sum(ag.matmul(a, b)))
    numeric = central_difference(lambda x: float((x @ b.data).sum()), a.data)
    np.testing.assert_allclose(a.grad, [[3.0, 4.0]], atol=1e-12)
    np.testing.assert_allclose(a.grad, numeric, atol=1e-6)


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_weight_gradient():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 3, 4)))
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    err = grad_check(lambda w_: ag.tensor_sum(ag.square(ag.matmul(x, w_))), w)
    assert err < 1e-6


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_array_equal(ag.softmax_row(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_ln2():
    np.testing.assert_allclose(ag.softmax_row(Tensor([math.log(2), 0.0])).data,
                               [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_large_logit_does_not_overflow():
    out = ag.softmax_row(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(NumericDomainError):
        ag.softmax_row(Tensor([0.0, bad]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_are_probability_vectors(a):
    out = ag.softmax_row(Tensor(a)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- masked softmax


def test_masked_softmax_uniform_over_active():
    out = ag.masked_softmax_row(Tensor([0.0, 0.0, 0.0]), Tensor([1.0, 1.0, 0.0])).data
    np.testing.assert_array_equal(out, [0.5, 0.5, 0.0])


def test_masked_softmax_ignores_largest_masked_logit():
    out = ag.masked_softmax_row(Tensor([math.log(2), 0.0, 5.0]), Tensor([1.0, 1.0, 0.0])).data
    np.testing.assert_allclose(out, [2 / 3, 1 / 3, 0.0], atol=1e-15)
    assert out[2] == 0.0


def test_masked_softmax_masked_logit_beyond_overflow_range():
    out = ag.masked_softmax_row(Tensor([0.0, 0.0, 1e6]), Tensor([1.0, 1.0, 0.0])).data
    np.testing.assert_array_equal(out, [0.5, 0.5, 0.0])


def test_masked_softmax_all_zero_weights_is_degenerate():
    with pytest.raises(DegenerateMaskError):
        ag.masked_softmax_row(Tensor([1.0, 2.0]), Tensor([0.0, 0.0]))


def test_masked_softmax_rejects_out_of_range_weights():
    with pytest.raises(ContractError):
        ag.masked_softmax_row(Tensor([1.0, 2.0]), Tensor([1.5, 0.5]))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8).flatmap(lambda k: st.tuples(
    arrays(np.float64, (3, k), elements=st.floats(-30, 30)),
    arrays(np.bool_, (k,)))))
def test_masked_softmax_matches_delete_oracle(case):
    a, bits = case
    bits = bits.copy()
    bits[0] = True
    out = ag.masked_softmax_row(Tensor(a), Tensor(bits.astype(float))).data
    for row, got in zip(a, out):
        np.testing.assert_allclose(got, delete_and_softmax(row, bits), rtol=0, atol=1e-12)
    # zero-weight columns are exactly zero, not merely small
    assert np.all(out[:, ~bits] == 0.0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)),
              elements=st.floats(-50, 50)))
def test_masked_softmax_all_ones_equals_softmax(a):
    plain = ag.softmax_row(Tensor(a)).data
    masked = ag.masked_softmax_row(Tensor(a), Tensor(np.ones(a.shape[-1]))).data
    np.testing.assert_array_equal(masked, plain)


def test_masked_softmax_relaxed_weight_gradients():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 5)))
    w = Tensor(rng.uniform(0.05, 0.95, size=5))
    proj = rng.normal(size=(3, 5))

    def via_weights(w_):
        return ag.tensor_sum(ag.mul(ag.masked_softmax_row(a, w_), proj))

    def via_logits(a_):
        return ag.tensor_sum(ag.mul(ag.masked_softmax_row(a_, w), proj))

    assert grad_check(via_weights, w) < 1e-6
    assert grad_check(via_logits, Tensor(a.data.copy())) < 1e-6


def test_masked_softmax_weight_gradient_matches_quotient_rule():
    # d out_0 / d w_k by hand: out = w e / sum(w e)
    a = np.array([0.3, -0.2, 0.5])
    w = np.array([0.7, 0.4, 0.9])
    e = np.exp(a)
    s = (w * e).sum()
    expected = -w[0] * e[0] * e / s ** 2
    expected[0] += e[0] / s
    wt = Tensor(w, requires_grad=True)
    backward(ag.masked_softmax_row(Tensor(a), wt)[0])
    np.testing.assert_allclose(wt.grad, expected, atol=1e-14)


# ---------------------------------------------------------------- gelu / layer norm


def test_gelu_zero_and_asymptote():
    assert ag.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(ag.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-9


def test_gelu_gradient_at_half():
    x = Tensor([0.5], requires_grad=True)
    backward(ag.tensor_sum(ag.gelu(x)))
    f = lambda v: float(0.5 * v[0] * (1 + math.erf(v[0] / math.sqrt(2))))
    numeric = central_difference(f, [0.5])
    assert abs(x.grad[0] - numeric[0]) < 1e-6


def test_layer_norm_constant_row():
    out = ag.layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0])


def test_layer_norm_two_values():
    out = ag.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 6)))
    gain = Tensor(rng.normal(size=6))
    bias = Tensor(rng.normal(size=6))
    proj = rng.normal(size=(3, 6))
    f = lambda t: ag.tensor_sum(ag.mul(ag.layer_norm(t, gain, bias), proj))
    assert grad_check(f, x) < 1e-4
    g = lambda t: ag.tensor_sum(ag.mul(ag.layer_norm(x, t, bias), proj))
    assert grad_check(g, gain) < 1e-4
    h = lambda t: ag.tensor_sum(ag.mul(ag.layer_norm(x, gain, t), proj))
    assert grad_check(h, bias) < 1e-4


# ---------------------------------------------------------------- cross entropy


def test_cross_entropy_uniform():
    assert ag.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_cross_entropy_confident():
    assert ag.cross_entropy(Tensor([[10.0, -10.0]]), [0]).item() < 1e-8


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(4, 3))
    labels = np.array([0, 2, 1, 2])
    t = Tensor(logits, requires_grad=True)
    backward(ag.cross_entropy(t, labels))
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    analytic = (p - np.eye(3)[labels]) / 4
    np.testing.assert_allclose(t.grad, analytic, atol=1e-14)

    def f(x):
        lp = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
        return float(-lp[np.arange(4), labels].mean())

    np.testing.assert_allclose(t.grad, central_difference(f, logits), atol=1e-8)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        ag.cross_entropy(Tensor([[0.0, 1.0]]), [2])


# ---------------------------------------------------------------- backward


def test_backward_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(ag.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(ag.tensor_sum(ag.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_accumulates_without_zeroing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ag.tensor_sum(ag.mul(x, x))
    backward(loss)
    backward(loss)
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_backward_deterministic_after_zeroing():
    rng = np.random.default_rng(2)
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    x = Tensor(rng.normal(size=(3, 4)))
    loss = ag.cross_entropy(ag.matmul(ag.gelu(ag.matmul(x, w)), w), [0, 1, 3])
    backward(loss)
    first = w.grad.copy()
    w.zero_grad()
    backward(loss)
    np.testing.assert_array_equal(w.grad, first)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(ag.mul(x, x))


def test_every_reachable_tensor_gets_a_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ag.gelu(x)
    z = ag.tensor_sum(ag.mul(y, y))
    backward(z)
    for node in Graph(z).nodes:
        assert node.grad is not None and node.grad.shape == node.shape


def test_graph_order_is_topological():
    x = Tensor([1.0], requires_grad=True)
    a = ag.mul(x, x)
    b = ag.add(a, x)
    c = ag.tensor_sum(ag.mul(a, b))
    order = Graph(c).nodes
    pos = {id(t): i for i, t in enumerate(order)}
    for t in order:
        for p in t._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(t)]


# ---------------------------------------------------------------- grad_check


def test_grad_check_sum_is_exact():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 3)))
    assert grad_check(ag.tensor_sum, x) < 1e-10


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_cross_entropy_of_matmul(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(4, 4)))
    b = Tensor(rng.normal(size=(4, 4)))
    labels = rng.integers(0, 4, size=4)
    assert grad_check(lambda t: ag.cross_entropy(ag.matmul(t, b), labels), a, step=1e-5) < 1e-4
    assert grad_check(lambda t: ag.cross_entropy(ag.matmul(a, t), labels), b, step=1e-5) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_masked_softmax_relaxed(seed):
    rng = np.random.default_rng(seed)
    scores = Tensor(rng.normal(size=(2, 3, 5)))
    w = Tensor(rng.uniform(0.01, 0.99, size=5))
    labels = rng.integers(0, 5, size=6)

    def f(w_):
        probs = ag.masked_softmax_row(scores, w_)
        return ag.cross_entropy(ag.reshape(probs, (6, 5)), labels)

    assert grad_check(f, w, step=1e-5) < 1e-4


def test_grad_check_rejects_nondeterministic_function():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones(3))
    with pytest.raises(ContractError):
        grad_check(lambda t: ag.tensor_sum(ag.mul(t, rng.normal(size=3))), x)

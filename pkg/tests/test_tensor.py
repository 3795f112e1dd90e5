import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from langembed import tensor as T
from langembed.tensor import NumericalError, ShapeError, Tensor

from conftest import OP_CASES, op_gradcheck

TOL = 1e-5


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


@pytest.mark.parametrize("name", OP_CASES)
def test_finite_differences(name):
    assert op_gradcheck(name) < TOL


def test_conv1d_matches_brute_force(rng):
    x = rng.normal(size=(2, 17, 3))
    k = rng.normal(size=(3, 3, 5))
    b = rng.normal(size=5)
    for d in (1, 2, 3):
        out = T.conv1d(Tensor(x), Tensor(k), Tensor(b), dilation=d).data
        t_out = 17 - 2 * d
        ref = np.zeros((2, t_out, 5))
        for n in range(2):
            for t in range(t_out):
                for o in range(5):
                    ref[n, t, o] = b[o] + sum(
                        x[n, t + j * d, c] * k[j, c, o] for j in range(3) for c in range(3)
                    )
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv1d_too_short_raises():
    with pytest.raises(ShapeError, match="receptive field"):
        T.conv1d(Tensor(np.zeros((4, 2))), Tensor(np.zeros((3, 2, 1))), dilation=2)


def test_statistics_pooling_constant_sequence():
    x = Tensor(np.tile([1.0, -2.0, 3.0], (9, 1)), requires_grad=True)
    out = T.statistics_pooling(x)
    np.testing.assert_allclose(out.data[:3], [1.0, -2.0, 3.0])
    np.testing.assert_allclose(out.data[3:], np.sqrt(T.STATS_EPS))
    T.sum_all(out).backward()
    assert np.isfinite(x.grad).all()


@pytest.mark.parametrize("k", [3, 6, 48])
def test_uniform_logits_cross_entropy_is_log_k(k):
    loss = T.softmax_cross_entropy(Tensor(np.zeros((5, k))), np.arange(5) % k)
    assert abs(float(loss.data) - np.log(k)) < 1e-9


def test_cross_entropy_extreme_logits_against_mpmath():
    logits = np.array([[1000.0, -1000.0, 0.0], [-500.0, 500.0, 499.0]])
    labels = np.array([2, 2])
    got = float(T.softmax_cross_entropy(Tensor(logits), labels).data)
    mpmath.mp.dps = 50
    ref = 0
    for row, y in zip(logits, labels):
        lse = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in row))
        ref += lse - mpmath.mpf(row[y])
    ref = float(ref / 2)
    assert np.isfinite(got)
    assert abs(got - ref) <= 1e-9 * max(1.0, abs(ref))


def test_cross_entropy_saturated_correct_class_is_zero():
    loss = T.softmax_cross_entropy(Tensor(np.array([[800.0, 0.0, 0.0]])), [0])
    assert float(loss.data) == 0.0


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ShapeError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0])


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 3.0])
def test_grad_reverse_contract(rng, lam):
    x = leaf(rng, 4, 6)
    y = T.grad_reverse(x, lam)
    assert y.data.tobytes() == x.data.tobytes()
    up = rng.normal(size=(4, 6))
    T.sum_all(T.mul(y, Tensor(up))).backward()
    assert np.array_equal(x.grad, -lam * up)
    if lam == 0.0:
        assert not np.any(x.grad)


def test_grad_reverse_negative_lambda_rejected(rng):
    with pytest.raises(ValueError):
        T.grad_reverse(leaf(rng, 2), -1.0)


def test_no_broadcasting():
    with pytest.raises(ShapeError, match=r"add: shape mismatch \(2, 3\) vs \(3,\)"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_backward_twice_accumulates(rng):
    a = leaf(rng, 3)
    w = Tensor(rng.normal(size=3))
    loss = T.sum_all(T.mul(T.mul(a, a), w))
    loss.backward()
    first = a.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(a.grad, 2 * first)


def test_shared_subexpression_gradient(rng):
    # y = a*a + a reuses ``a`` along three paths
    a = leaf(rng, 5)
    T.sum_all(T.add(T.mul(a, a), a)).backward()
    np.testing.assert_allclose(a.grad, 2 * a.data + 1, rtol=1e-14)


def test_graph_is_deterministic_and_visits_each_node_once(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 3, 2)

    def build():
        m = T.matmul(a, b)
        return T.sum_all(T.add(m, T.relu(m)))

    g1, g2 = build().graph(), build().graph()
    assert g1 == g2
    outs = [r.output for r in g1]
    assert outs == list(range(len(g1)))
    for r in g1:
        assert all(i < r.output for i in r.inputs)


def test_ops_do_not_mutate_inputs(rng):
    x = rng.normal(size=(2, 10, 3))
    k = rng.normal(size=(3, 3, 2))
    xc, kc = x.copy(), k.copy()
    xt, kt = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)
    T.sum_all(T.statistics_pooling(T.conv1d(xt, kt, dilation=2))).backward()
    np.testing.assert_array_equal(x, xc)
    np.testing.assert_array_equal(k, kc)


def test_no_grad_builds_no_graph(rng):
    a = leaf(rng, 3)
    with T.no_grad():
        y = T.mul(a, a)
    assert y.is_leaf and not y.requires_grad


def test_non_finite_raises():
    with pytest.raises(NumericalError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericalError), np.errstate(over="ignore"):
        T.scale(Tensor([1e308]), 10.0)


def test_backward_requires_scalar(rng):
    with pytest.raises(ShapeError):
        leaf(rng, 3).backward()


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 5), elements=finite), st.integers(0, 4))
def test_cross_entropy_nonnegative_and_shift_invariant(logits, label):
    labels = np.full(4, label)
    a = float(T.softmax_cross_entropy(Tensor(logits), labels).data)
    b = float(T.softmax_cross_entropy(Tensor(logits + 7.0), labels).data)
    assert a >= 0
    assert abs(a - b) < 1e-9


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 3), elements=finite), st.permutations(range(6)))
def test_statistics_pooling_is_permutation_invariant_over_time(x, perm):
    a = T.statistics_pooling(Tensor(x)).data
    b = T.statistics_pooling(Tensor(x[list(perm)])).data
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 10, allow_nan=False), arrays(np.float64, (3, 2), elements=finite))
def test_grad_reverse_property(lam, up):
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    T.sum_all(T.mul(T.grad_reverse(x, lam), Tensor(up))).backward()
    assert np.array_equal(x.grad, up * -lam)

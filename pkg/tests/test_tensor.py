import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from groundnet import tensor as T
from groundnet.selfcheck import check_ops
from groundnet.tensor import NonFiniteValue, ShapeMismatch, Tape, Tensor, grad_check, rng_stream, xavier_init


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_l2_normalize_345():
    np.testing.assert_allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-8)


def test_l2_normalize_zero_vector():
    x = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        y = T.l2_normalize(x)
        tape.backward(T.sum(T.mul(y, Tensor([1.0, 2.0, 3.0]))))
    assert np.all(y.data == 0)
    assert np.all(np.isfinite(x.grad))


def test_elementwise_mul():
    np.testing.assert_array_equal(T.elementwise_mul(Tensor([1.0, 0.0]), Tensor([0.5, 0.7])).data, [0.5, 0.0])


finite = st.floats(-50, 50, allow_nan=False)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_is_distribution(x):
    for axis in (0, -1):
        p = T.softmax(Tensor(x), axis=axis).data
        assert np.all(p > 0)
        np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=1e-9)


def test_sum_of_squares_gradcheck():
    fn = lambda x: T.sum(T.mul(x, x))  # noqa: E731
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(fn(x))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    assert grad_check(fn, np.array([1.0, 2.0])) < 1e-7


@pytest.mark.parametrize("name,err", sorted(check_ops(points=10, seed=7).items()))
def test_core_ops_gradcheck(name, err):
    assert err < 1e-4, name


def test_concat_backward_splits_without_loss():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    seed = rng.normal(size=(6, 3))
    with Tape() as tape:
        out = T.concat([a, b], axis=0)
        tape.backward(out, seed)
    np.testing.assert_array_equal(np.concatenate([a.grad, b.grad]), seed)
    assert np.isclose(np.sum(a.grad ** 2) + np.sum(b.grad ** 2), np.sum(seed ** 2))


def test_shared_node_accumulates():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = T.add(T.mul(x, x), T.scalar_scale(x, 2.0))
        tape.backward(T.sum(y))
    np.testing.assert_allclose(x.grad, [8.0])


def test_backward_visits_in_reverse_order():
    seen = []
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        a = T.scalar_scale(x, 2.0)
        b = T.scalar_scale(a, 3.0)
        c = T.sum(b)
    for k, (out, parents, fn) in enumerate(tape.records):
        tape.records[k] = (out, parents, (lambda f, k: lambda g: (seen.append(k), f(g))[1])(fn, k))
    tape.backward(c)
    assert seen == [2, 1, 0]
    np.testing.assert_allclose(x.grad, [6.0])


def test_no_tape_no_recording():
    x = Tensor([1.0], requires_grad=True)
    y = T.mul(x, x)
    assert not y.requires_grad


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteValue):
        T.log(Tensor([0.0]))
    with pytest.raises(NonFiniteValue):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeMismatch):
        T.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], axis=0)
    with pytest.raises(ShapeMismatch):
        T.embedding_lookup(Tensor(np.ones((3, 2))), [3])


def test_xavier_bound_and_determinism():
    w = xavier_init((1, 5), 11)
    assert np.all(np.abs(w.data) <= 1.0)
    np.testing.assert_array_equal(xavier_init((4, 6), 5).data, xavier_init((4, 6), 5).data)
    assert not np.array_equal(xavier_init((4, 6), 5).data, xavier_init((4, 6), 6).data)
    with pytest.raises(ShapeMismatch):
        xavier_init((3,), 0)


def test_xavier_monte_carlo_mean():
    # 10^4 draws; sd of the mean is sqrt(1/3)/100 ~ 0.0058 for bound 1
    w = xavier_init((100, 100), 2024)
    bound = np.sqrt(6 / 200)
    assert np.all(np.abs(w.data) <= bound)
    assert abs(w.data.mean()) < 0.02
    # uniform variance is bound^2 / 3
    assert abs(w.data.var() - bound ** 2 / 3) < 0.05 * bound ** 2


def test_rng_streams_independent_and_reproducible():
    a = rng_stream(1, 0).normal(size=5)
    assert np.array_equal(a, rng_stream(1, 0).normal(size=5))
    assert not np.array_equal(a, rng_stream(1, 1).normal(size=5))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-3, 3)))
def test_lstm_cell_gradcheck_random(x):
    rng = np.random.default_rng(0)
    h, c = Tensor(rng.normal(size=2)), Tensor(rng.normal(size=2))
    w, b = Tensor(rng.normal(size=(8, 7))), Tensor(rng.normal(size=8))
    fn = lambda v: T.sum(T.concat(T.lstm_cell(v, h, c, w, b)))  # noqa: E731
    assert grad_check(fn, x) < 1e-4

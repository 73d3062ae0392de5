import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eegtext.tensor import (DomainError, GraphError, NonFiniteError, Tensor, backward, concat,
                            finite_diff, relative_error)

finite = st.floats(-3, 3, allow_nan=False, width=64)


def grad_of(fn, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(*ts))
    return [t.grad for t in ts]


def fd_of(fn, arrays, which):
    def f(v):
        args = [Tensor(a) for a in arrays]
        args[which] = Tensor(v)
        return fn(*args).item()
    return finite_diff(f, arrays[which])


@pytest.mark.parametrize("name,fn,shapes", [
    ("add-broadcast", lambda a, b: ((a + b) ** 2).sum(), [(3, 4), (4,)]),
    ("sub", lambda a, b: ((a - b) * a).sum(), [(2, 3), (2, 3)]),
    ("mul-broadcast", lambda a, b: (a * b).sum(), [(2, 1, 3), (4, 3)]),
    ("div", lambda a, b: (a / (b * b + 1.0)).sum(), [(3,), (3,)]),
    ("matmul", lambda a, b: ((a @ b).tanh()).sum(), [(2, 3), (3, 4)]),
    ("exp-mean", lambda a, b: (a.exp() * b).mean(), [(5,), (5,)]),
    ("sigmoid", lambda a, b: (a.sigmoid() * b).sum(), [(4,), (4,)]),
    ("reshape-transpose", lambda a, b: (a.reshape(3, 2).T * b).sum(), [(2, 3), (2, 3)]),
    ("getitem", lambda a, b: (a[1:, ::2] * b).sum(), [(3, 4), (2, 2)]),
    ("concat", lambda a, b: (concat([a, b], axis=0) ** 3).sum(), [(2, 3), (1, 3)]),
    ("sum-axis", lambda a, b: (a.sum(axis=0, keepdims=True) * b).sum(), [(3, 2), (1, 2)]),
])
def test_gradients_match_central_differences(name, fn, shapes):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    arrays = [rng.standard_normal(s) for s in shapes]
    grads = grad_of(fn, *arrays)
    for i, g in enumerate(grads):
        assert relative_error(g, fd_of(fn, arrays, i)) < 1e-6, name


def test_log_of_non_positive_is_a_domain_error():
    with pytest.raises(DomainError):
        Tensor([1.0, 0.0]).log()


def test_non_finite_results_are_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([800.0]).exp()
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_data_is_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_backward_requires_scalar_and_frees_graph():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        backward(a * 2.0)
    loss = (a * a).sum()
    backward(loss)
    np.testing.assert_array_equal(a.grad, 2 * np.ones(3))
    with pytest.raises(GraphError):
        backward(loss)


def test_shared_subexpression_accumulates():
    a = Tensor(2.0, requires_grad=True)
    b = a * a
    backward(b * b + b)  # a^4 + a^2
    assert a.grad == pytest.approx(4 * 8 + 2 * 2)


def test_float32_preserved():
    a = Tensor(np.ones(3, np.float32), requires_grad=True)
    out = (a * 2.0).sum()
    assert out.dtype == np.float32
    backward(out)
    assert a.grad.dtype == np.float32


@given(arrays(np.float64, st.integers(1, 6), elements=finite),
       st.floats(-2, 2, allow_nan=False))
def test_backward_is_linear_in_the_root(x, scale):
    """d(s * f)/dx == s * df/dx."""
    g1, = grad_of(lambda a: (a.tanh() * a).sum(), x)
    g2, = grad_of(lambda a: (a.tanh() * a).sum() * scale, x)
    np.testing.assert_allclose(g2, scale * g1, rtol=1e-12, atol=1e-12)


@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_broadcast_gradient_sums_over_expanded_axes(a, b):
    ga, gb = grad_of(lambda x, y: (x * y).sum(), a, b)
    np.testing.assert_allclose(ga, np.broadcast_to(b, a.shape))
    np.testing.assert_allclose(gb, a.sum(axis=0))

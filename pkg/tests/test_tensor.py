import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dvan.errors import ContractError, DimensionError
from dvan.tensor import (Tensor, conv2d, grad_check, grad_check_params, matmul, max_pool2d,
                         no_grad, relative_error, uniform_init)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_matmul_identity_and_scalar():
    out = Tensor([[1.0, 0.0], [0.0, 1.0]]) @ Tensor([[3.0], [4.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])
    np.testing.assert_array_equal((Tensor([[2.0]]) @ Tensor([[3.0]])).data, [[6.0]])


def test_matmul_gradient(rng):
    b = Tensor(rng.normal(size=(5, 3)))
    assert grad_check(lambda a: (a @ b).sum(), rng.normal(size=(4, 5))) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_conv2d_trivial_cases():
    out = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))
    assert conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3)))).shape == (1, 2, 2)


def naive_conv(x, w, stride, pad):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                out[oc, i, j] = np.sum(xp[:, i * stride:i * stride + k, j * stride:j * stride + k] * w[oc])
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv2d_matches_loops(rng, stride, pad):
    x = rng.normal(size=(2, 7, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(w), stride, pad).data,
                               naive_conv(x, w, stride, pad), atol=1e-12)


def test_conv2d_gradients(rng):
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    weights = rng.normal(size=(3, 3, 3))
    assert grad_check(lambda x: (conv2d(x, w, 2, 1) * weights).sum(), rng.normal(size=(2, 5, 6))) < 1e-5
    x = Tensor(rng.normal(size=(2, 5, 6)))
    assert grad_check(lambda k: (conv2d(x, k, 2, 1) * weights).sum(), w.data) < 1e-5


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))


def test_elementwise_values_and_grads(rng):
    assert Tensor(0.0).sigmoid().item() == 0.5
    assert Tensor(0.0).tanh().item() == 0.0
    v = rng.normal(size=6)
    for fn in (lambda x: x.sigmoid(), lambda x: x.tanh(), lambda x: x * x + x):
        assert grad_check(lambda x: (fn(x) * Tensor(np.arange(6.0))).sum(), v) < 1e-6


def test_binary_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


def test_softmax_examples(rng):
    np.testing.assert_allclose(Tensor(np.zeros(4)).softmax().data, 0.25)
    big = Tensor([1000.0, -1000.0]).softmax().data
    assert np.all(np.isfinite(big)) and np.all((big >= 0) & (big <= 1))
    u = rng.normal(size=5)
    assert grad_check(lambda z: (z.softmax() * Tensor(u)).sum(), rng.normal(size=5)) < 1e-6


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.randoms())
def test_softmax_sums_to_one_and_is_equivariant(v, rnd):
    p = Tensor(v).softmax().data
    assert abs(p.sum() - 1.0) < 1e-9 and np.all(p >= 0)
    perm = np.array(rnd.sample(range(len(v)), len(v)))
    np.testing.assert_allclose(Tensor(v[perm]).softmax().data, p[perm], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_no_nan_on_bounded_inputs(x):
    t = Tensor(x, requires_grad=True)
    out = (t.sigmoid() + t.tanh() + t.relu() + t.softmax() + (t * t).log()).sum()
    out.backward()
    assert np.isfinite(out.item()) and np.all(np.isfinite(t.grad))


def test_backward_basics():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, 1.0)
    x.grad = None
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_accumulates_without_reset():
    x = Tensor(np.ones(2), requires_grad=True)
    x.sum().backward()
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, 2.0)


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_two_paths_add_up(rng):
    # d/dx [f(x) + g(x)] is the sum of the separate gradients
    v = rng.normal(size=4)
    x = Tensor(v, requires_grad=True)
    (x.tanh() + x.sigmoid()).sum().backward()
    both = x.grad.copy()
    grads = []
    for fn in (lambda t: t.tanh(), lambda t: t.sigmoid()):
        y = Tensor(v, requires_grad=True)
        fn(y).sum().backward()
        grads.append(y.grad)
    np.testing.assert_allclose(both, grads[0] + grads[1], atol=1e-15)


def test_max_pool_forward(rng):
    x = rng.normal(size=(2, 4, 6))
    expected = x.reshape(2, 2, 2, 3, 2).max(axis=(2, 4))
    np.testing.assert_array_equal(max_pool2d(Tensor(x), 2).data, expected)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert y.node is None and not y.requires_grad


def test_grad_check_of_sum_is_exact(rng):
    assert grad_check(lambda x: x.sum(), rng.normal(size=(3, 3))) < 1e-9
    w = rng.normal(size=5)
    assert grad_check(lambda x: (x * Tensor(w)).sum().sigmoid(), rng.normal(size=5)) < 1e-6


def test_grad_check_flags_a_wrong_gradient(rng, monkeypatch):
    from dvan import tensor

    def bad_backward(ctx, g):
        (y,) = ctx.saved
        return (g * y,)  # drops the (1 - y) factor

    monkeypatch.setattr(tensor.Sigmoid, "backward", staticmethod(bad_backward))
    assert grad_check(lambda x: x.sigmoid().sum(), rng.normal(size=4)) > 1e-2


def test_grad_check_params(rng):
    w = uniform_init((3, 2), 3, rng)
    x = Tensor(rng.normal(size=(4, 3)))
    errs = grad_check_params(lambda: matmul(x, w).tanh().sum(), {"w": w})
    assert errs["w"] < 1e-6 and w.grad is None


def test_relative_error_definition():
    assert relative_error([1.0], [1.0]) == 0.0
    assert relative_error([2.0], [1.0]) == 0.5
    assert relative_error([1e-12], [0.0]) == pytest.approx(1e-4)


def test_uniform_init_bounds(rng):
    p = uniform_init((200, 50), 25, rng)
    assert np.all(np.abs(p.data) <= 0.2) and p.requires_grad

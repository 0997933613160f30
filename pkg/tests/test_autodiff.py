import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays, broadcastable_shapes

from gdflow import autodiff as ad
from gdflow.autodiff import Tape, Tensor, grad_check
from gdflow.selftest import _op_cases


def test_elementwise_examples():
    assert np.array_equal(ad.elementwise("add", [1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])
    assert np.allclose(ad.elementwise("leaky-relu", [-1.0, 2.0], slope=0.01).data, [-0.01, 2.0])
    assert np.array_equal(ad.elementwise("exp", [0.0]).data, [1.0])


def test_division_by_exact_zero():
    with pytest.raises(ad.ComputationError):
        ad.div(Tensor([1.0, 2.0]), Tensor([1.0, 0.0]))


def test_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(a)).data, a)
    assert np.array_equal((Tensor([[1.0, 0.0]]) @ Tensor([[2.0], [5.0]])).data, [[2.0]])
    assert np.array_equal((Tensor([[1.0, 1.0], [0.0, 1.0]]) @ Tensor([[1.0, 0.0], [1.0, 1.0]])).data, [[2.0, 1.0], [1.0, 1.0]])


def test_gather_rows_examples():
    a = Tensor([[1.0], [2.0], [3.0]], requires_grad=True)
    out = ad.gather_rows(a, np.array([[1], [2], [0]]))
    assert np.array_equal(out.data, [[[2.0]], [[3.0]], [[1.0]]])
    with Tape() as tape:
        s = ad.gather_rows(a, np.array([[0], [0], [2]])).sum()
    tape.backward(s)
    assert np.array_equal(a.grad, [[2.0], [0.0], [1.0]])
    with pytest.raises(IndexError):
        ad.gather_rows(Tensor(np.ones((3, 1))), np.array([[3]]))


def test_reduce_examples():
    assert Tensor([2.0, 4.0]).mean().item() == 3.0
    assert np.array_equal(Tensor([[1.0, 2.0], [3.0, 4.0]]).sum(axis=0).data, [4.0, 6.0])
    x = Tensor([1.0, 3.0, 3.0], requires_grad=True)
    with Tape() as tape:
        m = x.max()
    tape.backward(m)
    assert m.item() == 3.0
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])
    with pytest.raises(ad.ShapeError):
        Tensor(np.ones((2, 2))).sum(axis=2)


def test_grad_check_examples():
    x = Tensor([1.0, 2.0], requires_grad=True)
    rep = grad_check(lambda t: (t * t).sum(), x)
    assert rep.passed
    assert np.allclose(rep.analytic, [2.0, 4.0])
    y = Tensor([-1.0, 1.0], requires_grad=True)
    rep = grad_check(lambda t: ad.leaky_relu(t).sum(), y)
    assert np.allclose(rep.analytic, [0.01, 1.0])


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ad.ContractError):
        grad_check(lambda t: t * 2.0, Tensor([1.0, 2.0], requires_grad=True))


@pytest.mark.parametrize("name", sorted(ad.REGISTRY))
def test_every_op_matches_central_differences(name):
    inputs, f = _op_cases(np.random.default_rng(11))[name]
    rep = grad_check(f, inputs)
    assert rep.passed, f"{name}: {rep.max_rel_error}"


def test_tape_consumed_once():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        y = (x * 3.0).sum()
    tape.backward(y)
    with pytest.raises(ad.ContractError):
        tape.backward(y)


def test_grad_only_on_participants():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    c = Tensor([3.0, 3.0])
    with Tape() as tape:
        y = (x * c).sum()
    tape.backward(y)
    assert np.array_equal(x.grad, [3.0, 3.0])
    assert unused.grad is None
    assert c.grad is None


def test_forward_does_not_mutate_inputs():
    a = np.array([[1.0, -2.0], [3.0, 0.5]])
    x = Tensor(a.copy(), requires_grad=True)
    with Tape():
        ad.leaky_relu(x @ x + x).sum()
    assert np.array_equal(x.data, a)


def test_no_recording_outside_tape():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_broadcast_gradient_equals_tiled(data):
    shapes = data.draw(broadcastable_shapes((3, 4), min_dims=1, max_dims=2, min_side=1))
    full = np.broadcast_shapes(shapes, (3, 4))
    a_val = data.draw(arrays(np.float64, shapes, elements=st.floats(-2, 2)))
    w = np.arange(np.prod(full), dtype=np.float64).reshape(full) / 10.0
    b = Tensor(np.ones((3, 4)))
    a = Tensor(a_val, requires_grad=True)
    with Tape() as tape:
        out = ((a * b) * w).sum()
    (g,) = tape.gradient(out, [a])
    tiled = Tensor(np.broadcast_to(a_val, full).copy(), requires_grad=True)
    with Tape() as tape2:
        out2 = ((tiled * b) * w).sum()
    (g_t,) = tape2.gradient(out2, [tiled])
    expect = g_t
    while expect.ndim > len(shapes):
        expect = expect.sum(0)
    expect = expect.sum(axis=tuple(i for i, s in enumerate(shapes) if s == 1), keepdims=True)
    assert np.allclose(g, expect)
    assert out.item() == pytest.approx(out2.item())


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-3, 3)))
def test_forward_deterministic(x):
    f = lambda: ad.softplus(Tensor(x) @ Tensor(x.T)).sum().item()  # noqa: E731
    assert f() == f()


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-2, 2)),
       arrays(np.float64, (3, 2), elements=st.floats(-2, 2)))
def test_matmul_softplus_gradients(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    assert grad_check(lambda: ad.softplus(ta @ tb).sum(), [ta, tb]).passed

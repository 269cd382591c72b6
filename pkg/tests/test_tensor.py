import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelgat import tensor as T
from voxelgat.tensor import Tape, Tensor

from conftest import central_difference, rel_err


def grad_of(build, *leaves):
    for leaf in leaves:
        leaf.grad = None
    with Tape() as tape:
        loss = build()
    T.backward(loss, tape)
    return [leaf.grad for leaf in leaves]


def check_op(build, leaves, tol=1e-4):
    analytic = grad_of(build, *leaves)
    for leaf, g in zip(leaves, analytic):
        num = central_difference(lambda: build().item(), leaf.data)
        assert rel_err(g, num) < tol


def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(Tensor(np.eye(2)), Tensor(b))
    assert np.array_equal(out.data, b)


def test_matmul_forced_zero():
    out = T.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]]))
    assert out.data.tolist() == [[0.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(T.DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_difference(rng):
    a = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (4, 2)), requires_grad=True)
    g = grad_of(lambda: T.tsum(T.matmul(a, b)), a)[0]
    num = central_difference(lambda: float((a.data @ b.data).sum()), a.data)
    assert rel_err(g, num) < 1e-6


@pytest.mark.parametrize("x, expected", [(2.0, 2.0), (-1.0, -0.2), (0.0, 0.0)])
def test_leaky_relu_values(x, expected):
    assert T.leaky_relu(Tensor([x]), 0.2).data[0] == pytest.approx(expected, abs=1e-15)


def test_leaky_relu_gradient_negative_branch():
    x = Tensor([-1.0], requires_grad=True)
    (g,) = grad_of(lambda: T.tsum(T.leaky_relu(x, 0.2)), x)
    assert g[0] == pytest.approx(0.2)


def test_segment_softmax_single_edge():
    out = T.segment_softmax(Tensor([3.7]), [0], 1)
    assert out.data[0] == 1.0


def test_segment_softmax_equal_logits():
    out = T.segment_softmax(Tensor([0.5] * 4), [0] * 4, 1)
    assert np.allclose(out.data, 0.25, atol=1e-15)


def test_segment_softmax_two_to_one():
    out = T.segment_softmax(Tensor([0.0, math.log(2.0)]), [0, 0], 1)
    assert out.data == pytest.approx([1 / 3, 2 / 3], abs=1e-15)


def test_segment_softmax_isolated_node():
    with pytest.raises(T.IsolatedNodeError):
        T.segment_softmax(Tensor([1.0, 2.0]), [0, 0], 2)


def test_segment_softmax_is_stable_for_large_logits():
    out = T.segment_softmax(Tensor([1000.0, 1000.0, -1000.0]), [0, 0, 1], 2)
    assert out.is_finite()
    assert out.data.tolist() == [0.5, 0.5, 1.0]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_segment_softmax_groups_sum_to_one(n, extra, seed):
    r = np.random.default_rng(seed)
    dst = np.concatenate([np.arange(n), r.integers(0, n, extra)])
    logits = r.normal(scale=5.0, size=(len(dst), 3))
    out = T.segment_softmax(Tensor(logits), dst, n).data
    sums = np.zeros((n, 3))
    np.add.at(sums, dst, out)
    assert np.all(np.abs(sums - 1) <= 1e-9)
    assert np.all(out > 0) and np.all(out <= 1)


def test_backward_of_sum_is_ones():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    (g,) = grad_of(lambda: T.tsum(x), x)
    assert g.tolist() == [1.0, 1.0, 1.0]


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = T.mul(x, Tensor(2.0))
    with pytest.raises(T.ContractError):
        T.backward(y, tape)


def test_gradient_linearity(rng):
    x = Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    w = Tensor(rng.uniform(-2, 2, (3, 2)))
    f1 = lambda: T.tsum(T.leaky_relu(T.matmul(x, w), 0.2))
    f2 = lambda: T.tsum(T.mul(x, x))
    g1 = grad_of(f1, x)[0]
    g2 = grad_of(f2, x)[0]
    g12 = grad_of(lambda: T.add(f1(), f2()), x)[0]
    assert np.allclose(g12, g1 + g2, atol=1e-12)


def test_unused_leaf_has_no_grad():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.mul(x, Tensor(3.0)))
    T.backward(loss, tape)
    assert x.grad.tolist() == [3.0]
    assert y.grad is None


@pytest.mark.parametrize("name", [
    "add_broadcast", "mul_broadcast", "log", "concat", "reshape_sum_axis",
    "gather", "segment_sum", "segment_softmax", "softmax_rows", "edge_aggregate",
])
def test_op_gradients(name, rng):
    """Every differentiable primitive against central differences on [-2, 2] inputs."""
    a = Tensor(rng.uniform(-2, 2, (5, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (1, 3)), requires_grad=True)
    w = rng.normal(size=(5, 3))
    w6 = rng.normal(size=(6, 3))
    idx = np.array([0, 2, 2, 4, 1, 0])
    dst = np.array([0, 0, 1, 2, 2, 2, 3, 4])
    if name == "add_broadcast":
        build, leaves = lambda: T.tsum(T.mul(T.add(a, b), Tensor(w))), [a, b]
    elif name == "mul_broadcast":
        build, leaves = lambda: T.tsum(T.mul(T.mul(a, b), Tensor(w))), [a, b]
    elif name == "log":
        p = Tensor(rng.uniform(0.5, 2, (5, 3)), requires_grad=True)
        build, leaves = lambda: T.tsum(T.mul(T.log(p), Tensor(w))), [p]
    elif name == "concat":
        build, leaves = lambda: T.tsum(T.mul(T.concat([a, a, b], axis=0), Tensor(
            np.vstack([w, w, w[:1]])))), [a, b]
    elif name == "reshape_sum_axis":
        build, leaves = lambda: T.tsum(T.mul(T.tsum(T.reshape(a, (5, 3, 1)), axis=1),
                                             Tensor(w[:, :1]))), [a]
    elif name == "gather":
        build, leaves = lambda: T.tsum(T.mul(T.gather(a, idx), Tensor(w6))), [a]
    elif name == "segment_sum":
        build, leaves = lambda: T.tsum(T.mul(T.segment_sum(a, [0, 1, 1, 2, 0], 3),
                                             Tensor(w[:3]))), [a]
    elif name == "segment_softmax":
        e = Tensor(rng.uniform(-2, 2, (8, 2)), requires_grad=True)
        ww = rng.normal(size=(8, 2))
        build, leaves = lambda: T.tsum(T.mul(T.segment_softmax(e, dst, 5), Tensor(ww))), [e]
    elif name == "softmax_rows":
        build, leaves = lambda: T.tsum(T.mul(T.softmax_rows(a), Tensor(w))), [a]
    else:
        alpha = Tensor(rng.uniform(0, 1, (8, 2)), requires_grad=True)
        z = Tensor(rng.uniform(-2, 2, (5, 2, 3)), requires_grad=True)
        src = np.array([1, 0, 3, 0, 1, 2, 3, 4])
        ww = rng.normal(size=(5, 2, 3))
        build, leaves = lambda: T.tsum(T.mul(T.edge_aggregate(alpha, z, src, dst),
                                             Tensor(ww))), [alpha, z]
    check_op(build, leaves)


def test_edge_aggregate_matches_gather_scatter(rng):
    alpha = Tensor(rng.uniform(0, 1, (6, 2)))
    z = Tensor(rng.normal(size=(4, 2, 3)))
    src = np.array([0, 1, 2, 3, 1, 2])
    dst = np.array([0, 0, 1, 2, 3, 3])
    fused = T.edge_aggregate(alpha, z, src, dst).data
    msg = z.data[src] * alpha.data[:, :, None]
    ref = np.zeros((4, 2, 3))
    np.add.at(ref, dst, msg)
    assert np.allclose(fused, ref, atol=1e-14)


def test_log_clamp_has_zero_gradient():
    p = Tensor([0.0, 0.5], requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.log(p, floor=1e-12))
    T.backward(loss, tape)
    assert loss.is_finite()
    assert p.grad.tolist() == [0.0, 2.0]

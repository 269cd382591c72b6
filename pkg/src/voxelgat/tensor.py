"""Small reverse-mode autodiff over dense float64 arrays.

Only the handful of primitives needed by the attention layers and the
weighted cross-entropy are supported. Operations executed while a
:class:`Tape` is active are recorded on it; :func:`backward` replays the
tape in reverse to accumulate gradients into leaves with
``requires_grad=True``.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class DimensionError(ValueError):
    pass


class IsolatedNodeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_id")

    _counter = 0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        Tensor._counter += 1
        self._id = Tensor._counter

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __radd__ = __add__
    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations on tensors inside the block are
    appended in execution order, which is a valid topological order.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(Tape._local, "stack", None)
        if stack is None:
            stack = Tape._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._local.stack.pop()

    @staticmethod
    def current() -> "Tape | None":
        stack = getattr(Tape._local, "stack", None)
        return stack[-1] if stack else None

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _record(inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = Tape.current()
    if needs and tape is not None:
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    produced = {node.output._id for node in tape.nodes}
    if loss._id not in produced:
        raise ContractError("loss is not on the tape")
    leaves: dict[int, Tensor] = {}
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output._id, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._id not in produced:
                leaves[t._id] = t
            prev = grads.get(t._id)
            grads[t._id] = gi if prev is None else prev + gi
    for tid, leaf in leaves.items():
        g = grads[tid]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return _record((a, b), A @ B, bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record((a, b), a.data + b.data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data

    def bw(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _record((a, b), A * B, bw)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record((x,), np.asarray(x.data.sum(axis=axis)), bw)


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; inputs below ``floor`` are clamped (zero gradient there)."""
    X = x.data
    clamped = X < floor if floor > 0 else np.zeros(X.shape, dtype=bool)
    safe = np.where(clamped, floor, X)

    def bw(g):
        return (np.where(clamped, 0.0, g / safe),)

    return _record((x,), np.log(safe), bw)


def leaky_relu(x: Tensor, eta: float = 0.2) -> Tensor:
    X = x.data
    slope = np.where(X >= 0, 1.0, eta)

    def bw(g):
        return (g * slope,)

    return _record((x,), X * slope, bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _record((x,), x.data.reshape(shape), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(tuple(xs), np.concatenate([t.data for t in xs], axis=axis), bw)


def _segment_matrix(index: np.ndarray, n: int) -> sp.csr_matrix:
    m = len(index)
    return sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows ``x[index]``; the gradient scatters back with summation."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def bw(g):
        S = _segment_matrix(index, n)
        return ((S @ g.reshape(len(index), -1)).reshape((n,) + g.shape[1:]),)

    return _record((x,), x.data[index], bw)


def segment_sum(x: Tensor, index: np.ndarray, n: int) -> Tensor:
    """Sum rows of ``x`` into ``n`` buckets given by ``index``."""
    index = np.asarray(index, dtype=np.int64)
    if len(index) and (index.min() < 0 or index.max() >= n):
        raise DimensionError("segment index out of range")
    S = _segment_matrix(index, n)
    X = x.data
    out = (S @ X.reshape(len(index), -1)).reshape((n,) + X.shape[1:])

    def bw(g):
        return (g[index],)

    return _record((x,), out, bw)


def segment_softmax(edge_logits: Tensor, edge_dst: np.ndarray, n_nodes: int) -> Tensor:
    """Softmax over groups of edges sharing a destination node.

    ``edge_logits`` has shape ``(E,)`` or ``(E, H)``; heads are normalized
    independently.
    """
    dst = np.asarray(edge_dst, dtype=np.int64)
    L = edge_logits.data
    if L.shape[0] != len(dst):
        raise DimensionError("edge_logits and edge_dst lengths differ")
    if len(dst) and (dst.min() < 0 or dst.max() >= n_nodes):
        raise DimensionError("edge_dst index out of range")
    counts = np.bincount(dst, minlength=n_nodes)
    if np.any(counts == 0):
        raise IsolatedNodeError(
            f"node {int(np.flatnonzero(counts == 0)[0])} has no incoming edge")
    flat = L.reshape(len(dst), -1)
    gmax = np.full((n_nodes, flat.shape[1]), -np.inf)
    np.maximum.at(gmax, dst, flat)
    ex = np.exp(flat - gmax[dst])
    S = _segment_matrix(dst, n_nodes)
    denom = S @ ex
    out = (ex / denom[dst]).reshape(L.shape)

    def bw(g):
        g2 = g.reshape(flat.shape)
        y = out.reshape(flat.shape)
        dot = S @ (g2 * y)
        return ((y * (g2 - dot[dst])).reshape(L.shape),)

    return _record((edge_logits,), out, bw)


def softmax_rows(x: Tensor) -> Tensor:
    X = x.data
    ex = np.exp(X - X.max(axis=1, keepdims=True))
    out = ex / ex.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _record((x,), out, bw)


def edge_aggregate(alpha: Tensor, z: Tensor, src: np.ndarray, dst: np.ndarray) -> Tensor:
    """out[p, k] = sum over edges (q -> p) of alpha[e, k] * z[q, k].

    ``alpha`` is ``(E, K)`` and ``z`` is ``(n, K, F)``. Equivalent to
    ``segment_sum(gather(z, src) * alpha[..., None], dst, n)`` without
    materializing the ``(E, K, F)`` message tensor.
    """
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    A, Z = alpha.data, z.data
    n, K, _ = Z.shape
    if A.shape != (len(src), K):
        raise DimensionError(f"alpha shape {A.shape} does not match {len(src)} edges x {K} heads")
    mats = [sp.csr_matrix((A[:, k], (dst, src)), shape=(n, n)) for k in range(K)]
    out = np.stack([mats[k] @ Z[:, k, :] for k in range(K)], axis=1)

    def bw(g):
        dz = np.stack([mats[k].T @ g[:, k, :] for k in range(K)], axis=1)
        da = np.empty_like(A)
        for k in range(K):
            da[:, k] = np.einsum("ef,ef->e", g[dst, k, :], Z[src, k, :])
        return da, dz

    return _record((alpha, z), out, bw)

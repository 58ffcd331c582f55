"""Reverse-mode autodiff on numpy arrays.

Operations executed while a :class:`Tape` is active, and with at least one
input that requires a gradient, are appended to that tape. Gradients are
computed by walking the tape in exact reverse order of recording.

Every backward rule is itself written with tensor operations. With
``create_graph=True`` those are recorded on the same tape, which makes
gradients of gradients available (needed for gradient penalties).
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "active_tape",
    "as_tensor",
    "add",
    "mul",
    "neg",
    "scale",
    "power",
    "absolute",
    "tsum",
    "mean",
    "reshape",
    "broadcast_to",
    "sum_to",
    "concat",
    "getitem",
    "l2_norm",
    "where_positive",
]

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording (pushes a ``None`` tape)."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward

    def __repr__(self):
        return f"Node({self.op}, out={self.output.shape})"


class Tensor:
    """An N-D array plus gradient bookkeeping."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    # -- basics --------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return mul(self, power(as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def abs(self):
        return absolute(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


BackwardFn = Callable[[Tensor, tuple], tuple]


def _make(data: np.ndarray, inputs: tuple, backward: BackwardFn, op: str) -> Tensor:
    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        node = Node(op, inputs, out, backward)
        tape.nodes.append(node)
        out._node = node
    return out


class Tape:
    """Ordered record of operations.

    Use as a context manager while computing the forward pass::

        with Tape() as tape:
            loss = model(x).mean()
        grads = tape.gradient(loss, model.parameters())
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    @contextmanager
    def _recording(self):
        _stack().append(self)
        try:
            yield
        finally:
            _stack().pop()

    def gradient(self, target: Tensor, sources: Sequence[Tensor], target_grad=None,
                 create_graph: bool = False) -> List[Optional[Tensor]]:
        """Gradients of ``target`` w.r.t. ``sources`` (``None`` where unreachable).

        ``target_grad`` defaults to ones (the gradient of ``target.sum()``).
        """
        sources = list(sources)
        nodes = list(self.nodes)
        # Forward sweep: only nodes fed (transitively) by a source can carry gradient to one.
        reach = {id(s) for s in sources}
        relevant = []
        for node in nodes:
            if any(id(t) in reach for t in node.inputs):
                reach.add(id(node.output))
                relevant.append(node)
        if id(target) not in reach:
            return [None] * len(sources)
        if target_grad is None:
            target_grad = Tensor(np.ones_like(target.data))
        grads = {id(target): as_tensor(target_grad, target.dtype)}
        ctx = self._recording() if create_graph else no_grad()
        with ctx:
            for node in reversed(relevant):
                g = grads.get(id(node.output))
                if g is None:
                    continue
                needs = tuple(id(t) in reach for t in node.inputs)
                for inp, need, ig in zip(node.inputs, needs, node.backward(g, needs)):
                    if not need or ig is None:
                        continue
                    key = id(inp)
                    grads[key] = ig if key not in grads else grads[key] + ig
        return [grads.get(id(s)) for s in sources]

    def leaves(self) -> List[Tensor]:
        seen, out = set(), []
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t.is_leaf and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def backward(self, target: Tensor) -> None:
        """Assign ``.grad`` (a numpy array) on every recorded leaf that requires grad.

        Leaves the target does not depend on get zeros. Existing ``.grad``
        values are overwritten, not accumulated.
        """
        leaves = self.leaves()
        for leaf, g in zip(leaves, self.gradient(target, leaves)):
            leaf.grad = np.zeros_like(leaf.data) if g is None else g.data


# -- helpers ---------------------------------------------------------------------
def _sum_to_np(x: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    return x.sum(axis=axes, keepdims=True).reshape(shape)


def _other(b, dtype) -> Tensor:
    return b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=dtype))


# -- elementwise -------------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _other(a, None)
    b = _other(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (sum_to(g, sa) if needs[0] else None,
                sum_to(g, sb) if needs[1] else None)

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = _other(a, None)
    b = _other(b, a.dtype)

    def backward(g, needs):
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)

    return _make(a.data * b.data, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    return _make(a.data * c, (a,), lambda g, needs: (scale(g, c),), "scale")


def power(a: Tensor, p: float) -> Tensor:
    def backward(g, needs):
        return (mul(g, scale(power(a, p - 1.0), p)),)

    return _make(a.data ** p, (a,), backward, "power")


def where_positive(a: Tensor, neg_slope: float) -> Tensor:
    """``a`` where positive, ``neg_slope * a`` elsewhere (leaky ReLU).

    The derivative mask is treated as a constant; at 0 the slope branch is used.
    """
    mask = np.where(a.data > 0, 1.0, neg_slope).astype(a.dtype)
    return _make(a.data * mask, (a,), lambda g, needs: (mul(g, Tensor(mask)),), "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    def backward(g, needs):
        t = tanh(a)  # rebuilt on the tape so the derivative stays differentiable
        return (mul(g, add(neg(mul(t, t)), 1.0)),)

    return _make(np.tanh(a.data), (a,), backward, "tanh")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g, needs: (mul(g, Tensor(sign)),), "abs")


# -- reductions and shape ------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    shape = a.shape

    def backward(g, needs):
        return (broadcast_to(reshape(g, kept_shape), shape),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g, needs: (reshape(g, old),), "reshape")


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    data = np.broadcast_to(a.data, shape)
    return _make(data, (a,), lambda g, needs: (sum_to(g, old),), "broadcast_to")


def sum_to(a: Tensor, shape) -> Tensor:
    """Sum broadcast dimensions away so the result has ``shape``."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    old = a.shape
    return _make(_sum_to_np(a.data, shape), (a,), lambda g, needs: (broadcast_to(g, old),), "sum_to")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(index)))
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; the adjoint embeds into zeros."""
    shape = a.shape
    return _make(a.data[index], (a,), lambda g, needs: (_embed(g, shape, index),), "getitem")


def _embed(g: Tensor, shape, index) -> Tensor:
    data = np.zeros(shape, dtype=g.dtype)
    data[index] = g.data
    return _make(data, (g,), lambda u, needs: (getitem(u, index),), "embed")


def l2_norm(a: Tensor, axis) -> Tensor:
    """Euclidean norm over ``axis``; the gradient at a zero norm is taken as 0."""
    axes = _norm_axis(axis, a.ndim)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axes))
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    out_holder = []

    def backward(g, needs):
        n = out_holder[0]
        zero = Tensor((n.data == 0).astype(n.dtype))
        inv = power(n + zero, -1.0)
        return (mul(a, broadcast_to(reshape(mul(g, inv), kept), a.shape)),)

    out = _make(norm, (a,), backward, "l2_norm")
    out_holder.append(out)
    return out

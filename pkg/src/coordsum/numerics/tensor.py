"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tape` records every primitive applied to tensors that live on it,
as a flat list of nodes whose parent references always point backward.
``Tape.backward`` walks the list in reverse and accumulates exact gradients.
Tensors without a tape behave as constants and cost only the numpy call.

All reductions use numpy's fixed evaluation order, so repeated runs on the
same platform are bitwise identical.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class _Node:
    __slots__ = ("name", "parents", "backward_fn", "shape")

    def __init__(
        self,
        name: str,
        parents: tuple[int, ...],
        backward_fn: Callable[[Array], Sequence[Array]],
        shape: tuple[int, ...],
    ):
        self.name = name
        self.parents = parents
        self.backward_fn = backward_fn
        self.shape = shape


class Tape:
    """Append-only record of primitives; gradient accumulators live here."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.grads: list[Array | None] = []

    def _record(self, name: str, parents: tuple[int, ...], backward_fn, shape) -> int:
        node_id = len(self.nodes)
        if any(p >= node_id for p in parents):
            raise ValueError("tape node parents must point backward")
        self.nodes.append(_Node(name, parents, backward_fn, shape))
        self.grads.append(None)
        return node_id

    def leaf(self, values: Array) -> "Tensor":
        """Register an independent variable (parameter) on this tape."""
        return Tensor(values, tape=self, _validate=True)._as_leaf()

    def backward(self, root: "Tensor") -> None:
        """Accumulate d(root)/d(node) for every node reachable from ``root``."""
        if root.tape is not self or root.node < 0:
            raise ValueError("root is not recorded on this tape")
        if root.values.shape != ():
            raise ShapeError(f"backward root must be scalar, got shape {root.values.shape}")
        self.grads = [None] * len(self.nodes)
        self.grads[root.node] = np.ones((), dtype=np.float64)
        for node_id in range(root.node, -1, -1):
            grad = self.grads[node_id]
            if grad is None:
                continue
            node = self.nodes[node_id]
            if not node.parents:
                continue
            parent_grads = node.backward_fn(grad)
            for parent_id, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if self.grads[parent_id] is None:
                    # views of other grads are safe: accumulation never mutates in place
                    self.grads[parent_id] = np.asarray(pg, dtype=np.float64)
                else:
                    self.grads[parent_id] = self.grads[parent_id] + pg

    def grad(self, tensor: "Tensor") -> Array:
        """Gradient of the last backward() root w.r.t. ``tensor`` (zeros if unreachable)."""
        if tensor.tape is not self or tensor.node < 0:
            raise ValueError("tensor is not recorded on this tape")
        g = self.grads[tensor.node]
        if g is None:
            return np.zeros(tensor.values.shape, dtype=np.float64)
        return np.broadcast_to(g, tensor.values.shape).astype(np.float64, copy=False)


class Tensor:
    """Immutable float64 array, optionally tracked on a tape."""

    __slots__ = ("values", "tape", "node")

    def __init__(self, values, tape: Tape | None = None, node: int = -1, _validate: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if _validate and not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.values = arr
        self.tape = tape
        self.node = node

    def _as_leaf(self) -> "Tensor":
        assert self.tape is not None
        self.node = self.tape._record("leaf", (), lambda g: (), self.values.shape)
        return self

    @staticmethod
    def const(values) -> "Tensor":
        return Tensor(values, tape=None, _validate=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self) -> str:
        tracked = "tracked" if self.node >= 0 else "const"
        return f"Tensor(shape={self.values.shape}, {tracked})"

    # operator sugar; all arithmetic routes through the module-level primitives
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __neg__(self):
        return mul(self, Tensor.const(-1.0))

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        n = self.values.size if axis is None else self.values.shape[axis]
        return tensor_sum(self, axis=axis) * (1.0 / n)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def item(self) -> float:
        return float(self.values)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor.const(x)


def _shared_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands live on different tapes")
    return tape


def _result(name: str, values: Array, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result; record on the tape only if a tracked input contributes."""
    tape = _shared_tape(*inputs)
    tracked = [t for t in inputs if t.node >= 0]
    if tape is None or not tracked:
        return Tensor(values)
    parents = tuple(t.node for t in tracked)
    tracked_pos = [i for i, t in enumerate(inputs) if t.node >= 0]

    def backward(grad: Array) -> list[Array]:
        all_grads = backward_fn(grad)
        return [all_grads[i] for i in tracked_pos]

    node = tape._record(name, parents, backward, values.shape)
    return Tensor(values, tape=tape, node=node)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    return _result(
        "add", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.values - b.values
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None
    return _result(
        "sub", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None
    av, bv = a.values, b.values
    return _result(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.values / b.values
    except ValueError:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}") from None
    av, bv = a.values, b.values
    return _result(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * av / (bv * bv), b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics with batch broadcasting; operands must be >= 2-D."""
    a, b = _coerce(a), _coerce(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError(f"matmul requires >=2-D operands, got {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.values, b.values)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    av, bv = a.values, b.values

    def backward(g: Array):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))

    return _result("matmul", out, (a, b), backward)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    x = _coerce(x)
    out = np.transpose(x.values, axes)
    if axes is None:
        inverse = None
    else:
        inverse = tuple(np.argsort(axes))
    return _result("transpose", out, (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape) -> Tensor:
    x = _coerce(x)
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    orig = x.values.shape
    return _result("reshape", out, (x,), lambda g: (g.reshape(orig),))


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)
    shape = x.values.shape

    def backward(g: Array):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(np.float64, copy=False),)

    return _result("sum", out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _coerce(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g: Array):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _result("softmax", out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log softmax (max subtraction before exp)."""
    x = _coerce(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g: Array):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (x,), backward)


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` (no affine part)."""
    x = _coerce(x)
    mean = x.values.mean(axis=axis, keepdims=True)
    centered = x.values - mean
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    out = centered * inv_std
    n = x.values.shape[axis]

    def backward(g: Array):
        g_mean = g.mean(axis=axis, keepdims=True)
        g_dot = (g * out).mean(axis=axis, keepdims=True)
        return (inv_std * (g - g_mean - out * g_dot),)

    return _result("layer_norm", out, (x,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = _coerce(x)
    v = x.values
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g: Array):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        local = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner
        return (g * local,)

    return _result("gelu", out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = _coerce(x)
    mask = x.values > 0
    out = np.where(mask, x.values, 0.0)
    return _result("relu", out, (x,), lambda g: (g * mask,))


def embedding_lookup(table: Tensor, ids: Array) -> Tensor:
    """Rows of ``table`` selected by an integer id array of any shape."""
    table = _coerce(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.values.shape[0]):
        raise ShapeError(f"embedding id out of range for table of {table.values.shape[0]} rows")
    out = table.values[ids]
    shape = table.values.shape

    def backward(g: Array):
        gt = np.zeros(shape, dtype=np.float64)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (gt,)

    return _result("embedding_lookup", out, (table,), backward)


def masked_fill(x: Tensor, mask: Array, value: float) -> Tensor:
    """Replace positions where ``mask`` is true by ``value`` (no grad through them)."""
    x = _coerce(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.values.shape)
    out = np.where(mask, value, x.values)
    return _result("masked_fill", out, (x,), lambda g: (np.where(mask, 0.0, g),))


def gather_last(x: Tensor, idx: Array) -> Tensor:
    """Pick one element along the last axis per leading position.

    ``idx`` has shape ``x.shape[:-1]``; the result drops the last axis.
    """
    x = _coerce(x)
    idx = np.asarray(idx)
    if idx.shape != x.values.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {idx.shape} != {x.values.shape[:-1]}")
    out = np.take_along_axis(x.values, idx[..., None], axis=-1)[..., 0]
    shape = x.values.shape

    def backward(g: Array):
        gx = np.zeros(shape, dtype=np.float64)
        flat_gx = gx.reshape(-1, shape[-1])
        rows = np.arange(flat_gx.shape[0])
        np.add.at(flat_gx, (rows, idx.reshape(-1)), g.reshape(-1))
        return (gx,)

    return _result("gather_last", out, (x,), backward)


def take(x: Tensor, idx: Array) -> Tensor:
    """1-D fancy indexing: result[i] = x[idx[i]]."""
    x = _coerce(x)
    idx = np.asarray(idx)
    if x.values.ndim != 1:
        raise ShapeError(f"take expects a 1-D tensor, got shape {x.shape}")
    out = x.values[idx]
    n = x.values.shape[0]

    def backward(g: Array):
        gx = np.zeros(n, dtype=np.float64)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result("take", out, (x,), backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-D tensor (used for per-candidate scores)."""
    tensors = [_coerce(t) for t in tensors]
    for t in tensors:
        if t.values.shape != ():
            raise ShapeError("stack expects scalar tensors")
    out = np.array([t.values for t in tensors], dtype=np.float64)

    def backward(g: Array):
        return tuple(g[i] for i in range(len(tensors)))

    return _result("stack", out, tuple(tensors), backward)

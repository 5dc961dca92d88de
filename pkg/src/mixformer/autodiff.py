"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float64 ndarray plus an optional backward closure; ops
build a DAG and Tensor.backward() walks it in reverse topological order.
Only what the model needs is implemented: broadcast-aware arithmetic,
matmul, shape ops, embedding gather, and fused softmax / rms_norm /
layer_norm / swish / binary cross-entropy.

Every op also reports a FLOP count to any active FlopTrace.  The
convention is fixed across the package so the analytic cost meter can be
checked against traced executions:

  * matmul: 2 * output_size * contraction_length (one multiply-add = 2)
  * softmax, rms_norm, layer_norm: 5 per input element
  * everything else (adds, residuals, masking, activations, reshapes,
    gathers): 0

All data is float64.  Gradients are accumulated in Tensor.grad as plain
ndarrays.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

_GRAD_ENABLED: bool = True
_TRACES: list["FlopTrace"] = []


class no_grad:
    """Context manager that disables graph construction.

    Forward values are unchanged; ops executed inside produce leaf
    tensors with no history.  FLOP tracing still works.
    """

    def __enter__(self) -> "no_grad":
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc) -> bool:
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class FlopTrace:
    """Records (kind, flops) events for ops executed while active.

    Traces nest; every active trace sees every event.  The total is the
    ground-truth cost of whatever ran inside the with-block and is what
    the closed-form meter must reproduce exactly.
    """

    def __init__(self) -> None:
        self.events: list[tuple[str, int]] = []

    def __enter__(self) -> "FlopTrace":
        _TRACES.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TRACES.remove(self)
        return False

    @property
    def total(self) -> int:
        return sum(f for _, f in self.events)

    def by_kind(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for kind, flops in self.events:
            out[kind] = out.get(kind, 0) + flops
        return out


def _record(kind: str, flops: int) -> None:
    if _TRACES:
        for trace in _TRACES:
            trace.events.append((kind, flops))


class Tensor:
    """A float64 ndarray with an optional place in a backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad: bool = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate gradients of a scalar (or given cotangent) into leaves."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a cotangent needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise ShapeError(
                f"cotangent shape {grad.shape} does not match output {self.data.shape}"
            )

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # Operator sugar.  Scalars are fine; ndarray operands become constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        raise TypeError("Tensor division only supports python scalars")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    kind: str = "",
    flops: int = 0,
) -> Tensor:
    if flops:
        _record(kind, flops)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (want, have) in enumerate(zip(shape, g.shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(g, b.data.shape)

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _sum_to_shape(g, a.data.shape), -_sum_to_shape(g, b.data.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _sum_to_shape(g * b.data, a.data.shape),
            _sum_to_shape(g * a.data, b.data.shape),
        )

    return _make(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """Broadcasting matrix product; both operands must be at least 2-d."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul contraction mismatch: {a.data.shape} @ {b.data.shape}"
        )
    out = np.matmul(a.data, b.data)
    k = a.data.shape[-1]
    flops = 2 * out.size * k

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _sum_to_shape(ga, a.data.shape), _sum_to_shape(gb, b.data.shape)

    return _make(out, (a, b), vjp, kind="matmul", flops=flops)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return _make(out, (x,), vjp)


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    out = np.swapaxes(x.data, a, b)

    def vjp(g):
        return (np.swapaxes(g, a, b),)

    return _make(out, (x,), vjp)


def broadcast_to(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = np.broadcast_to(x.data, shape).copy()
    old = x.data.shape

    def vjp(g):
        return (_sum_to_shape(g, old),)

    return _make(out, (x,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(ts), vjp)


def getitem(x, idx) -> Tensor:
    """Basic (slice / int / ellipsis) indexing only, so grads never overlap."""
    x = as_tensor(x)
    out = x.data[idx]
    shape = x.data.shape

    def vjp(g):
        buf = np.zeros(shape, dtype=np.float64)
        buf[idx] = g
        return (buf,)

    return _make(np.array(out, dtype=np.float64), (x,), vjp)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.data.shape
    if axis is None:
        count = x.data.size
    else:
        count = shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (x,), vjp)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), vjp)


def swish(x) -> Tensor:
    """x * sigmoid(x), the gate activation of the gated FFN."""
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    out = x.data * s

    def vjp(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return _make(out, (x,), vjp)


def softmax(x) -> Tensor:
    """Numerically stable softmax over the last axis.  5 flops/element."""
    x = as_tensor(x)
    if x.data.shape[-1] == 0:
        raise ShapeError("softmax over an empty axis is undefined")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), vjp, kind="softmax", flops=5 * x.data.size)


def rms_norm(x, scale, eps: float) -> Tensor:
    """Root-mean-square normalization over the last axis with a learned gain.

    y_i = scale_i * x_i / sqrt(mean(x^2) + eps).  5 flops/element.
    """
    x, scale = as_tensor(x), as_tensor(scale)
    n = x.data.shape[-1]
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    r = np.sqrt(ms + eps)
    inv = 1.0 / r
    xhat = x.data * inv
    out = xhat * scale.data

    def vjp(g):
        gs = g * scale.data
        proj = (gs * x.data).sum(axis=-1, keepdims=True)
        gx = gs * inv - x.data * (proj * inv**3 / n)
        gscale = _sum_to_shape(g * xhat, scale.data.shape)
        return gx, gscale

    return _make(out, (x, scale), vjp, kind="norm", flops=5 * x.data.size)


def layer_norm(x, scale, eps: float) -> Tensor:
    """Mean-and-variance normalization (population variance, gain only)."""
    x, scale = as_tensor(x), as_tensor(scale)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    s = np.sqrt(var + eps)
    xhat = xc / s
    out = xhat * scale.data

    def vjp(g):
        h = g * scale.data
        hmean = h.mean(axis=-1, keepdims=True)
        hx = (h * xhat).mean(axis=-1, keepdims=True)
        gx = (h - hmean - xhat * hx) / s
        gscale = _sum_to_shape(g * xhat, scale.data.shape)
        return gx, gscale

    return _make(out, (x, scale), vjp, kind="norm", flops=5 * x.data.size)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Gather rows of a (vocab, dim) table by an integer id array."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError("embedding table must be 2-d")
    out = table.data[ids]
    vocab, dim = table.data.shape

    def vjp(g):
        buf = np.zeros((vocab, dim), dtype=np.float64)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, dim))
        return (buf,)

    return _make(out, (table,), vjp)


def bce_with_logits(logits, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on raw logits.

    Uses the overflow-safe form max(z,0) - z*y + log1p(exp(-|z|)).
    """
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    z = logits.data
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def vjp(g):
        return (g * (_stable_sigmoid(z) - y),)

    return _make(out, (logits,), vjp)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out

"""Minimal dense-tensor reverse-mode autodiff engine.

Float64 end to end: desk scale makes speed irrelevant and the finite-difference
gradient checks need the precision.  Tensors are immutable after creation
(read-only sharing is safe); the recorded graph is traversed in exact reverse
of recording order on backward.  No broadcasting beyond bias-add, by design.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class GraphError(RuntimeError):
    """Backward called on an unusable graph (e.g. non-scalar loss)."""


_seq_counter = itertools.count()


class Tensor:
    """A dense float64 array with optional gradient tracking.

    data is always a C-contiguous float64 ndarray.  grad is populated by
    backward() for every tensor with requires_grad and accumulates across
    calls until zeroed by the caller.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._seq = next(_seq_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _record(out: Tensor, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Every requires_grad tensor in the recorded subgraph receives (or
    accumulates into) a .grad of its own shape.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad; nothing to differentiate")

    # Recording order is a topological order, so reverse sequence order is a
    # valid reverse traversal of the recorded tape.
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# op set
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Elementwise add; also accepts a scalar or a bias row (n,m)+(m,)."""
    if isinstance(b, (int, float)):
        out = Tensor(a.data + float(b))
        return _record(out, (a,), lambda g: (g,))
    b = _as_tensor(b)
    if a.data.shape == b.data.shape:
        out = Tensor(a.data + b.data)
        return _record(out, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        out = Tensor(a.data + b.data[None, :])
        return _record(out, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not conform")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        out = Tensor(a.data - float(b))
        return _record(out, (a,), lambda g: (g,))
    b = _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shapes {a.data.shape} and {b.data.shape} do not conform")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise multiply; also accepts a scalar."""
    if isinstance(b, (int, float)):
        bf = float(b)
        out = Tensor(a.data * bf)
        return _record(out, (a,), lambda g: (g * bf,))
    b = _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} do not conform")
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not conform")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def sigmoid(x: Tensor) -> Tensor:
    # stable in both tails
    y = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-x.data)),
                 np.exp(x.data) / (1.0 + np.exp(x.data)))
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * (x.data > 0),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    return _record(out, (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values into [lo, hi]; gradient passes only inside the interval."""
    y = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * inside,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of a 2-D tensor, then scale and shift."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm expects 2-D input, got {x.data.shape}")
    if gain.data.shape != (x.data.shape[1],) or bias.data.shape != (x.data.shape[1],):
        raise ShapeError(
            f"layer_norm: params {gain.data.shape}/{bias.data.shape} "
            f"do not match input {x.data.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    out = Tensor(xhat * gain.data[None, :] + bias.data[None, :])

    def vjp(g):
        dxhat = g * gain.data[None, :]
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = istd * (dxhat - m1 - xhat * m2)
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record(out, (x, gain, bias), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(sizes)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _record(out, tuple(tensors), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (the op set's slice)."""
    if start < 0 or length < 0 or start + length > x.data.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}:{start + length}) outside axis {axis} of {x.data.shape}")
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    out = Tensor(x.data[tuple(sl)])

    def vjp(g):
        full = np.zeros_like(x.data)
        full[tuple(sl)] = g
        return (full,)

    return _record(out, (x,), vjp)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects 2-D input, got {x.data.shape}")
    out = Tensor(x.data.T)
    return _record(out, (x,), lambda g: (np.ascontiguousarray(g.T),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.data.shape),))


def embedding(weight: Tensor, indices: Sequence[int]) -> Tensor:
    """Row lookup: returns weight[indices] as a (len(indices), D) tensor."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or weight.data.ndim != 2:
        raise ShapeError(
            f"embedding: need 1-D indices and 2-D table, got {idx.shape}/{weight.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= weight.data.shape[0]):
        raise ShapeError(f"embedding: index out of range for table {weight.data.shape}")
    out = Tensor(weight.data[idx])

    def vjp(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (weight,), vjp)


def dropout(x: Tensor, rate: float, train: bool, key: tuple[int, int]) -> Tensor:
    """Inverted dropout driven by a counter-based PRNG.

    key is (seed, op_index); the same key always produces the same mask, so
    full runs replay bit-identically.  With train=False this is the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        out = Tensor(x.data)
        return _record(out, (x,), lambda g: (g,))
    gen = np.random.Generator(np.random.Philox(key=[int(key[0]), int(key[1])]))
    mask = (gen.random(x.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * mask)
    return _record(out, (x,), lambda g: (g * mask,))


class DropoutKeys:
    """Hands out (seed, op_index) keys in forward-pass order."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._i = itertools.count()

    def next(self) -> tuple[int, int]:
        return (self.seed, next(self._i))


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = Tensor(x.data.sum())
        return _record(out, (x,), lambda g: (np.full_like(x.data, float(g.ravel()[0])),))
    out = Tensor(x.data.sum(axis=axis))

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return _record(out, (x,), vjp)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean())
    return _record(out, (x,), lambda g: (np.full_like(x.data, float(g.ravel()[0]) / n),))

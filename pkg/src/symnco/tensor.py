"""Dense float64 tensors with a reverse-mode tape.

Every op appends a node to the tape of its inputs; :func:`backward` walks the
tape in reverse creation order and returns gradients for the named leaves.
Broadcasting follows numpy rules and gradients are summed back onto the input
shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MASK_VALUE = -1e9


class TensorError(ValueError):
    """Shape or domain error raised by a tensor op."""


@dataclass
class TapeNode:
    op: str
    inputs: tuple[int | None, ...]
    vjp: Callable[[np.ndarray], tuple] | None = None
    name: str | None = None


@dataclass
class Tape:
    """Append-only record of ops; ``record=False`` gives an inference tape."""

    record: bool = True
    nodes: list[TapeNode] = field(default_factory=list)
    leaves: dict[str, "Tensor"] = field(default_factory=dict)

    def _append(self, node: TapeNode) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def param(self, name: str, value) -> "Tensor":
        """Register (or fetch) a named differentiable leaf."""
        if name in self.leaves:
            return self.leaves[name]
        t = Tensor(np.array(value, dtype=np.float64), self, requires_grad=self.record)
        if self.record:
            t.id = self._append(TapeNode("leaf", (), name=name))
        self.leaves[name] = t
        return t

    def const(self, value) -> "Tensor":
        return Tensor(_contiguous(value), self, requires_grad=False)


class Tensor:
    __slots__ = ("data", "tape", "requires_grad", "id")
    __array_priority__ = 100

    def __init__(self, data: np.ndarray, tape: Tape | None, requires_grad: bool = False):
        self.data = data
        self.tape = tape
        self.requires_grad = requires_grad
        self.id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


GradMap = dict[str, np.ndarray]


def _contiguous(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x if x.flags.c_contiguous else x.copy()


def _wrap(x, tape: Tape | None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), tape, requires_grad=False)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    return None


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = _tape_of(*inputs)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(_contiguous(data), tape, requires)
    if requires and tape is not None and tape.record:
        ids = tuple(t.id if t.requires_grad else None for t in inputs)
        out.id = tape._append(TapeNode(op, ids, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise TensorError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise TensorError(f"log: non-positive input (min {x.data.min():.3g})")
    xd = x.data
    return _record("log", np.log(xd), (x,), lambda g: (g / xd,))


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record("sum", x.data.sum(axis=axis), (x,), vjp)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    count = x.data.size if axis is None else shape[axis]

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _record("mean", x.data.mean(axis=axis), (x,), vjp)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record("softmax", y, (x,),
                   lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _record("log_softmax", y, (x,),
                   lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def rmsnorm(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide by the root-mean-square over the last axis."""
    xd = x.data
    n = xd.shape[-1]
    r = np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)

    def vjp(g):
        gx = (g * xd).sum(axis=-1, keepdims=True)
        return (g / r - xd * gx / (n * r ** 3),)

    return _record("rmsnorm", xd / r, (x,), vjp)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity over the last axis."""
    if a.shape != b.shape:
        raise TensorError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    sa, sb = (ad * ad).sum(axis=-1), (bd * bd).sum(axis=-1)
    if np.any(sa == 0) or np.any(sb == 0):
        raise TensorError("cosine_similarity: zero-norm vector")
    na, nb = np.sqrt(sa), np.sqrt(sb)
    dot = (ad * bd).sum(axis=-1)
    # sqrt(s * s) == s exactly, so identical inputs give exactly 1
    c = dot / np.sqrt(sa * sb)

    def vjp(g):
        g = g[..., None]
        nae, nbe, ce = na[..., None], nb[..., None], c[..., None]
        ga = g * (bd / (nae * nbe) - ce * ad / nae ** 2)
        gb = g * (ad / (nae * nbe) - ce * bd / nbe ** 2)
        return ga, gb

    return _record("cosine_similarity", c, (a, b), vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    if a.ndim == 0 or b.ndim == 0:
        raise TensorError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    ad = a.data[None, :] if a.ndim == 1 else a.data
    bd = b.data[:, None] if b.ndim == 1 else b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise TensorError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    out_shape = out.shape
    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0]

    def vjp(g):
        g = g.reshape(out_shape)
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return (_unbroadcast(ga, ad.shape).reshape(a.shape),
                _unbroadcast(gb, bd.shape).reshape(b.shape))

    return _record("matmul", out, (a, b), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise TensorError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _record("reshape", y, (x,), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise TensorError(f"permute: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _record("permute", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_wrap(x, tape) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise TensorError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record("concat", out, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replace entries where ``mask`` is true with ``value`` (no gradient there)."""
    mask = np.asarray(mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise TensorError(f"masked_fill: mask {mask.shape} vs input {x.shape}") from None
    return _record("masked_fill", np.where(mask, value, x.data), (x,),
                   lambda g: (np.where(mask, 0.0, g),))


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick rows along axis -2: ``x`` is (..., N, d), ``idx`` is (..., K) -> (..., K, d)."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim < 2 or idx.shape[:-1] != x.shape[:-2]:
        raise TensorError(f"gather_rows: index {idx.shape} vs input {x.shape}")
    n, d = x.shape[-2:]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise TensorError(f"gather_rows: index out of range for {n} rows")
    xs = x.data.reshape(-1, n, d)
    ids = idx.reshape(xs.shape[0], -1)
    rows = np.arange(xs.shape[0])[:, None]
    out = xs[rows, ids].reshape(idx.shape + (d,))
    shape = x.shape

    def vjp(g):
        gx = np.zeros((xs.shape[0], n, d))
        np.add.at(gx, (rows, ids), g.reshape(xs.shape[0], -1, d))
        return (gx.reshape(shape),)

    return _record("gather_rows", out, (x,), vjp)


# ---------------------------------------------------------------- differentiation


def backward(tape: Tape, output: Tensor) -> GradMap:
    """Gradients of a scalar ``output`` w.r.t. every named leaf on ``tape``.

    Leaves the output does not depend on get zero arrays.
    """
    if output.data.size != 1 or output.ndim != 0:
        raise TensorError(f"backward: seed must be a scalar, got shape {output.shape}")
    if not tape.record:
        raise TensorError("backward: tape was created with record=False")
    grads: dict[int, np.ndarray] = {}
    out: GradMap = {name: np.zeros_like(t.data) for name, t in tape.leaves.items()}
    if output.id is None:
        return out
    grads[output.id] = np.ones(())
    for i in range(output.id, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = tape.nodes[i]
        if node.op == "leaf":
            out[node.name] = out[node.name] + g
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if inp is None or gi is None:
                continue
            prev = grads.get(inp)
            grads[inp] = gi if prev is None else prev + gi
    return out


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                           eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one component at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise TensorError(f"finite_difference_grad: non-finite value at component {i}")
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> float:
    """Largest ``|a-b| / max(|a|, |b|)``; entries whose absolute error is under ``floor`` count as 0."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
    rel = np.where(diff <= floor, 0.0, diff / denom)
    return float(rel.max()) if rel.size else 0.0

"""A small reverse-mode differentiation tape over numpy arrays.

Every primitive computes its forward result eagerly and, when a :class:`Tape`
is active and some input requires a gradient, appends a node holding a
hand-written backward rule.  There is no graph optimisation: the tape is a
plain list replayed in reverse.

Subgradient conventions: ``relu'(0) = 0`` and ties in a max are resolved in
favour of the lowest row index.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        desc = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class BackwardError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A numpy array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar for the handful of cases tests and layers use
    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    context: dict = field(default_factory=dict)


_ACTIVE: list["Tape"] = []


class Tape:
    """Records differentiable operations executed inside its ``with`` block."""

    def __init__(self, check_finite: bool = False):
        self.nodes: list[Node] = []
        self.check_finite = check_finite
        self._done = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self._done = False

    def backward(self, loss: Tensor) -> None:
        """Accumulate ``d loss / d t`` into ``t.grad`` for every recorded tensor."""
        if self._done:
            raise BackwardError("backward already ran on this tape; call reset() first")
        if loss.data.size != 1:
            raise BackwardError(f"loss must be a scalar, got shape {loss.shape}")
        if not self.nodes:
            raise BackwardError("tape is empty; nothing to differentiate")
        self._done = True
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            _accumulate(node.output, g)
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{node.op} backward", gi.shape, inp.shape)
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
                    owners[key] = inp
        for key, g in pending.items():
            _accumulate(owners[key], g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype)
    t.grad = g.copy() if t.grad is None else t.grad + g


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward, **context) -> Tensor:
    """Wrap ``out_data`` in a tensor and register ``backward`` if differentiation is live."""
    out = Tensor(out_data, dtype=out_data.dtype if isinstance(out_data, np.ndarray) else None)
    tape = active_tape()
    if tape is not None and tape.check_finite and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, tuple(inputs), out, backward, context))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return record("matmul", (a, b), A @ B, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting (e.g. a bias row)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return record("add", (a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    A, B = a.data, b.data

    def backward(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return record("mul", (a, b), out, backward)


def scale(x: Tensor, alpha: float) -> Tensor:
    x = as_tensor(x)
    alpha = float(alpha)
    return record("scale", (x,), x.data * np.asarray(alpha, dtype=x.dtype), lambda g: (g * alpha,))


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-column ``x * weight + bias`` with ``weight`` and ``bias`` of shape ``(C,)``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError("affine", x.shape, weight.shape, bias.shape)
    X, Wt = x.data, weight.data

    def backward(g):
        return g * Wt, (g * X).sum(axis=0), g.sum(axis=0)

    return record("affine", (x, weight, bias), X * Wt + bias.data, backward)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1 or any(t.ndim != 2 for t in tensors):
        raise ShapeError("concat_cols", *[t.shape for t in tensors])
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return record("concat_cols", tensors, np.concatenate([t.data for t in tensors], axis=1), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return record("tanh", (x,), y, lambda g: (g * (1 - y * y),))


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar."""
    x = as_tensor(x)
    shape = x.shape
    return record("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.data.size
    return record("mean", (x,), np.asarray(x.data.mean()), lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Frobenius inner product of two equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    A, B = a.data, b.data
    return record("dot", (a, b), np.asarray((A * B).sum()), lambda g: (g * B, g * A))


def max_over_rows(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Column-wise max over rows, returning ``(1 x C)`` values and argmax rows."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError("max_over_rows", x.shape)
    arg = np.argmax(x.data, axis=0)  # first occurrence on ties
    cols = np.arange(x.shape[1])
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[arg, cols] = g[0]
        return (out,)

    return record("max_over_rows", (x,), x.data[arg, cols][None, :], backward), arg


def segment_max(x: Tensor, offsets: np.ndarray) -> Tensor:
    """Column-wise max over contiguous row segments ``offsets[i]:offsets[i+1]``.

    Every segment must be non-empty.  Gradient goes to the lowest-index row
    attaining the max.
    """
    x = as_tensor(x)
    offsets = np.asarray(offsets, dtype=np.int64)
    starts = offsets[:-1]
    if np.any(np.diff(offsets) <= 0) or offsets[-1] != x.shape[0]:
        raise ValueError("segment_max needs non-empty segments covering every row")
    X = x.data
    seg_max = np.maximum.reduceat(X, starts, axis=0)
    seg_of_row = np.repeat(np.arange(len(starts)), np.diff(offsets))
    rows = np.arange(X.shape[0])[:, None]
    hit = np.where(X == seg_max[seg_of_row], rows, X.shape[0])
    arg = np.minimum.reduceat(hit, starts, axis=0)
    cols = np.arange(X.shape[1])[None, :]
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[arg, cols] = g
        return (out,)

    return record("segment_max", (x,), seg_max, backward)


def softmax_cross_entropy(logits: Tensor, labels, ignore_index: int = -1) -> Tensor:
    """Mean cross-entropy over rows whose label is not ``ignore_index``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    keep = labels != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ValueError("every point carries the ignore label; loss is undefined")
    K = logits.shape[1]
    if np.any((labels[keep] < 0) | (labels[keep] >= K)):
        raise ValueError(f"labels outside [0, {K})")
    Z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(Z).sum(axis=1, keepdims=True))
    logp = Z - logsum
    rows = np.flatnonzero(keep)
    loss = -logp[rows, labels[rows]].sum() / n

    def backward(g):
        p = np.exp(logp)
        p[rows, labels[rows]] -= 1
        p[~keep] = 0
        return (p * (g / n),)

    return record("softmax_cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), backward)


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalisation of an ``(n, C)`` activation over the vertex axis.

    Channels are split into ``groups`` contiguous groups; each group is
    standardised with statistics over all its ``n * C/groups`` entries, then the
    per-channel affine ``weight``/``bias`` is applied.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2:
        raise ShapeError("group_norm", x.shape)
    n, C = x.shape
    if groups < 1 or C % groups:
        raise ValueError(f"group_norm: {C} channels are not divisible into {groups} groups")
    if weight.shape != (C,) or bias.shape != (C,):
        raise ShapeError("group_norm", x.shape, weight.shape, bias.shape)
    cg = C // groups
    X = x.data.reshape(n, groups, cg)
    mu = X.mean(axis=(0, 2), keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=(0, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, C)
    Wt = weight.data
    out = xhat * Wt + bias.data
    count = n * cg

    def backward(g):
        gw = (g * xhat).sum(axis=0)
        gb = g.sum(axis=0)
        gx_hat = (g * Wt).reshape(n, groups, cg)
        xh = xhat.reshape(n, groups, cg)
        m1 = gx_hat.sum(axis=(0, 2), keepdims=True) / count
        m2 = (gx_hat * xh).sum(axis=(0, 2), keepdims=True) / count
        gx = inv * (gx_hat - m1 - xh * m2)
        return gx.reshape(n, C), gw, gb

    return record("group_norm", (x, weight, bias), out.astype(x.dtype), backward)

"""Reverse-mode automatic differentiation on float64 numpy arrays.

Define-by-run: while a :class:`Tape` is active, every operation on
:class:`Tensor` values appends a backward closure to it, and
``Tape.backward`` replays the closures in reverse execution order
(execution order is already topological). The graph is rebuilt from
scratch on every optimization step; nothing here is retained across
steps.

Gradients w.r.t. the sample positions of :func:`bilinear_sample` are not
implemented because positions are always data in this codebase.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from flowsfm.diffcore import kernels

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "constant",
    "as_tensor",
    "exp",
    "log",
    "sqrt",
    "softplus",
    "sigmoid",
    "sin",
    "cos",
    "relu",
    "matmul",
    "concat",
    "where",
    "broadcast_to",
    "take",
    "take_cols",
    "take2",
    "narrow",
    "slice_last",
    "bilinear_sample",
]


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


_ACTIVE_TAPES: list["Tape"] = []


def _tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tensor:
    """Array value in the autodiff graph. Data is always float64."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return _add(self, as_tensor(other))

    def __radd__(self, other):
        return _add(as_tensor(other), self)

    def __sub__(self, other):
        return _sub(self, as_tensor(other))

    def __rsub__(self, other):
        return _sub(as_tensor(other), self)

    def __mul__(self, other):
        return _mul(self, as_tensor(other))

    def __rmul__(self, other):
        return _mul(as_tensor(other), self)

    def __truediv__(self, other):
        return _div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return _div(as_tensor(other), self)

    def __neg__(self):
        return _neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __pow__(self, p):
        return _powc(self, float(p))

    def sum(self, axis=None, keepdims: bool = False):
        return _reduce(self, np.sum, axis, keepdims, mean=False)

    def mean(self, axis=None, keepdims: bool = False):
        return _reduce(self, np.mean, axis, keepdims, mean=True)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return _transpose(self, tuple(axes))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Wrap data that never receives a gradient."""
    return Tensor(x)


class Tape:
    """Ordered record of operations plus the registered leaves."""

    def __init__(self):
        self._records: list = []
        self.leaves: list[Tensor] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self
        return False

    def leaf(self, data) -> Tensor:
        """Register a differentiable input; backward() reports it even if unused."""
        t = Tensor(data, requires_grad=True)
        self.leaves.append(t)
        return t

    def _record(self, fn):
        self._records.append(fn)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every registered leaf.

        ``loss`` must be scalar. Unreached leaves map to zeros.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._records):
            fn()
        return {leaf: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
                for leaf in self.leaves}


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.data.shape} with {b.data.shape}") from None


def _emit(out_data, inputs: Iterable[Tensor], backward) -> Tensor:
    """Create the output tensor and, when a tape is live, record ``backward``.

    ``backward`` is invoked with the output tensor's accumulated gradient.
    """
    tape = _tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        def record():
            if out.grad is not None:
                backward(out.grad)
        tape._record(record)
    return out


# -- elementwise ----------------------------------------------------------


def _add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _emit(a.data + b.data, (a, b), back)


def _sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _emit(a.data - b.data, (a, b), back)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _emit(a.data * b.data, (a, b), back)


def _div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)

    def back(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _emit(a.data / b.data, (a, b), back)


def _neg(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, -g)

    return _emit(-a.data, (a,), back)


def _powc(a: Tensor, p: float) -> Tensor:
    def back(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _emit(a.data ** p, (a,), back)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def back(g):
        _accumulate(a, g * out_data)

    return _emit(out_data, (a,), back)


def log(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, g / a.data)

    return _emit(np.log(a.data), (a,), back)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def back(g):
        _accumulate(a, g * 0.5 / out_data)

    return _emit(out_data, (a,), back)


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) = max(x, 0) + log1p(e^-|x|), stable for large |x|
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def back(g):
        _accumulate(a, g * _sigmoid_data(a.data))

    return _emit(out_data, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid_data(a.data)

    def back(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _emit(out_data, (a,), back)


def sin(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, g * np.cos(a.data))

    return _emit(np.sin(a.data), (a,), back)


def cos(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, -g * np.sin(a.data))

    return _emit(np.cos(a.data), (a,), back)


def relu(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, g * (a.data > 0.0))

    return _emit(np.maximum(a.data, 0.0), (a,), back)


# -- reductions and shape ops ---------------------------------------------


def _reduce(a: Tensor, fn, axis, keepdims: bool, mean: bool) -> Tensor:
    out_data = fn(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else int(np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)]))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        g = np.broadcast_to(g, a.data.shape)
        _accumulate(a, g / count if mean else g.copy())

    return _emit(out_data, (a,), back)


def _reshape(a: Tensor, shape: tuple) -> Tensor:
    def back(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _emit(a.data.reshape(shape), (a,), back)


def _transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))

    def back(g):
        _accumulate(a, g.transpose(inv))

    return _emit(a.data.transpose(axes), (a,), back)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    try:
        out_data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.data.shape} to {shape}") from None

    def back(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))

    return _emit(out_data.copy(), (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select with a constant boolean mask."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def back(g):
        _accumulate(a, _unbroadcast(np.where(mask, g, 0.0), a.data.shape))
        _accumulate(b, _unbroadcast(np.where(mask, 0.0, g), b.data.shape))

    return _emit(np.where(mask, a.data, b.data), (a, b), back)


# -- gathers ---------------------------------------------------------------


def take(a: Tensor, idx, unique: bool = False) -> Tensor:
    """Gather along axis 0 with constant integer indices."""
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        buf = np.zeros_like(a.data)
        if unique:
            buf[idx] = g
        else:
            np.add.at(buf, idx, g)
        _accumulate(a, buf)

    return _emit(a.data[idx], (a,), back)


def take_cols(a: Tensor, idx, unique: bool = True) -> Tensor:
    """Gather columns of a 2-D tensor with a constant 1-D index vector."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"take_cols: need 2-D tensor and 1-D idx, got {a.data.shape}, {idx.shape}")

    def back(g):
        buf = np.zeros_like(a.data)
        if unique:
            buf[:, idx] = g
        else:
            np.add.at(buf, (slice(None), idx), g)
        _accumulate(a, buf)

    return _emit(a.data[:, idx], (a,), back)


def take2(a: Tensor, rows, cols) -> Tensor:
    """Paired (row, col) gather from a 2-D tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"take2: need 2-D tensor, got {a.data.shape}")

    def back(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (rows, cols), g)
        _accumulate(a, buf)

    return _emit(a.data[rows, cols], (a,), back)


def narrow(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous axis-0 slice."""

    def back(g):
        buf = np.zeros_like(a.data)
        buf[start:stop] = g
        _accumulate(a, buf)

    return _emit(a.data[start:stop].copy(), (a,), back)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the last axis."""

    def back(g):
        buf = np.zeros_like(a.data)
        buf[..., start:stop] = g
        _accumulate(a, buf)

    return _emit(a.data[..., start:stop].copy(), (a,), back)


# -- matmul ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {a.data.shape}, {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {a.data.shape} @ {b.data.shape}")
    try:
        np.broadcast_shapes(a.data.shape[:-2], b.data.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims disagree, {a.data.shape} @ {b.data.shape}") from None

    def back(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _emit(a.data @ b.data, (a, b), back)


# -- bilinear sampling ------------------------------------------------------


def bilinear_sample(grid: Tensor, x: np.ndarray, y: np.ndarray) -> Tensor:
    """Sample (B, H, W) ``grid`` at constant positions ``x``/``y`` (B, N).

    Positions are in index units (x along width, y along height) and are
    clamped to the border. A 2-D grid with 1-D positions is promoted to a
    batch of one.
    """
    squeeze = grid.data.ndim == 2
    gdata = grid.data[None] if squeeze else grid.data
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if squeeze:
        x, y = x[None], y[None]
    if gdata.ndim != 3 or x.shape != y.shape or x.ndim != 2 or x.shape[0] != gdata.shape[0]:
        raise ShapeError(
            f"bilinear_sample: grid {grid.data.shape} with positions {x.shape}/{y.shape}")
    _, h, w = gdata.shape
    out_data = kernels.bilinear_gather(gdata, x, y)
    if squeeze:
        out_data = out_data[0]

    def back(g):
        g2 = g[None] if squeeze else g
        gg = kernels.bilinear_scatter(np.ascontiguousarray(g2), x, y, h, w)
        _accumulate(grid, gg[0] if squeeze else gg)

    return _emit(out_data, (grid,), back)

"""Reverse-mode automatic differentiation on dense float64 arrays.

A ``Tensor`` wraps a numpy array and records the operation that produced it,
so that ``backward()`` on a scalar output accumulates exact gradients into
every upstream tensor that requires them.  The op set is deliberately small:
it is exactly what the dense networks, coupling flows and Sobel-filter
residuals in this package need, nothing more.

Every op dispatches on its input type, so the same network code runs either
on the tape (``Tensor`` inputs, gradients available) or as plain numpy
(``ndarray`` inputs, no tape overhead) for sampling and MCMC hot loops.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf values."""


def _as_array(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape of a broadcast operand."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Node of the reverse-mode tape; holds float64 data and (later) a gradient."""

    __slots__ = ("data", "grad", "op", "name", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 op: str = "leaf", parents: tuple = (),
                 backward: Callable[[np.ndarray], None] | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.op = op
        self.name = name
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def leaf(data, name: str = "") -> "Tensor":
        t = Tensor(data, requires_grad=True, name=name)
        _check_finite(t.data, f"leaf '{name}'")
        return t

    @staticmethod
    def constant(data) -> "Tensor":
        return Tensor(data, requires_grad=False, op="const")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    # -- backprop -------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into all upstream tensors."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis: int | None = None):
        return sum_(self, axis)

    def mean(self, axis: int | None = None):
        return mean_(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor.constant(x)


def _is_tape(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _node(data: np.ndarray, op: str, parents: Iterable[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    _check_finite(data, op)
    parents = tuple(p for p in parents if p.requires_grad)
    if not parents:
        return Tensor(data, requires_grad=False, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)


# -- elementwise binary ops ------------------------------------------------------


def add(a, b):
    if not _is_tape(a, b):
        return np.asarray(a) + np.asarray(b)
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(data, "add", (a, b), backward)


def sub(a, b):
    if not _is_tape(a, b):
        return np.asarray(a) - np.asarray(b)
    return add(a, mul(b, -1.0))


def mul(a, b):
    if not _is_tape(a, b):
        return np.asarray(a) * np.asarray(b)
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, "mul", (a, b), backward)


def div(a, b):
    if not _is_tape(a, b):
        return np.asarray(a) / np.asarray(b)
    a, b = _coerce(a), _coerce(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, "div", (a, b), backward)


def matmul(a, b):
    if not _is_tape(a, b):
        return np.asarray(a) @ np.asarray(b)
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(data, "matmul", (a, b), backward)


# -- reductions -------------------------------------------------------------------


def sum_(a, axis: int | None = None):
    if not _is_tape(a):
        return np.sum(a, axis=axis)
    a = _coerce(a)
    data = np.sum(a.data, axis=axis)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _node(np.asarray(data), "sum", (a,), backward)


def mean_(a, axis: int | None = None):
    if not _is_tape(a):
        return np.mean(a, axis=axis)
    a = _coerce(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


# -- elementwise unary ops ----------------------------------------------------------


def exp(a):
    if not _is_tape(a):
        return np.exp(a)
    a = _coerce(a)
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _node(data, "exp", (a,), backward)


def log(a):
    if not _is_tape(a):
        return np.log(a)
    a = _coerce(a)
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _node(data, "log", (a,), backward)


def tanh(a):
    if not _is_tape(a):
        return np.tanh(a)
    a = _coerce(a)
    data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - data * data))

    return _node(data, "tanh", (a,), backward)


def relu(a):
    if not _is_tape(a):
        return np.maximum(a, 0.0)
    a = _coerce(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0.0))

    return _node(data, "relu", (a,), backward)


def softplus(a):
    if not _is_tape(a):
        return np.logaddexp(0.0, a)
    a = _coerce(a)
    data = np.logaddexp(0.0, a.data)

    def backward(g):
        a._accumulate(g * expit(a.data))

    return _node(data, "softplus", (a,), backward)


def square(a):
    return mul(a, a) if _is_tape(a) else np.square(a)


def clip(a, lo: float, hi: float):
    """Hard clamp; gradient is passed through inside [lo, hi] and zero outside."""
    if not _is_tape(a):
        return np.clip(a, lo, hi)
    a = _coerce(a)
    data = np.clip(a.data, lo, hi)

    def backward(g):
        a._accumulate(g * ((a.data >= lo) & (a.data <= hi)))

    return _node(data, "clip", (a,), backward)


# -- structural ops ---------------------------------------------------------------


def reshape(a, shape):
    if not _is_tape(a):
        return np.reshape(a, shape)
    a = _coerce(a)
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _node(data, "reshape", (a,), backward)


def slice_(a, key):
    """Basic (slice/int/ellipsis) indexing; no fancy indexing on the tape."""
    if not _is_tape(a):
        return np.asarray(a)[key]
    a = _coerce(a)
    data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] += g
        a._accumulate(full)

    return _node(np.asarray(data), "slice", (a,), backward)


def take_cols(a, idx):
    """Gather columns of a 2-D (or entries of a 1-D) array along the last axis."""
    idx = np.asarray(idx, dtype=np.intp)
    if not _is_tape(a):
        return np.asarray(a)[..., idx]
    a = _coerce(a)
    data = a.data[..., idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (..., idx), g)
        a._accumulate(full)

    return _node(data, "take_cols", (a,), backward)


def concat(parts: Sequence, axis: int = -1):
    if not _is_tape(*parts):
        return np.concatenate([np.asarray(p) for p in parts], axis=axis)
    parts = [_coerce(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _node(data, "concat", tuple(parts), backward)


# -- fixed-kernel 2-D convolution ----------------------------------------------------


def fixed_conv2d(field, kernel) -> "Tensor | np.ndarray":
    """Cross-correlate an H-by-W field (or a batch of them) with a fixed 3x3 kernel.

    Replicate (edge-clamp) padding keeps the output the same shape as the
    input.  The kernel is a constant: gradients flow only into the field.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape != (3, 3):
        raise ShapeError(f"fixed_conv2d: kernel must be 3x3, got {kernel.shape}")
    arr = field.data if isinstance(field, Tensor) else np.asarray(field, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ShapeError(f"fixed_conv2d: field must be 2-D or batched 3-D, got ndim={arr.ndim}")
    h, w = arr.shape[-2], arr.shape[-1]
    if h < 3 or w < 3:
        raise ShapeError(f"fixed_conv2d: field {h}x{w} smaller than the 3x3 kernel")

    pad = [(0, 0)] * (arr.ndim - 2) + [(1, 1), (1, 1)]

    def forward(x):
        xp = np.pad(x, pad, mode="edge")
        out = np.zeros_like(x)
        for a in range(3):
            for b in range(3):
                out += kernel[a, b] * xp[..., a:a + h, b:b + w]
        return out

    if not isinstance(field, Tensor):
        return forward(arr)

    data = forward(arr)
    t = field

    def backward(g):
        gp = np.zeros(g.shape[:-2] + (h + 2, w + 2))
        for a in range(3):
            for b in range(3):
                gp[..., a:a + h, b:b + w] += kernel[a, b] * g
        # fold gradient on replicated padding back onto the edges
        gx = gp[..., 1:h + 1, 1:w + 1].copy()
        gx[..., 0, :] += gp[..., 0, 1:w + 1]
        gx[..., -1, :] += gp[..., h + 1, 1:w + 1]
        gx[..., :, 0] += gp[..., 1:h + 1, 0]
        gx[..., :, -1] += gp[..., 1:h + 1, w + 1]
        gx[..., 0, 0] += gp[..., 0, 0]
        gx[..., 0, -1] += gp[..., 0, w + 1]
        gx[..., -1, 0] += gp[..., h + 1, 0]
        gx[..., -1, -1] += gp[..., h + 1, w + 1]
        t._accumulate(gx)

    return _node(data, "fixed_conv2d", (t,), backward)


# -- driving programs -----------------------------------------------------------------


def evaluate_with_gradients(program: Callable, params: Mapping[str, np.ndarray],
                            inputs=None) -> tuple[float, dict[str, np.ndarray]]:
    """Run ``program(leaves, inputs)`` to a scalar and return (value, gradients).

    ``params`` is any name-to-array mapping (a ParamStore works); each entry
    becomes a leaf tensor.  Gradients are exact reverse-mode derivatives of the
    scalar output with respect to every entry; parameters the program never
    touches get zero gradients.
    """
    leaves = {name: Tensor.leaf(arr, name=name) for name, arr in params.items()}
    out = program(leaves, inputs)
    if not isinstance(out, Tensor):
        out = Tensor.constant(out)
    if out.data.size != 1:
        raise ShapeError(f"program must return a scalar, got shape {out.data.shape}")
    value = float(out.data.reshape(()))
    if out.requires_grad:
        out.backward()
    grads = {}
    for name, leaf in leaves.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        _check_finite(grads[name], f"gradient of '{name}'")
    return value, grads

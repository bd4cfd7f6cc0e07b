"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the operations the moment-retrieval model and its losses need are
provided. Leading batch dimensions are supported wherever the model uses
them (batched matmul, bias broadcasting, per-row reductions).
"""
from __future__ import annotations

import builtins
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "DegenerateInputError", "NumericInstabilityError",
    "no_grad", "grad_enabled", "as_tensor", "add", "sub", "mul", "div", "neg",
    "matmul", "transpose", "swap_last", "reshape", "concat", "take",
    "broadcast_to", "sum", "mean", "relu", "sigmoid", "exp", "log", "softplus",
    "abs", "maximum", "minimum", "softmax_rows", "layer_norm", "cosine_sim",
    "finite_diff_check",
]


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class NumericInstabilityError(ArithmeticError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_ufunc__ = None  # make ndarray defer to the reflected operators below

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Populate ``.grad`` on every node reachable from this scalar."""
        if self.data.size != 1:
            _raise_not_scalar(self.shape)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # intermediate grads from an earlier backward must not leak in
        for node in order:
            if node._backward is not None:
                node.grad = None
        self.grad = np.ones_like(self.data) if self.grad is None else self.grad + 1.0
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar(shape):
    raise ShapeError(f"expected a scalar tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _acc(a, g)
        _acc(b, g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _acc(a, g)
        _acc(b, -g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        _acc(a, g / b.data)
        _acc(b, -g * out / b.data)

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: _acc(a, -g))


# linear algebra and shape manipulation

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 2-D right operand is shared across every leading batch entry of the
    left operand, which is how weight matrices are applied.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            if b.ndim == 2:
                _acc(a, g @ b.data.T)
            else:
                _acc(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2:
                k, p = b.shape
                _acc(b, a.data.reshape(-1, k).T @ g.reshape(-1, p))
            else:
                _acc(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(out, (a, b), backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: _acc(a, np.transpose(g, inverse)))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: _acc(a, np.swapaxes(g, -1, -2)))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: _acc(a, g.reshape(orig)))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _acc(t, g[tuple(idx)])

    return _make(out, ts, backward)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather entries along ``axis`` with a 1-D index; repeats accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        _acc(a, full)

    return _make(out, (a,), backward)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, tuple(shape)).copy(), (a,), lambda g: _acc(a, g))


# reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape))

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# nonlinearities

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: _acc(a, g * mask))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (a,), lambda g: _acc(a, g * out * (1.0 - out)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: _acc(a, g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: _acc(a, g / a.data))


def softplus(a) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ez = np.exp(x[~pos])
        s[~pos] = ez / (1.0 + ez)
        _acc(a, g * s)

    return _make(out, (a,), backward)


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: _acc(a, g * np.sign(a.data)))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data

    def backward(g):
        _acc(a, g * pick_a)
        _acc(b, g * ~pick_a)

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def backward(g):
        _acc(a, g * pick_a)
        _acc(b, g * ~pick_a)

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward)


# fused row operations

def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _acc(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    c = x.shape[-1]
    if c == 0:
        raise ShapeError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        _acc(gain, g * xhat)
        _acc(bias, g)
        if x.requires_grad:
            gx = g * gain.data
            _acc(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                           - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(out, (x, gain, bias), backward)


def cosine_sim(a, b, min_norm: float = 1e-12) -> Tensor:
    """Cosine similarity along the last axis (operands broadcast).

    Raises DegenerateInputError when any vector has norm below ``min_norm``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_sim dimension mismatch: {a.shape} vs {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=-1, keepdims=True))
    if (na < min_norm).any() or (nb < min_norm).any():
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    ua, ub = a.data / na, b.data / nb
    out = (ua * ub).sum(axis=-1)

    def backward(g):
        ge = np.expand_dims(g, -1)
        cos = np.expand_dims(out, -1)
        _acc(a, ge * (ub - cos * ua) / na)
        _acc(b, ge * (ua - cos * ub) / nb)

    return _make(out, (a, b), backward)


def finite_diff_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max coordinatewise relative error between backward and central differences.

    The error for one coordinate is |analytic - numeric| / max(1e-8, |numeric|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    y = f(x)
    if not np.all(np.isfinite(y.data)):
        raise NumericInstabilityError("non-finite value at the evaluation point")
    y.backward()
    analytic = np.zeros_like(base) if x.grad is None else x.grad
    flat = base.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(Tensor(base)).data
            flat[i] = orig - step
            lo = f(Tensor(base)).data
            flat[i] = orig
            if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
                raise NumericInstabilityError(f"non-finite value perturbing coordinate {i}")
            numeric = float((hi - lo).reshape(-1)[0]) / (2.0 * step)
            err = builtins.abs(analytic.reshape(-1)[i] - numeric) / max(1e-8, builtins.abs(numeric))
            worst = max(worst, err)
    return worst



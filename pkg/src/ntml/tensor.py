"""A small dense tensor with tape-style reverse-mode autodiff.

Everything is float64 and row-major (numpy's C order).  Each operation that
touches a tensor with ``requires_grad`` records its parents and a closure
mapping the output gradient to parent gradients; :func:`backward` walks that
record in reverse topological order.

Only the operations needed by the model zoo and the losses are provided.
Broadcasting follows numpy and is undone in the backward pass by summing.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording a computation graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division is only supported by a constant")
        return mul(self, 1.0 / other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite value in {what}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of a non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), fn, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D product ``a @ b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if span < 0:
        raise DimensionError(f"kernel {k} larger than padded input {size + 2 * pad}")
    if span % stride:
        raise DimensionError(f"non-integral output size ({size}+2*{pad}-{k})/{stride}+1")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (F,C,kh,kw), zero padded."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d needs 4-D input and kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(f"channel mismatch: input {c}, kernel {cw}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    w2 = w.data.reshape(f, c * kh * kw)
    out = np.matmul(w2, cols).reshape(n, f, ho, wo)

    def fn(g):
        g2 = g.reshape(n, f, ho * wo)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, ho, wo)
        dxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        return dx, dw

    return _result(out, (x, w), fn, "conv2d")


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last two axes of an (N,C,H,W) tensor."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"spatial size {h}x{w} not divisible by pool {size}")
    ho, wo = h // size, w // size
    win = (x.data.reshape(n, c, ho, size, wo, size)
           .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def fn(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (gw.reshape(n, c, ho, wo, size, size)
              .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))
        return (gx,)

    return _result(out, (x,), fn, "maxpool2d")


# ---------------------------------------------------------------- softmax family

def softmax_temp(z: Tensor, T: float = 1.0) -> Tensor:
    """Softmax of ``z / T`` along the last axis, max-subtracted."""
    if not T > 0:
        raise UsageError(f"temperature must be positive, got {T}")
    _check_finite(z.data, "softmax input")
    s = z.data / T
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)) / T,)

    return _result(p, (z,), fn, "softmax")


def log_softmax(z: Tensor, T: float = 1.0) -> Tensor:
    """``log(softmax_temp(z, T))`` computed without forming the softmax first."""
    if not T > 0:
        raise UsageError(f"temperature must be positive, got {T}")
    _check_finite(z.data, "log_softmax input")
    s = z.data / T
    s = s - s.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(s).sum(axis=-1, keepdims=True))
    y = s - lse

    def fn(g):
        p = np.exp(y)
        return ((g - p * g.sum(axis=-1, keepdims=True)) / T,)

    return _result(y, (z,), fn, "log_softmax")


def pick(x: Tensor, index) -> Tensor:
    """Select ``x[..., index]`` along the last axis, one index per row."""
    idx = np.asarray(index)
    if x.ndim == 1:
        if idx.ndim != 0:
            raise DimensionError("a 1-D tensor takes a scalar index")
        k = int(idx)
        out = x.data[k]

        def fn1(g):
            gx = np.zeros(x.shape)
            gx[k] = g
            return (gx,)

        return _result(np.asarray(out), (x,), fn1, "pick")
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise DimensionError(f"pick needs (N,K) with N indices, got {x.shape} and {idx.shape}")
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def fn2(g):
        gx = np.zeros(x.shape)
        gx[rows, idx] = g
        return (gx,)

    return _result(out, (x,), fn2, "pick")


def drop_column(x: Tensor, index) -> Tensor:
    """Remove entry ``index`` from the last axis, one index per row.

    (K,) -> (K-1,) or (N,K) -> (N,K-1); the remaining order is preserved.
    """
    squeeze = x.ndim == 1
    data = x.data[None, :] if squeeze else x.data
    if data.ndim != 2:
        raise DimensionError(f"drop_column needs a 1-D or 2-D tensor, got {x.shape}")
    n, k = data.shape
    idx = np.broadcast_to(np.asarray(index), (n,))
    mask = np.ones((n, k), dtype=bool)
    mask[np.arange(n), idx] = False
    out = data[mask].reshape(n, k - 1)
    if squeeze:
        out = out[0]

    def fn(g):
        gx = np.zeros((n, k))
        gx[mask] = g.reshape(-1)
        return (gx[0] if squeeze else gx,)

    return _result(out, (x,), fn, "drop_column")


# ---------------------------------------------------------------- reverse pass

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every graph node reachable from the scalar ``loss``.

    Gradients are overwritten, not accumulated across calls.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {loss.shape}")
    loss.grad = np.ones(loss.shape)
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): loss.grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Largest relative error between backprop and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1e-8, |numeric|)``.
    ``params`` are perturbed in place and restored.
    """
    if isinstance(params, Tensor):
        params = [params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    loss = f(params)
    _check_finite(loss.data, "loss")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        _check_finite(analytic, "analytic gradient")
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(params).item()
            flat[i] = orig - eps
            down = f(params).item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("non-finite loss during finite differencing")
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst

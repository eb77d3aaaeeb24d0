"""Minimal reverse-mode autodiff over numpy arrays.

Every op builds a ``Node`` holding its parents and a closure mapping the output
gradient to one gradient per parent. ``backward`` orders the recorded nodes
topologically into a ``Tape`` and visits each exactly once in reverse.

Storage is float32 unless a float64 array is passed in explicitly (gradient
checks run in float64). Reductions accumulate in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _as_float(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_float(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar; all route through the functional ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _record(out_data: np.ndarray, op: str, parents: tuple, fn) -> Tensor:
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, fn)
    return out


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ; use expand() explicitly")


# ---------------------------------------------------------------- tape

@dataclass
class Tape:
    """Topologically ordered record of the nodes reachable from an output."""

    records: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in reversed(t.node.parents):
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def backward(self, out: Tensor) -> None:
        grads = {id(out): np.ones_like(out.data)}
        for t in reversed(self.records):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g.astype(t.data.dtype, copy=False)
                continue
            for p, pg in zip(t.node.parents, t.node.backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.from_output(loss).backward(loss)


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if b.ndim == 0 and a.ndim > 0 and not b.requires_grad:
        return _record(a.data + b.data.astype(a.dtype), "add_scalar", (a,), lambda g: (g,))
    _same_shape("add", a, b)
    return _record(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    return add(a, neg(_lift(b)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if b.ndim == 0 and a.ndim > 0 and not b.requires_grad:
        s = b.data.astype(a.dtype)
        return _record(a.data * s, "mul_scalar", (a,), lambda g: (g * s,))
    _same_shape("mul", a, b)
    return _record(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if b.ndim == 0 and a.ndim > 0 and not b.requires_grad:
        return mul(a, 1.0 / b.data)
    _same_shape("div", a, b)
    out = a.data / b.data
    return _record(out, "div", (a, b), lambda g: (g / b.data, -g * out / b.data))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0).astype(a.dtype), "relu", (a,), lambda g: (g * mask,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data > lo
    out = np.where(mask, a.data, lo).astype(a.dtype)
    return _record(out, "clamp_min", (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _record(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def power(a: Tensor, exponent) -> Tensor:
    """a ** exponent; exponent is a python number or a scalar Tensor."""
    if isinstance(exponent, Tensor):
        if exponent.size != 1:
            raise ShapeError(f"power: exponent must be scalar, got shape {exponent.shape}")
        e = exponent.data.reshape(())
        if np.any(a.data <= 0):
            raise DomainError("power with a tensor exponent needs a strictly positive base")
        out = np.power(a.data, e.astype(a.dtype))
        logs = np.log(a.data)

        def _bw(g):
            ga = g * e * np.power(a.data, e - 1)
            ge = np.sum(g * out * logs, dtype=np.float64)
            return ga.astype(a.dtype), np.asarray(ge, dtype=exponent.dtype).reshape(exponent.shape)

        return _record(out, "power", (a, exponent), _bw)
    e = float(exponent)
    if not e.is_integer() and np.any(a.data < 0):
        raise DomainError(f"power: negative base with fractional exponent {e}")
    if not e.is_integer() and e < 1 and np.any(a.data == 0):
        raise DomainError(f"power: zero base with exponent {e} has no finite gradient")
    out = np.power(a.data, a.dtype.type(e))
    return _record(out, "power", (a,), lambda g: (g * e * np.power(a.data, a.dtype.type(e - 1)),))


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_back(g: np.ndarray, axes: tuple, keepdims: bool, shape: tuple) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    return _record(out, "sum", (a,), lambda g: (_expand_back(g, axes, keepdims, a.shape).copy(),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = np.mean(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    return _record(out, "mean", (a,), lambda g: (_expand_back(g, axes, keepdims, a.shape) / count,))


def l2_norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    sq = np.sum(np.square(a.data, dtype=np.float64), axis=axes, keepdims=True)
    norm = np.sqrt(sq)
    out = norm if keepdims else np.squeeze(norm, axis=axes)

    def _bw(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(norm > 0, gk / norm, 0.0)
        return ((a.data * scale).astype(a.dtype),)

    return _record(out.astype(a.dtype), "l2_norm", (a,), _bw)


def normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / max(||x||, eps) along ``axis``; finite gradient at zero."""
    n = np.sqrt(np.sum(np.square(a.data, dtype=np.float64), axis=axis, keepdims=True))
    d = np.maximum(n, eps)
    y = (a.data / d).astype(a.dtype)

    def _bw(g):
        dot = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64)
        gx = np.where(n > eps, (g - y * dot) / d, g / d)
        return (gx.astype(a.dtype),)

    return _record(y, "normalize", (a,), _bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def _bw(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(y, "softmax", (a,), _bw)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _record(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor, start: int = 0) -> Tensor:
    return reshape(a, a.shape[:start] + (-1,))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose2d expects 2 axes, got {a.shape}")
    return transpose(a, (1, 0))


def swap_last(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast to ``shape``; gradient sums over the broadcast axes."""
    shape = tuple(shape)
    if a.ndim != len(shape):
        raise ShapeError(f"expand: rank {a.ndim} vs target {shape}; reshape first")
    for s, t in zip(a.shape, shape):
        if s != t and s != 1:
            raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    out = np.broadcast_to(a.data, shape)
    return _record(out, "expand", (a,), lambda g: (np.sum(g, axis=axes, keepdims=True, dtype=np.float64).astype(a.dtype),))


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    index = np.asarray(index, dtype=np.intp)

    def _bw(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (ga,)

    return _record(np.take(a.data, index, axis=axis), "take", (a,), _bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m,k)@(k,n), (B,m,k)@(B,k,n) or (B,m,k)@(k,n) with a shared right operand."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim == 3 and (a.ndim != 3 or a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: batch extents differ, {a.shape} @ {b.shape}")
    if a.ndim > 3 or b.ndim > 3:
        raise ShapeError("matmul supports at most one batch axis")
    out = np.matmul(a.data, b.data)

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim == 3:
            gb = np.einsum("bmk,bmn->kn", a.data, g)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _record(out, "matmul", (a, b), _bw)


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Ho, Wo, k, k) strided view
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x (C,H,W) or (N,C,H,W) with weight (Co,Ci,k,k)."""
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected input rank 3/4 and weight rank 4, got {x.shape} and {weight.shape}")
    n, ci, h, w = x.shape
    co, wci, k, k2 = weight.shape
    if wci != ci:
        raise ShapeError(f"conv2d: input has {ci} channels but weight expects {wci}")
    if k != k2:
        raise ShapeError(f"conv2d: only square kernels, got {k}x{k2}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {co} filters")
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _windows(xp, k, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * k * k)
    wmat = weight.data.reshape(co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)

    def _bw(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (gflat.T @ cols).reshape(weight.shape)
        gb = None if bias is None else np.sum(gflat, axis=0, dtype=np.float64).astype(bias.dtype)
        gcols = (gflat @ wmat).reshape(n, ho, wo, ci, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    y = _record(np.ascontiguousarray(out), "conv2d", parents, _bw)
    return reshape(y, y.shape[1:]) if unbatched else y


# ---------------------------------------------------------------- gradient checking

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, eps: float = 1e-3) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` must be pure and map a Tensor to a scalar Tensor. Runs in float64.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(base.copy())).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0

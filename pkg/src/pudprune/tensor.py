"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor that requires a gradient gets a node id from a global,
strictly increasing counter, so a node's inputs always carry smaller ids
than the node itself. ``backward`` walks the reachable nodes in
descending id order, which is a valid reverse topological order.

Broadcasting is deliberately absent except for Python scalars. Ops that
need a per-row or per-channel operand (bias add, normalization) are
provided as dedicated fused ops.
"""

from __future__ import annotations

import copy
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, DomainError, ShapeError, SizeError

_node_ids = itertools.count()

Scalar = (int, float, np.floating, np.integer)


class Tensor:
    """Immutable-by-convention n-d array of float64 plus its tape node."""

    __slots__ = ("data", "requires_grad", "node", "kind", "_parents", "_backward", "_replay")

    def __init__(self, data, requires_grad: bool = False, *, kind: str = "leaf",
                 _parents: tuple = (), _backward: Callable | None = None,
                 _replay: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node = next(_node_ids) if self.requires_grad else None
        self.kind = kind
        self._parents = _parents
        self._backward = _backward
        self._replay = _replay

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # Copies get a fresh node id: gradients are keyed by id, so a copy that
    # kept its original's id would collide with it (or, after unpickling in
    # another process, with unrelated new tensors).
    def __deepcopy__(self, memo):
        new = Tensor.__new__(Tensor)
        memo[id(self)] = new
        new.data = self.data.copy()
        new.requires_grad = self.requires_grad
        new.kind = self.kind
        new._parents = copy.deepcopy(self._parents, memo)
        new._backward = self._backward
        new._replay = self._replay
        new.node = next(_node_ids) if self.requires_grad else None
        return new

    def __reduce__(self):
        if self._parents:
            raise TypeError("only leaf tensors can be pickled")
        return (Tensor, (self.data, self.requires_grad), {"kind": self.kind})

    def __setstate__(self, state):
        self.kind = state["kind"]

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad}, kind={self.kind})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Scalar):
            raise SizeError("division is only defined by a scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None):
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None):
        return reduce_mean(self, axis)

    def max(self, axis: int | None = None):
        return reduce_max(self, axis)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def abs(self):
        return absolute(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def create(shape: Sequence[int], data, requires_grad: bool = False) -> Tensor:
    """Build a tensor from a flat row-major sequence of values."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise SizeError(f"shape entries must be positive, got {shape}")
    flat = np.asarray(data, dtype=np.float64).reshape(-1)
    if flat.size != math.prod(shape):
        raise SizeError(f"shape {shape} needs {math.prod(shape)} values, got {flat.size}")
    if not np.all(np.isfinite(flat)):
        raise DataError("tensor data contains NaN or Inf")
    return Tensor(flat.reshape(shape).copy(), requires_grad)


def tensor(array, requires_grad: bool = False) -> Tensor:
    """Wrap an existing array (copied) as a tensor."""
    arr = np.array(array, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError("tensor data contains NaN or Inf")
    return Tensor(arr, requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(out: np.ndarray, parents: tuple, backward: Callable, kind: str,
          replay: Callable) -> Tensor:
    if not any(p.requires_grad for p in parents):
        return Tensor(out, kind=kind)
    return Tensor(out, True, kind=kind, _parents=parents, _backward=backward, _replay=replay)


# ----------------------------------------------------------------------------
# elementwise

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise SizeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, Scalar):
        c = float(b)
        return _node(a.data + c, (a,), lambda g: (g,), "add", lambda x: x + c)
    _check_same(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add", lambda x, y: x + y)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, Scalar):
        return add(a, -float(b))
    _check_same(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub", lambda x, y: x - y)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, Scalar):
        return scale(a, float(b))
    _check_same(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul",
                 lambda x, y: x * y)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale", lambda x: x * c)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg", lambda x: -x)


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    return _node(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), "relu",
                 lambda x: np.maximum(x, 0.0))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a nonpositive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log", np.log)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp", np.exp)


def absolute(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs", np.abs)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid", _sigmoid)


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -(np.maximum(-x, 0.0) + np.log1p(np.exp(-np.abs(x))))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(a)) without overflow for large |a|."""
    return _node(_log_sigmoid(a.data), (a,), lambda g: (g * _sigmoid(-a.data),), "log_sigmoid",
                 _log_sigmoid)


# ----------------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise SizeError(f"cannot reshape {old} to {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(old),), "reshape", lambda x: x.reshape(shape))


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[start:stop]`` along the first axis."""
    if not 0 <= start <= stop <= a.shape[0]:
        raise SizeError(f"row slice [{start}:{stop}] out of range for {a.shape[0]} rows")

    def back(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _node(a.data[start:stop], (a,), back, "rows", lambda x: x[start:stop])


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise SizeError("concat_rows: trailing shapes differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts]), parts, back, "concat",
                 lambda *xs: np.concatenate(xs))


# ----------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise SizeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise SizeError(f"matmul inner dimension mismatch {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul",
                 lambda x, y: x @ y)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-U vector to every row of an [N, U] tensor."""
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise SizeError(f"bias_add: {x.shape} and {b.shape} incompatible")
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "bias_add",
                 lambda p, q: p + q)


# ----------------------------------------------------------------------------
# reductions

def _norm_axis(a: Tensor, axis: int | None) -> int | None:
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise SizeError(f"axis {axis} out of range for rank {a.ndim}")
    return axis % a.ndim


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    axis = _norm_axis(a, axis)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(np.sum(a.data, axis=axis), (a,), back, "sum", lambda x: np.sum(x, axis=axis))


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    axis = _norm_axis(a, axis)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / n)


def _argmax_onehot(x: np.ndarray, axis: int | None) -> np.ndarray:
    mask = np.zeros(x.shape)
    if axis is None:
        mask.reshape(-1)[np.argmax(x)] = 1.0
    else:
        idx = np.expand_dims(np.argmax(x, axis=axis), axis)
        np.put_along_axis(mask, idx, 1.0, axis=axis)
    return mask


def reduce_max(a: Tensor, axis: int | None = None) -> Tensor:
    """Max with the gradient routed to the first maximal element."""
    axis = _norm_axis(a, axis)

    def back(g):
        mask = _argmax_onehot(a.data, axis)
        if axis is None:
            return (mask * float(g),)
        return (mask * np.expand_dims(g, axis),)

    return _node(np.max(a.data, axis=axis), (a,), back, "max", lambda x: np.max(x, axis=axis))


# ----------------------------------------------------------------------------
# softmax family

def _log_softmax(x: np.ndarray, tau: float) -> np.ndarray:
    z = x / tau
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax(a: Tensor, tau: float = 1.0) -> Tensor:
    """Row-wise log softmax of ``a / tau`` for an [N, K] tensor."""
    if a.ndim != 2:
        raise SizeError("log_softmax expects [N, K]")
    out = _log_softmax(a.data, tau)
    p = np.exp(out)

    def back(g):
        return ((g - p * g.sum(axis=1, keepdims=True)) / tau,)

    return _node(out, (a,), back, "log_softmax", lambda x: _log_softmax(x, tau))


def softmax(a: Tensor, tau: float = 1.0) -> Tensor:
    if a.ndim != 2:
        raise SizeError("softmax expects [N, K]")
    p = _softmax(a.data, tau)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)) / tau,)

    return _node(p, (a,), back, "softmax", lambda x: _softmax(x, tau))


def _softmax(x: np.ndarray, tau: float) -> np.ndarray:
    e = np.exp((x - x.max(axis=1, keepdims=True)) / tau)
    return e / e.sum(axis=1, keepdims=True)


# ----------------------------------------------------------------------------
# convolution and pooling

def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :oh, :ow]  # N,C,oh,ow,kh,kw


def _conv_forward(x, w, stride, padding):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh, ow = _out_size(h, kh, stride, padding), _out_size(wd, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _windows(xp, kh, kw, stride, oh, ow).transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, -1)
    wm = w.reshape(o, -1)
    out = (cols @ wm.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIHW kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise SizeError("conv2d expects NCHW input and OIHW kernel")
    if stride < 1 or padding < 0:
        raise SizeError("conv2d needs stride >= 1 and padding >= 0")
    n, c, h, wd = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise SizeError(f"conv2d channel mismatch: input {c}, kernel {ci}")
    oh, ow = _out_size(h, kh, stride, padding), _out_size(wd, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise SizeError("conv2d output would be empty")
    if bias is not None and bias.shape != (o,):
        raise SizeError(f"conv2d bias must have shape ({o},)")
    out, cols = _conv_forward(x.data, kernel.data, stride, padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def back(g):
        go = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (go.T @ cols).reshape(kernel.shape)
        dx = None
        if x.requires_grad:
            dcols = (go @ kernel.data.reshape(o, -1)).reshape(n, oh, ow, c, kh, kw)
            dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + wd]
        grads = (dx, dw)
        if bias is not None:
            grads += (go.sum(axis=0),)
        return grads

    def replay(xd, wdata, bd=None):
        res = _conv_forward(xd, wdata, stride, padding)[0]
        return res if bd is None else res + bd[None, :, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, back, "conv2d", replay)


def _pool_check(x: Tensor, window: int, stride: int):
    if x.ndim != 4:
        raise SizeError("pooling expects NCHW input")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise SizeError(f"pool window {window} larger than input {h}x{w}")
    return n, c, h, w, _out_size(h, window, stride, 0), _out_size(w, window, stride, 0)


def _max_pool_fwd(x, window, stride):
    n, c, h, w = x.shape
    oh, ow = _out_size(h, window, stride, 0), _out_size(w, window, stride, 0)
    flat = _windows(x, window, window, stride, oh, ow).reshape(n, c, oh, ow, window * window)
    arg = np.argmax(flat, axis=-1)
    return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], arg


def max_pool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    n, c, h, w, oh, ow = _pool_check(x, window, stride)
    out, arg = _max_pool_fwd(x.data, window, stride)

    def back(g):
        dx = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g * hit
        return (dx,)

    return _node(out, (x,), back, "max_pool2d", lambda d: _max_pool_fwd(d, window, stride)[0])


def _avg_pool_fwd(x, window, stride):
    n, c, h, w = x.shape
    oh, ow = _out_size(h, window, stride, 0), _out_size(w, window, stride, 0)
    return _windows(x, window, window, stride, oh, ow).mean(axis=(-2, -1))


def avg_pool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    n, c, h, w, oh, ow = _pool_check(x, window, stride)
    out = _avg_pool_fwd(x.data, window, stride)
    area = float(window * window)

    def back(g):
        dx = np.zeros_like(x.data)
        share = g / area
        for i in range(window):
            for j in range(window):
                dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += share
        return (dx,)

    return _node(out, (x,), back, "avg_pool2d", lambda d: _avg_pool_fwd(d, window, stride))


# ----------------------------------------------------------------------------
# per-channel normalization with scale and shift

def _norm_axes(ndim: int) -> tuple[int, ...]:
    return (0,) if ndim == 2 else (0, 2, 3)


def _expand(v: np.ndarray, ndim: int) -> np.ndarray:
    return v[None, :] if ndim == 2 else v[None, :, None, None]


def _scaled_norm_fwd(x, gamma, beta, mean, var, eps):
    nd = x.ndim
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - _expand(mean, nd)) * _expand(inv, nd)
    return xhat * _expand(gamma, nd) + _expand(beta, nd), xhat, inv


def scaled_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
                running: tuple[np.ndarray, np.ndarray] | None = None):
    """Normalize per channel, then scale by ``gamma`` and shift by ``beta``.

    With ``running=None`` the batch statistics are used (train mode) and
    gradients flow through them. Otherwise ``running=(mean, var)`` are
    treated as constants (eval mode).

    Returns ``(out, batch_mean, batch_var)``; the batch statistics are
    ``None`` in eval mode.
    """
    if x.ndim not in (2, 4):
        raise SizeError("scaled_norm expects [N, C] or [N, C, H, W]")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise SizeError(f"scaled_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    if x.shape[0] == 0:
        raise DataError("scaled_norm on an empty batch")
    axes = _norm_axes(x.ndim)
    nd = x.ndim
    train = running is None
    if train:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    else:
        mean, var = (np.asarray(v, dtype=np.float64) for v in running)
    out, xhat, inv = _scaled_norm_fwd(x.data, gamma.data, beta.data, mean, var, eps)
    m = x.data.size // c

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * _expand(gamma.data, nd)
        if train:
            dx = (_expand(inv, nd) / m) * (
                m * dxhat
                - _expand(dxhat.sum(axis=axes), nd)
                - xhat * _expand((dxhat * xhat).sum(axis=axes), nd)
            )
        else:
            dx = dxhat * _expand(inv, nd)
        return dx, dgamma, dbeta

    def replay(xd, gd, bd):
        mu, va = (xd.mean(axis=axes), xd.var(axis=axes)) if train else (mean, var)
        return _scaled_norm_fwd(xd, gd, bd, mu, va, eps)[0]

    t = _node(out, (x, gamma, beta), back, "scaled_norm", replay)
    return (t, mean, var) if train else (t, None, None)


# ----------------------------------------------------------------------------
# tape and backward

class Gradients(dict):
    """Map from node id to gradient tensor."""

    def of(self, t: Tensor) -> np.ndarray:
        return self[t.node].data


@dataclass
class Tape:
    """Reachable nodes of a graph in ascending id order."""

    nodes: list[Tensor] = field(default_factory=list)

    def replay(self) -> dict[int, np.ndarray]:
        """Recompute every op node from its inputs, in id order."""
        values: dict[int, np.ndarray] = {}
        for t in self.nodes:
            if t._replay is None:
                values[t.node] = t.data
                continue
            ins = [values[p.node] if p.requires_grad else p.data for p in t._parents]
            values[t.node] = t._replay(*ins)
        return values


def tape_of(root: Tensor) -> Tape:
    if not root.requires_grad:
        return Tape([])
    seen = {root.node: root}
    stack = [root]
    while stack:
        t = stack.pop()
        for p in t._parents:
            if p.requires_grad and p.node not in seen:
                seen[p.node] = p
                stack.append(p)
    return Tape([seen[k] for k in sorted(seen)])


def backward(loss: Tensor) -> Gradients:
    """Reverse-mode sweep from a scalar loss; returns gradients by node id."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ShapeError("loss is not on the tape (no input requires grad)")
    tape = tape_of(loss)
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for t in reversed(tape.nodes):
        g = grads.get(t.node)
        if g is None or t._backward is None:
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(p.node)
            grads[p.node] = pg if prev is None else prev + pg
    return Gradients((k, Tensor(v)) for k, v in grads.items())

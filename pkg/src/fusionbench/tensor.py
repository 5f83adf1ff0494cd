"""Minimal reverse-mode autodiff over numpy arrays.

Every op records a node (output, parents, backward closure) when gradients
are enabled and at least one input requires them. ``backward`` walks the
recorded graph in reverse topological order, so the recorded graph is the
tape: each node's inputs precede it and each node is visited once.

Arrays default to float32; ``precision(np.float64)`` switches the default
for oracle checks. Broadcasting is limited to bias addition.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, ValidationError

_state = threading.local()
_debug = False


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def set_debug(flag: bool) -> None:
    """When on, every op output is checked for NaN/Inf."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _debug and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by {op}")
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return tsum(self)

    def backward(self, inputs=None):
        return backward(self, inputs)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _shape_str(*arrs):
    return " and ".join(str(tuple(a.shape)) for a in arrs)


# -- elementwise / reductions -------------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        out = a.data + np.asarray(b, dtype=a.dtype)
        return Tensor._from_op(out, (a,), lambda g: (g,), "add")
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {_shape_str(a, b)}")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim:
            raise DimensionError("mul: non-tensor operand must be a scalar")
        return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "mul")
    if a.shape != b.shape:
        raise DimensionError(f"mul: shape mismatch {_shape_str(a, b)}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def tsum(x):
    x = _as_tensor(x)
    shape, dtype = x.shape, x.dtype
    return Tensor._from_op(
        np.asarray(x.data.sum(), dtype=dtype),
        (x,),
        lambda g: (np.full(shape, g, dtype=dtype),),
        "sum",
    )


def getitem(x, idx):
    """Basic slicing; the backward scatters into a zero array."""
    shape, dtype = x.shape, x.dtype

    def _bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] = g
        return (out,)

    return Tensor._from_op(x.data[idx], (x,), _bw, "getitem")


def reshape(x, shape):
    orig = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def relu(x):
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


# -- layers --------------------------------------------------------------------


def linear(x, W, b):
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"linear: expected 2-D x, 2-D W, 1-D b, got {_shape_str(x, W, b)}")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"linear: inner dimensions disagree for {_shape_str(x, W, b)}")
    xd, Wd = x.data, W.data

    def _bw(g):
        return g @ Wd.T, xd.T @ g, g.sum(axis=0)

    return Tensor._from_op(xd @ Wd + b.data, (x, W, b), _bw, "linear")


def conv2d(x, k, stride: int = 1, padding: int = 0):
    """Cross-correlation of N×C×H×W input with F×C×Kh×Kw kernels (no bias)."""
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d: incompatible input/kernel shapes {_shape_str(x, k)}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} padding={padding}")
    N, C, H, W = x.shape
    F, _, Kh, Kw = k.shape
    p, s = padding, stride
    Hp, Wp = H + 2 * p, W + 2 * p
    if Kh > Hp or Kw > Wp:
        raise DimensionError(f"conv2d: kernel {(Kh, Kw)} larger than padded input {(Hp, Wp)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    Ho, Wo = (Hp - Kh) // s + 1, (Wp - Kw) // s + 1
    win = sliding_window_view(xp, (Kh, Kw), axis=(2, 3))[:, :, ::s, ::s]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * Kh * Kw)
    kmat = k.data.reshape(F, C * Kh * Kw)
    out = np.ascontiguousarray((cols @ kmat.T).reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2))

    def _bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, F)
        gk = (g2.T @ cols).reshape(k.shape)
        if not x.requires_grad:
            return None, gk
        dcols = (g2 @ kmat).reshape(N, Ho, Wo, C, Kh, Kw).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((N, C, Hp, Wp), dtype=g.dtype)
        for i in range(Kh):
            for j in range(Kw):
                dxp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += dcols[..., i, j]
        return dxp[:, :, p : p + H, p : p + W], gk

    return Tensor._from_op(out, (x, k), _bw, "conv2d")


def avg_pool2d(x, k: int):
    """Mean over non-overlapping k×k windows; k must divide H and W."""
    N, C, H, W = x.shape
    if k < 1 or H % k or W % k:
        raise DimensionError(f"avg_pool2d: window {k} does not divide spatial extent {(H, W)}")
    out = x.data.reshape(N, C, H // k, k, W // k, k).mean(axis=(3, 5))
    scale = x.dtype.type(1.0 / (k * k))

    def _bw(g):
        full = np.broadcast_to(g[:, :, :, None, :, None] * scale, (N, C, H // k, k, W // k, k))
        return (full.reshape(N, C, H, W),)

    return Tensor._from_op(out, (x,), _bw, "avg_pool2d")


class BatchNormState:
    """Running statistics for one batchnorm layer (mutated in train mode)."""

    def __init__(self, channels, dtype=None, momentum=0.1, eps=1e-5):
        dtype = dtype or default_dtype()
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x, gamma, beta, state: BatchNormState, training: bool):
    N, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm2d: affine params must have shape ({C},), got {_shape_str(gamma, beta)}")
    xd = x.data
    dt = xd.dtype.type
    if training:
        m = N * H * W
        if N < 2:
            raise ContractError("batchnorm2d: train mode needs a batch of at least 2")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        mom = dt(state.momentum)
        state.running_mean = ((1 - mom) * state.running_mean + mom * mu).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * var * dt(m / (m - 1))).astype(
            state.running_var.dtype
        )
    else:
        mu = state.running_mean.astype(dt)
        var = state.running_var.astype(dt)
    inv_std = (1.0 / np.sqrt(var + dt(state.eps))).astype(dt)
    xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def _bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if training:
            m = N * H * W
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            dx = (inv_std[None, :, None, None] / dt(m)) * (dt(m) * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), _bw, "batchnorm2d")


def concat(a, b):
    """Column-wise [a | b]; a is always the foreground block."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat: leading extents differ for {_shape_str(a, b)}")
    da = a.shape[1]
    return Tensor._from_op(
        np.concatenate([a.data, b.data], axis=1), (a, b), lambda g: (g[:, :da], g[:, da:]), "concat"
    )


def check_one_hot(t: np.ndarray, n_classes: int | None = None) -> None:
    if t.ndim != 2 or (n_classes is not None and t.shape[1] != n_classes):
        raise ValidationError(f"targets must be N×C one-hot, got shape {t.shape}")
    ok = np.all((t == 0) | (t == 1), axis=1) & (t.sum(axis=1) == 1)
    if not np.all(ok):
        raise ValidationError(f"target row {int(np.argmin(ok))} is not one-hot")


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, targets):
    """Mean over rows of -log softmax(logits)[target]."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise DimensionError(f"softmax_cross_entropy: logits/targets shapes {_shape_str(logits, t)}")
    check_one_hot(t)
    a = logits.data
    t = t.astype(a.dtype)
    N = a.shape[0]
    z = a - a.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = np.asarray(-(t * logp).sum() / N, dtype=a.dtype)

    def _bw(g):
        return ((np.exp(logp) - t) * (g / N),)

    return Tensor._from_op(loss, (logits,), _bw, "softmax_cross_entropy")


# -- backward ------------------------------------------------------------------


def _toposort(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _backprop(loss):
    """Reverse sweep; returns {id(leaf): (leaf, grad)} for reachable leaves."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves = {}
    if not loss.requires_grad:
        return leaves
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            leaves[id(node)] = (node, g)
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + gp if key in grads else gp
    return leaves


def backward(loss, inputs=None):
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays. Tensors listed in
    ``inputs`` that the loss does not depend on get a zero gradient. Returns
    a dict mapping each touched leaf tensor to its gradient.
    """
    result = {}
    for node, g in _backprop(loss).values():
        node.grad = g if node.grad is None else node.grad + g
        result[node] = node.grad
    for t in inputs or ():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        result[t] = t.grad
    return result


def grad(loss, inputs):
    """Gradients of ``loss`` w.r.t. ``inputs`` without touching any ``.grad``."""
    leaves = _backprop(loss)
    return [leaves[id(t)][1] if id(t) in leaves else np.zeros_like(t.data) for t in inputs]

"""Dense tensors with reverse-mode automatic differentiation.

Every numeric operation used by the detection network lives here. Tensors
wrap numpy arrays (float32 or float64); each op that participates in
differentiation records its parents and a vector-Jacobian closure, and
``Tensor.backward()`` replays that implicit tape in reverse topological
order. Leaf tensors (no recorded op) accumulate into ``.grad`` across
backward calls until cleared.
"""

from __future__ import annotations

import contextlib
import warnings
from dataclasses import dataclass, field

import numpy as np

_FLOAT_TYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_TYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def is_leaf(self):
        return self._vjp is None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # -- gradient bookkeeping ------------------------------------------
    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        """Populate ``.grad`` on every tracked leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {tuple(self.shape)}"
            )
        order = trace(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, contrib in zip(node._parents, node._vjp(g)):
                if contrib is None or not parent.requires_grad:
                    continue
                prev = pending.get(id(parent))
                pending[id(parent)] = contrib if prev is None else prev + contrib

    # -- arithmetic sugar ----------------------------------------------
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
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def trace(t: Tensor) -> list:
    """Ordered record of the ops behind ``t`` (each node exactly once)."""
    order, seen, stack = [], set(), [(t, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(out_data, parents, vjp, op):
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=rg)
    if rg:
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back to the original operand shape."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _wrap(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _wrap(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _wrap(out, (a, b), vjp, "mul")


def neg(a) -> Tensor:
    a = _coerce(a)
    return _wrap(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p) -> Tensor:
    a = _coerce(a)
    p = float(p)
    out = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _wrap(out, (a,), vjp, "pow")


def texp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)
    return _wrap(out, (a,), lambda g: (g * out,), "exp")


def tlog(a) -> Tensor:
    a = _coerce(a)
    return _wrap(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _wrap(out, (a,), vjp, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def vjp(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _wrap(out, (a,), vjp, "mean")


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out = a.data.reshape(shape)
    return _wrap(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _wrap(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def flatten(a, keep_batch: bool = False) -> Tensor:
    a = _coerce(a)
    if keep_batch:
        return reshape(a, (a.shape[0], -1))
    return reshape(a, (-1,))


# ---------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.shape[1]} (lhs cols) vs {b.shape[0]} (rhs rows)"
        )
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _wrap(out, (a, b), vjp, "matmul")


def bmm(a, b) -> Tensor:
    """Batched matrix product over the leading axes ((..., L, D) @ (..., D, M))."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 3 or b.ndim < 3 or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"bmm expects matching batched operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"bmm inner dimensions differ: {a.shape[-1]} vs {b.shape[-2]}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

    return _wrap(out, (a, b), vjp, "bmm")


def linear(x, weight, bias=None) -> Tensor:
    """Affine map on the trailing axis: ``out = x @ weight.T + bias``."""
    x, weight = _coerce(x), _coerce(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"linear input dim {x.shape[-1]} != weight input dim {weight.shape[1]}"
        )
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = _coerce(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
        parents.append(bias)

    def vjp(g):
        g2 = g.reshape(-1, weight.shape[0])
        x2 = x.data.reshape(-1, weight.shape[1])
        grads = [g @ weight.data, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _wrap(out, parents, vjp, "linear")


# ---------------------------------------------------------------------
# activations / normalization
# ---------------------------------------------------------------------

def relu(a) -> Tensor:
    a = _coerce(a)
    out = np.maximum(a.data, 0)
    return _wrap(out, (a,), lambda g: (g * (a.data > 0),), "relu")


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(over="ignore"):
        out = np.where(
            a.data >= 0,
            1.0 / (1.0 + np.exp(-a.data)),
            np.exp(a.data) / (1.0 + np.exp(a.data)),
        )
    # keep outputs strictly inside (0, 1) even at saturating magnitudes
    tiny = np.finfo(out.dtype).tiny
    out = np.clip(out, tiny, np.nextafter(out.dtype.type(1.0), out.dtype.type(0.0)))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _wrap(out, (a,), vjp, "sigmoid")


def activation(kind: str, a) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation kind {kind!r}")


def softplus(a) -> Tensor:
    """log(1 + exp(x)) computed without overflow."""
    a = _coerce(a)
    out = np.maximum(a.data, 0) + np.log1p(np.exp(-np.abs(a.data)))

    def vjp(g):
        with np.errstate(over="ignore"):
            s = np.where(
                a.data >= 0,
                1.0 / (1.0 + np.exp(-a.data)),
                np.exp(a.data) / (1.0 + np.exp(a.data)),
            )
        return (g * s,)

    return _wrap(out, (a,), vjp, "softplus")


def softmax(a, axis: int) -> Tensor:
    a = _coerce(a)
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"softmax axis {axis} out of range for {a.ndim}-D tensor")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    out = np.maximum(out, np.finfo(out.dtype).tiny)   # keep strictly positive

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _wrap(out, (a,), vjp, "softmax")


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    initialized: bool = False

    @classmethod
    def for_channels(cls, channels: int, dtype=np.float64):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x, gamma, beta, state: BatchNormState, mode: str,
                eps: float = 1e-5, momentum: float = 0.1,
                update_running: bool = True) -> Tensor:
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects N,C,H,W input, got {x.ndim}-D")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d parameter length != channel count {c}")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm2d train mode needs N*H*W >= 2")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_running:
            # in place: callers may hold live references to these arrays
            state.mean[...] = (1.0 - momentum) * state.mean + momentum * mu
            state.var[...] = (1.0 - momentum) * state.var + momentum * var
            state.initialized = True
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def vjp(g):
            gxhat = g * gamma.data[None, :, None, None]
            sum_g = gxhat.sum(axis=(0, 2, 3))
            sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3))
            gx = (inv_std[None, :, None, None] / m) * (
                m * gxhat
                - sum_g[None, :, None, None]
                - xhat * sum_gx[None, :, None, None]
            )
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            return gx, ggamma, gbeta

        return _wrap(out, (x, gamma, beta), vjp, "batchnorm2d")

    if not state.initialized:
        warnings.warn(
            "batchnorm2d eval mode before any training step: using mean 0, var 1 defaults",
            RuntimeWarning,
            stacklevel=2,
        )
    inv_std = 1.0 / np.sqrt(state.var + eps)
    xhat = (x.data - state.mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def vjp(g):
        gx = g * (gamma.data * inv_std)[None, :, None, None]
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        return gx, ggamma, gbeta

    return _wrap(out, (x, gamma, beta), vjp, "batchnorm2d")


# ---------------------------------------------------------------------
# convolution / pooling / resampling
# ---------------------------------------------------------------------

def _to_batched(x: Tensor):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ValueError(f"expected C,H,W or N,C,H,W input, got {x.ndim}-D")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with optional bias, differentiable in all operands."""
    x, weight = _coerce(x), _coerce(weight)
    xb, squeeze = _to_batched(x)
    n, cin, h, w = xb.shape
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be C_out,C_in,kH,kW, got {weight.ndim}-D")
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d input channels {cin} != weight C_in {wcin}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(
            f"conv2d padded spatial dims ({hp}x{wp}) smaller than kernel ({kh}x{kw})"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                    # N,Cin,Ho,Wo,kh,kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, cin * kh * kw
    )
    w2 = weight.data.reshape(cout, cin * kh * kw)
    out2 = cols @ w2.T
    parents = [x, weight]
    if bias is not None:
        bias = _coerce(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d bias shape {bias.shape} != ({cout},)")
        out2 = out2 + bias.data
        parents.append(bias)
    out = out2.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def vjp(g):
        gb4 = g[None] if squeeze else g
        g2 = np.ascontiguousarray(gb4.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        grads = [None, (g2.T @ cols).reshape(weight.shape)]
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros((n, cin, hp, wp), dtype=g2.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            grads[0] = gx[0] if squeeze else gx
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _wrap(out, parents, vjp, "conv2d")


def pool2d(kind: str, x, window: int, stride: int | None = None) -> Tensor:
    """Max or average pooling; max routes gradient to the first argmax."""
    if kind not in ("max", "avg"):
        raise ValueError(f"pool2d kind must be 'max' or 'avg', got {kind!r}")
    x = _coerce(x)
    xb, squeeze = _to_batched(x)
    n, c, h, w = xb.shape
    if window > h or window > w:
        raise ValueError(f"pool2d window {window} larger than input {h}x{w}")
    stride = stride or window
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xb, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride].reshape(n, c, ho, wo, window * window)

    if kind == "avg":
        out = win.mean(axis=-1)

        def vjp(g):
            gb = (g[None] if squeeze else g) / (window * window)
            gx = np.zeros((n, c, h, w), dtype=gb.dtype)
            for i in range(window):
                for j in range(window):
                    gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gb
            return (gx[0] if squeeze else gx,)

    else:
        amax = win.argmax(axis=-1)                       # first index on ties
        out = np.take_along_axis(win, amax[..., None], axis=-1)[..., 0]

        def vjp(g):
            gb = g[None] if squeeze else g
            gx = np.zeros((n, c, h, w), dtype=gb.dtype)
            ni, ci, ii, ji = np.indices((n, c, ho, wo))
            hi = ii * stride + amax // window
            wi = ji * stride + amax % window
            np.add.at(gx, (ni, ci, hi, wi), gb)
            return (gx[0] if squeeze else gx,)

    out_t = _wrap(out[0] if squeeze else out, (x,), vjp, f"pool2d_{kind}")
    return out_t


def channel_pool(kind: str, x) -> Tensor:
    """Reduce the channel axis to length 1 by mean or max per spatial position."""
    if kind not in ("max", "avg"):
        raise ValueError(f"channel_pool kind must be 'max' or 'avg', got {kind!r}")
    x = _coerce(x)
    if x.ndim not in (3, 4):
        raise ValueError(f"channel_pool expects C,H,W or N,C,H,W input, got {x.ndim}-D")
    ax = x.ndim - 3
    if kind == "avg":
        out = x.data.mean(axis=ax, keepdims=True)

        def vjp(g):
            return (np.broadcast_to(g / x.shape[ax], x.shape).astype(g.dtype, copy=False),)

    else:
        amax = x.data.argmax(axis=ax, keepdims=True)
        out = np.take_along_axis(x.data, amax, axis=ax)

        def vjp(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            np.put_along_axis(gx, amax, g, axis=ax)
            return (gx,)

    return _wrap(out, (x,), vjp, f"channel_pool_{kind}")


def concat(tensors, axis: int) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ValueError("concat requires at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    for k, t in enumerate(tensors[1:], start=1):
        if t.ndim != len(ref):
            raise ValueError(f"concat operand {k} rank {t.ndim} != {len(ref)}")
        for ax in range(t.ndim):
            if ax != axis % t.ndim and t.shape[ax] != ref[ax]:
                raise ValueError(
                    f"concat operand {k} dim {ax} is {t.shape[ax]}, expected {ref[ax]}"
                )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _wrap(out, tensors, vjp, "concat")


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Corner-aligned bilinear sampling matrix (n_out x n_in)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    lo = np.floor(src).astype(int)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    for i in range(n_out):
        m[i, lo[i]] += 1.0 - frac[i]
        if frac[i] > 0:
            m[i, hi[i]] += frac[i]
    return m


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with corner-aligned sampling (same-size is identity)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("resize_bilinear output dims must be >= 1")
    x = _coerce(x)
    if x.ndim not in (3, 4):
        raise ValueError(f"resize_bilinear expects C,H,W or N,C,H,W input, got {x.ndim}-D")
    h, w = x.shape[-2], x.shape[-1]
    if (h, w) == (out_h, out_w):
        return x
    ry = _resize_matrix(h, out_h, x.dtype)
    rx = _resize_matrix(w, out_w, x.dtype)
    out = np.einsum("ij,...jk,lk->...il", ry, x.data, rx, optimize=True)

    def vjp(g):
        return (np.einsum("ij,...ik,kl->...jl", ry, g, rx, optimize=True),)

    return _wrap(out, (x,), vjp, "resize_bilinear")


def dropout(x, p: float, mode: str, rng: np.random.Generator | None = None,
            mask: np.ndarray | None = None) -> Tensor:
    """Inverted dropout; ``mask`` overrides sampling (used to freeze masks)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    x = _coerce(x)
    if mode == "eval" or p == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout in train mode needs an rng (or an explicit mask)")
        mask = rng.random(x.shape) >= p
    scale = 1.0 / (1.0 - p)
    out = x.data * mask * scale

    def vjp(g):
        return (g * mask * scale,)

    out_t = _wrap(out, (x,), vjp, "dropout")
    return out_t

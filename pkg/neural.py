"""
Tensor kernels with reverse-mode gradients.

Every encoder and fusion block is composed from the operations in this module.
Arithmetic and accumulation are float64; parameters may be kept at float32
precision by the optimizer, but kernels always upcast before computing.

Usage:
    W = Parameter(init_uniform(SeededRng(0), (8, 3), fan_in=8), name="W")
    loss = linear(Tensor(x), W).sum()
    backward(loss)
    W.grad  # dloss/dW
"""

import math
from contextlib import contextmanager
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from errors import GraphError, ModelError, NumericalError, ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Evaluate without recording the graph (inference, finite differences)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


# ============================================
# RANDOMNESS
# ============================================

class SeededRng:
    """Philox counter-based generator: the same seed and stream give the same draws on every platform."""

    def __init__(self, seed: int, *stream: int):
        if int(seed) < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        sequence = np.random.SeedSequence([self.seed, *self.stream])
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def child(self, *stream: int) -> "SeededRng":
        """Independent generator for a sub-task (subject, layer, epoch ...)."""
        return SeededRng(self.seed, *self.stream, *stream)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def permutation(self, n):
        return self.generator.permutation(n)


def to_float32_storage(values) -> np.ndarray:
    """Round to the nearest float32 but keep float64 dtype for computation."""
    return np.asarray(values, dtype=np.float64).astype(np.float32).astype(np.float64)


def init_uniform(rng: SeededRng, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / max(int(fan_in), 1))
    return to_float32_storage(rng.uniform(-bound, bound, size=shape))


# ============================================
# TENSOR
# ============================================

class Tensor:
    """Dense float64 array plus the graph edge that produced it."""

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._op = ""

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} op={self._op or 'leaf'}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims=False): return tensor_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 else axes)


class Parameter(Tensor):
    """Trainable leaf tensor; its gradient accumulates across backward passes until zeroed."""

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)
        self.data = np.ascontiguousarray(self.data)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def custom_op(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap a forward result; backward_fn(grad_out) returns one gradient (or None) per parent."""
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor(data)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf that requires grad."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError()
    if not np.isfinite(loss.data).all():
        raise NumericalError("loss is not finite")

    order = _topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            if not np.isfinite(grad).all():
                raise NumericalError(f"non-finite gradient reached {node!r}")
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = _unbroadcast(np.asarray(parent_grad, dtype=np.float64), parent.shape)
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


# ============================================
# ELEMENTWISE
# ============================================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    return custom_op(a.data / b.data, (a, b), _backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def _backward(g):
        if exponent == 0.0:
            return (np.zeros_like(g),)
        safe = np.where(a.data == 0.0, 1.0, a.data)
        local = np.where(a.data == 0.0, 0.0 if exponent > 1.0 else float(exponent == 1.0),
                         exponent * safe ** (exponent - 1.0))
        return (g * local,)

    return custom_op(np.power(a.data, exponent), (a,), _backward, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return custom_op(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NumericalError("log of a non-positive value")
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    """Clamp values; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    y = np.clip(a.data, low, high)
    inside = y == a.data
    return custom_op(y, (a,), lambda g: (g * inside,), "clip")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = expit(a.data)
    return custom_op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),), "softplus")


def activation(x, kind: str) -> Tensor:
    """relu, gelu (exact erf form) or silu (x * sigmoid(x))."""
    x = as_tensor(x)
    if kind == "relu":
        mask = x.data > 0
        return custom_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        return custom_op(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")
    if kind == "silu":
        s = expit(x.data)
        return custom_op(x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),), "silu")
    raise ModelError(f"Unknown activation '{kind}' (expected relu, gelu or silu)")


def dropout(x, rate: float, rng: Optional[SeededRng], training: bool) -> Tensor:
    x = as_tensor(x)
    if rate <= 0.0 or not training:
        return x
    if rng is None:
        raise ModelError("dropout with a non-zero rate needs a SeededRng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ============================================
# SHAPE
# ============================================

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = axis if isinstance(axis, tuple) else (axis,)
    return tuple(sorted(a % ndim for a in axes))


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return custom_op(a.data.sum(axis=axes, keepdims=keepdims), (a,), _backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tensor_sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, axes)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)

    def _backward(g):
        full = np.zeros(a.shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return custom_op(a.data[index], (a,), _backward, "getitem")


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return custom_op(np.flip(a.data, axis), (a,), lambda g: (np.flip(g, axis),), "flip")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(data, tensors, _backward, "concat")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def _backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return custom_op(a.data @ b.data, (a, b), _backward, "matmul")


# ============================================
# LAYER KERNELS
# ============================================

def linear(x, W, b=None) -> Tensor:
    """y = xW + b over the last axis of x."""
    x = as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not fit weight {W.shape}")
    y = x.data @ W.data
    if b is not None:
        y = y + b.data
    parents = (x, W) if b is None else (x, W, b)

    def _backward(g):
        g2 = g.reshape(-1, W.shape[1])
        x2 = x.data.reshape(-1, W.shape[0])
        grads = [g @ W.data.T, x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return custom_op(y, parents, _backward, "linear")


def _conv_windows(xp: np.ndarray, k: int, stride: int, dilation: int, l_out: int) -> np.ndarray:
    span = dilation * (k - 1) + 1
    windows = sliding_window_view(xp, span, axis=-1)
    return windows[..., ::stride, ::dilation][..., :l_out, :]


def _scatter_windows(gwin: np.ndarray, l_pad: int, stride: int, dilation: int) -> np.ndarray:
    n, c, l_out, k = gwin.shape
    gxp = np.zeros((n, c, l_pad))
    stop = stride * (l_out - 1) + 1
    for j in range(k):
        start = j * dilation
        gxp[:, :, start:start + stop:stride] += gwin[:, :, :, j]
    return gxp


def conv1d(x, kernels, bias=None, stride: int = 1, padding: int = 0,
           dilation: int = 1, groups: int = 1) -> Tensor:
    """Cross-correlation of x[N, C_in, L] (or [C_in, L]) with kernels[C_out, C_in/groups, K]."""
    x = as_tensor(x)
    if x.ndim == 2:
        out = conv1d(reshape(x, (1,) + x.shape), kernels, bias, stride, padding, dilation, groups)
        return reshape(out, out.shape[1:])
    if x.ndim != 3 or kernels.ndim != 3:
        raise ShapeError(f"conv1d expects x[N, C, L] and kernels[C_out, C_in, K], got {x.shape}, {kernels.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError("conv1d needs stride >= 1, dilation >= 1 and padding >= 0")
    n, c_in, length = x.shape
    c_out, c_group, k = kernels.shape
    if c_in != c_group * groups or c_out % groups:
        raise ShapeError(f"conv1d: {c_in} input channels do not fit kernels {kernels.shape} with groups={groups}")
    span = dilation * (k - 1) + 1
    l_pad = length + 2 * padding
    if span > l_pad:
        raise ShapeError(f"conv1d: empty output (kernel span {span} > padded length {l_pad})")
    l_out = (l_pad - span) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    per_group = c_out // groups

    def _group_slices(gi):
        return slice(gi * c_group, (gi + 1) * c_group), slice(gi * per_group, (gi + 1) * per_group)

    depthwise = groups == c_in and c_group == 1 and per_group == 1
    if depthwise:
        windows = _conv_windows(xp, k, stride, dilation, l_out)
        y = np.einsum("nclk,ck->ncl", windows, kernels.data[:, 0, :])
    else:
        y = np.empty((n, c_out, l_out))
        for gi in range(groups):
            cs, os = _group_slices(gi)
            windows = _conv_windows(xp[:, cs], k, stride, dilation, l_out)
            y[:, os] = np.tensordot(windows, kernels.data[os], axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if bias is not None:
        y = y + bias.data[None, :, None]
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def _backward(g):
        if depthwise:
            windows = _conv_windows(xp, k, stride, dilation, l_out)
            gk = np.einsum("ncl,nclk->ck", g, windows)[:, None, :]
            gwin = g[..., None] * kernels.data[None, :, 0, None, :]
            gxp = _scatter_windows(gwin, l_pad, stride, dilation)
        else:
            gk = np.zeros(kernels.shape)
            gxp = np.zeros(xp.shape)
            for gi in range(groups):
                cs, os = _group_slices(gi)
                windows = _conv_windows(xp[:, cs], k, stride, dilation, l_out)
                gk[os] = np.tensordot(g[:, os], windows, axes=([0, 2], [0, 2]))
                gwin = np.tensordot(g[:, os], kernels.data[os], axes=([1], [0])).transpose(0, 2, 1, 3)
                gxp[:, cs] += _scatter_windows(gwin, l_pad, stride, dilation)
        grads = [gxp[:, :, padding:padding + length], gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return custom_op(y, parents, _backward, "conv1d")


def max_pool1d(x, kernel: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """Max over sliding windows of the last axis of x[N, C, L]; padding never wins."""
    x = as_tensor(x)
    stride = stride or kernel
    if padding > kernel // 2:
        raise ShapeError(f"max_pool1d padding {padding} exceeds half the kernel {kernel}")
    n, c, length = x.shape
    l_pad = length + 2 * padding
    if kernel > l_pad:
        raise ShapeError(f"max_pool1d: kernel {kernel} longer than padded input {l_pad}")
    l_out = (l_pad - kernel) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)), constant_values=-np.inf)
    windows = sliding_window_view(xp, kernel, axis=-1)[:, :, ::stride][:, :, :l_out]
    idx = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        positions = np.arange(l_out) * stride + idx
        rows = np.arange(n * c).reshape(n, c, 1) * l_pad
        flat = (rows + positions).ravel()
        gxp = np.bincount(flat, weights=g.ravel(), minlength=n * c * l_pad).reshape(n, c, l_pad)
        return (gxp[:, :, padding:padding + length],)

    return custom_op(y, (x,), _backward, "max_pool1d")


def avg_pool1d(x, kernel: int) -> Tensor:
    """Non-overlapping mean over the last axis; a short tail is zero-padded (output length ceil(L/kernel))."""
    x = as_tensor(x)
    length = x.shape[-1]
    l_out = -(-length // kernel)
    pad = l_out * kernel - length
    xp = np.pad(x.data, [(0, 0)] * (x.ndim - 1) + [(0, pad)])
    y = xp.reshape(x.shape[:-1] + (l_out, kernel)).mean(axis=-1)

    def _backward(g):
        return (np.repeat(g / kernel, kernel, axis=-1)[..., :length],)

    return custom_op(y, (x,), _backward, "avg_pool1d")


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) * gamma + beta over the last axis (population variance)."""
    x = as_tensor(x)
    if eps <= 0:
        raise ShapeError("layer_norm eps must be positive")
    d = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: affine parameter {p.shape} does not fit feature size {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def _backward(g):
        gxhat = g * gamma.data if gamma is not None else g
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return tuple(grads)

    return custom_op(y, parents, _backward, "layer_norm")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return custom_op(y, (x,), _backward, "softmax")


def multi_head_attention(query, key, value, heads: int, params: Mapping[str, Tensor],
                         dropout_rate: float = 0.0, rng: Optional[SeededRng] = None,
                         training: bool = False) -> Tensor:
    """
    Scaled dot-product attention with per-head projections.

    query [B, T_q, d] (or [T_q, d]); key/value [B, T_k, d]. params holds
    wq, bq, wk, bk, wv, bv, wo, bo; biases may be None.
    """
    query, key, value = as_tensor(query), as_tensor(key), as_tensor(value)
    squeeze = query.ndim == 2
    if squeeze:
        query, key, value = (reshape(t, (1,) + t.shape) for t in (query, key, value))
    d = query.shape[-1]
    if heads < 1 or d % heads:
        raise ShapeError(f"attention width {d} is not divisible by {heads} heads")
    if key.shape[:-1] != value.shape[:-1] or key.shape[-1] != d or value.shape[-1] != d:
        raise ShapeError(f"attention key {key.shape} / value {value.shape} do not fit query {query.shape}")
    batch, t_q, t_k = query.shape[0], query.shape[1], key.shape[1]
    dh = d // heads

    def _split(t, length):
        return transpose(reshape(t, (batch, length, heads, dh)), (0, 2, 1, 3))

    q = _split(linear(query, params["wq"], params.get("bq")), t_q)
    k = _split(linear(key, params["wk"], params.get("bk")), t_k)
    v = _split(linear(value, params["wv"], params.get("bv")), t_k)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    weights = dropout(softmax(scores, axis=-1), dropout_rate, rng, training)
    context = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (batch, t_q, d))
    out = linear(context, params["wo"], params.get("bo"))
    return reshape(out, (t_q, d)) if squeeze else out


# ============================================
# GRADIENT CHECK
# ============================================

def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
              max_coords: Optional[int] = None, seed: int = 0) -> float:
    """
    Compare analytic gradients of the scalar fn() against central differences.

    Returns the largest norm-wise relative error ||num - ana|| / (||num|| + ||ana||)
    over the given tensors. With max_coords, only that many coordinates per
    tensor are perturbed (sampled with a SeededRng).
    """
    for t in tensors:
        t.grad = np.zeros_like(t.data)
    backward(fn())
    rng = SeededRng(seed)
    worst = 0.0
    for t in tensors:
        analytic = t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise ShapeError("gradcheck needs contiguous tensor data")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(len(coords))
        with no_grad():
            for j, i in enumerate(coords):
                original = flat[i]
                flat[i] = original + h
                plus = fn().item()
                flat[i] = original - h
                minus = fn().item()
                flat[i] = original
                numeric[j] = (plus - minus) / (2.0 * h)
        chosen = analytic[coords]
        scale = np.linalg.norm(numeric) + np.linalg.norm(chosen)
        if scale > 0:
            worst = max(worst, float(np.linalg.norm(numeric - chosen) / scale))
    return worst

"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap row-major numpy float arrays (float32 for runtime, float64 for
verification) and record the operations applied to them.  Calling
``backward`` on a scalar walks the recorded graph once in reverse
topological order and accumulates gradients into every reachable tensor
that asked for them.

Thread-safety contract: a single forward/backward graph is owned by one
thread; tensors that do not require grad are never mutated by the engine
and may be shared freely; independent graphs may run concurrently.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from functools import lru_cache
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "PadMode",
    "ShapeError",
    "no_grad",
    "tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "transpose",
    "reshape",
    "tensor_slice",
    "sum_",
    "mean_",
    "abs_",
    "exp",
    "log",
    "sqrt",
    "maximum",
    "minimum",
    "clip",
    "relu",
    "gelu",
    "sigmoid",
    "softmax_last_dim",
    "layer_norm",
    "linear",
    "conv2d",
    "depthwise_conv2d",
    "depthwise_xcorr",
    "backward",
    "zero_grads",
    "grad_check",
    "GradCheckReport",
    "truncated_normal",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense n-d float array with an optional same-shape gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn = None

    # -- construction ----------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents, grad_fn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        live = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = live
        out._parents = tuple(parents) if live else ()
        out._grad_fn = grad_fn if live else None
        return out

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"

    # -- operator sugar ---------------------------------------------------

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

    def __getitem__(self, idx):
        return tensor_slice(self, idx)


def tensor(data, dtype=np.float32) -> Tensor:
    """Constant (non-trained) tensor."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    """Trainable tensor (receives a gradient on backward)."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- padding -------------------------------------------------------------


@dataclass(frozen=True)
class PadMode:
    """Spatial padding policy for convolutions: zeros(p), circular(p), valid."""

    kind: str
    amount: int = 0

    def __post_init__(self):
        if self.kind not in ("zeros", "circular", "valid"):
            raise ValueError(f"unknown pad kind {self.kind!r}")
        if self.kind == "valid" and self.amount != 0:
            raise ValueError("valid padding carries no amount")
        if self.amount < 0:
            raise ValueError("pad amount must be >= 0")

    @staticmethod
    @lru_cache(maxsize=None)
    def zeros(p: int) -> "PadMode":
        return PadMode("zeros", p)

    @staticmethod
    @lru_cache(maxsize=None)
    def circular(p: int) -> "PadMode":
        return PadMode("circular", p)

    @staticmethod
    def valid() -> "PadMode":
        return _PAD_VALID

    @staticmethod
    @lru_cache(maxsize=None)
    def same(kind: str, kernel: int) -> "PadMode":
        """Padding that preserves spatial extent at stride 1 (odd kernel)."""
        if kind == "valid":
            return _PAD_VALID
        return PadMode(kind, (kernel - 1) // 2)


_PAD_VALID = PadMode("valid", 0)


def _pad_spatial(x: np.ndarray, pad: PadMode) -> np.ndarray:
    if pad.amount == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(pad.amount, pad.amount)] * 2
    mode = "wrap" if pad.kind == "circular" else "constant"
    return np.pad(x, width, mode=mode)


def _unpad_adjoint(gp: np.ndarray, pad: PadMode, h: int, w: int) -> np.ndarray:
    """Adjoint of `_pad_spatial`: fold padded-border gradient back inside."""
    p = pad.amount
    if p == 0:
        return gp
    if pad.kind == "zeros":
        return gp[..., p : p + h, p : p + w]
    if p > min(h, w):
        raise ShapeError("circular pad wider than the input is unsupported")
    g = gp[..., p : p + h, :].copy()
    g[..., h - p :, :] += gp[..., :p, :]
    g[..., :p, :] += gp[..., p + h :, :]
    out = g[..., :, p : p + w].copy()
    out[..., :, w - p :] += g[..., :, :p]
    out[..., :, :p] += g[..., :, p + w :]
    return out


# -- arithmetic ----------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = a.data + b.data

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._from_op(out_data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = a.data - b.data

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._from_op(out_data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = a.data * b.data

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out_data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = a.data / b.data

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(out_data, (a, b), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-d operands or 3-d operands with equal batch."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul needs matching 2d/3d ranks, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b._accumulate(a.data.swapaxes(-1, -2) @ g)

    return Tensor._from_op(out_data, (a, b), grad_fn)


def transpose(t: Tensor, axes=None) -> Tensor:
    t = _as_tensor(t)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(t.ndim)))
    out_data = np.ascontiguousarray(t.data.transpose(axes))
    inv = np.argsort(axes)

    def grad_fn(g):
        if t.requires_grad:
            t._accumulate(g.transpose(inv))

    return Tensor._from_op(out_data, (t,), grad_fn)


def reshape(t: Tensor, shape) -> Tensor:
    t = _as_tensor(t)
    out_data = t.data.reshape(shape)

    def grad_fn(g):
        if t.requires_grad:
            t._accumulate(g.reshape(t.shape))

    return Tensor._from_op(out_data, (t,), grad_fn)


def tensor_slice(t: Tensor, idx) -> Tensor:
    """Basic slicing (views copied); gradient scatters back into place."""
    t = _as_tensor(t)
    out_data = np.ascontiguousarray(t.data[idx])

    def grad_fn(g):
        if t.requires_grad:
            full = np.zeros_like(t.data)
            full[idx] += g
            t._accumulate(full)

    return Tensor._from_op(out_data, (t,), grad_fn)


def sum_(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    out_data = t.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if not t.requires_grad:
            return
        if axis is None:
            t._accumulate(np.broadcast_to(g, t.shape).astype(t.data.dtype))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        t._accumulate(np.broadcast_to(g, t.shape).astype(t.data.dtype))

    return Tensor._from_op(np.asarray(out_data), (t,), grad_fn)


def mean_(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    n = t.size if axis is None else t.shape[axis]
    return mul(sum_(t, axis=axis, keepdims=keepdims), 1.0 / n)


def abs_(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    out_data = np.abs(t.data)
    sign = np.sign(t.data)

    def grad_fn(g):
        if t.requires_grad:
            t._accumulate(g * sign)

    return Tensor._from_op(out_data, (t,), grad_fn)


def exp(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    out_data = np.exp(t.data)

    def grad_fn(g):
        if t.requires_grad:
            t._accumulate(g * out_data)

    return Tensor._from_op(out_data, (t,), grad_fn)


def log(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    out_data = np.log(t.data)

    def grad_fn(g):
        if t.requires_grad:
            t._accumulate(g / t.data)

    return Tensor._from_op(out_data, (t,), grad_fn)


def sqrt(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    out_data = np.sqrt(t.data)

    def grad_fn(g):
        if t.requires_grad:
            t._accumulate(g * 0.5 / out_data)

    return Tensor._from_op(out_data, (t,), grad_fn)


def maximum(a, b) -> Tensor:
    """Elementwise max; exact ties split the gradient evenly."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = np.maximum(a.data, b.data)
    wa = np.where(a.data > b.data, 1.0, np.where(a.data < b.data, 0.0, 0.5)).astype(out_data.dtype)

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * wa, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * (1.0 - wa), b.shape))

    return Tensor._from_op(out_data, (a, b), grad_fn)


def minimum(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = np.minimum(a.data, b.data)
    wa = np.where(a.data < b.data, 1.0, np.where(a.data > b.data, 0.0, 0.5)).astype(out_data.dtype)

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * wa, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * (1.0 - wa), b.shape))

    return Tensor._from_op(out_data, (a, b), grad_fn)


def clip(t: Tensor, lo: float, hi: float) -> Tensor:
    t = _as_tensor(t)
    out_data = np.clip(t.data, lo, hi)
    inside = (t.data >= lo) & (t.data <= hi)

    def grad_fn(g):
        if t.requires_grad:
            t._accumulate(g * inside)

    return Tensor._from_op(out_data, (t,), grad_fn)


# -- activations ----------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def relu(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    out_data = np.maximum(t.data, 0.0)

    def grad_fn(g):
        if t.requires_grad:
            t._accumulate(g * (t.data > 0))

    return Tensor._from_op(out_data, (t,), grad_fn)


def gelu(t: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    t = _as_tensor(t)
    x = t.data
    x2 = x * x
    th = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    half_1p = 0.5 * (1.0 + th)
    out_data = x * half_1p

    def grad_fn(g):
        if t.requires_grad:
            d_inner = _GELU_C * (1.0 + 0.134145 * x2)
            t._accumulate(g * (half_1p + 0.5 * x * (1.0 - th * th) * d_inner))

    return Tensor._from_op(out_data, (t,), grad_fn)


def sigmoid(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    x = t.data
    e = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def grad_fn(g):
        if t.requires_grad:
            t._accumulate(g * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (t,), grad_fn)


def softmax_last_dim(t: Tensor) -> Tensor:
    """Softmax over the trailing axis, stabilized by max subtraction."""
    t = _as_tensor(t)
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        if t.requires_grad:
            dot = (g * s).sum(axis=-1, keepdims=True)
            t._accumulate(s * (g - dot))

    return Tensor._from_op(s, (t,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalize `axis` to zero mean / unit population variance, then affine.

    `gamma`/`beta` are 1-d with the size of `axis` and broadcast across the
    remaining dimensions.
    """
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, x)
    beta = _as_tensor(beta, x)
    ax = axis % x.ndim
    c = x.shape[ax]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine must have shape ({c},)")
    bshape = [1] * x.ndim
    bshape[ax] = c
    gb = gamma.data.reshape(bshape)
    bb = beta.data.reshape(bshape)

    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gb + bb

    def grad_fn(g):
        if gamma.requires_grad:
            red = tuple(i for i in range(x.ndim) if i != ax)
            gamma._accumulate((g * xhat).sum(axis=red))
        if beta.requires_grad:
            red = tuple(i for i in range(x.ndim) if i != ax)
            beta._accumulate(g.sum(axis=red))
        if x.requires_grad:
            dxhat = g * gb
            m1 = dxhat.mean(axis=ax, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=ax, keepdims=True)
            x._accumulate(inv * (dxhat - m1 - xhat * m2))

    return Tensor._from_op(out_data, (x, gamma, beta), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the trailing feature axis: x[..., din] -> [..., dout]."""
    x = _as_tensor(x)
    weight = _as_tensor(weight, x)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: {x.shape} with weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        bias = _as_tensor(bias, x)
        out = out + bias.data
    out_data = out.reshape(*lead, weight.shape[1])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accumulate((g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            weight._accumulate(x2.T @ g2)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return Tensor._from_op(out_data, parents, grad_fn)


# -- convolutions ----------------------------------------------------------


def _conv_out_extent(size: int, k: int, stride: int, p: int) -> int:
    return (size + 2 * p - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: PadMode = PadMode.valid()) -> Tensor:
    """2-d convolution (cross-correlation) on a CHW map, im2col-backed.

    x: [c_in, h, w]; weight: [c_out, c_in, k, k]; output [c_out, h', w'] with
    h' = floor((h + 2p - k)/stride) + 1.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight, x)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects CHW input and OIKK weight, got {x.shape}, {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("conv2d kernels must be square")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[0]} vs weight {c_in}")
    h, w = x.shape[1:]
    p = pad.amount
    if h + 2 * p < k or w + 2 * p < k:
        raise ShapeError(f"kernel {k} larger than padded input {h + 2 * p}x{w + 2 * p}")

    xp = _pad_spatial(x.data, pad)
    ho = _conv_out_extent(h, k, stride, p)
    wo = _conv_out_extent(w, k, stride, p)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [c_in, ho, wo, k, k]
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c_in * k * k)
    wmat = weight.data.reshape(c_out, c_in * k * k)
    out = cols @ wmat.T
    if bias is not None:
        bias = _as_tensor(bias, x)
        out = out + bias.data
    out_data = np.ascontiguousarray(out.T).reshape(c_out, ho, wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gmat = g.reshape(c_out, ho * wo).T  # [ho*wo, c_out]
        if weight.requires_grad:
            weight._accumulate((gmat.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(ho, wo, c_in, k, k).transpose(2, 0, 1, 3, 4)
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, ki : ki + (ho - 1) * stride + 1 : stride,
                        kj : kj + (wo - 1) * stride + 1 : stride] += gcols[:, :, :, ki, kj]
            x._accumulate(_unpad_adjoint(gxp, pad, h, w))

    return Tensor._from_op(out_data, parents, grad_fn)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     pad: PadMode = PadMode.zeros(1)) -> Tensor:
    """Per-channel 3x3 convolution at stride 1 (shape preserved for p=1)."""
    x = _as_tensor(x)
    weight = _as_tensor(weight, x)
    if weight.ndim == 4:
        if weight.shape[1] != 1:
            raise ShapeError("depthwise weight must be [c, 1, k, k]")
        wk = weight.data[:, 0]
    elif weight.ndim == 3:
        wk = weight.data
    else:
        raise ShapeError(f"depthwise weight rank {weight.ndim}")
    c, k, k2 = wk.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError("depthwise kernels must be square and odd")
    if x.ndim != 3 or x.shape[0] != c:
        raise ShapeError(f"depthwise channel mismatch: {x.shape} vs {wk.shape}")
    h, w = x.shape[1:]
    p = pad.amount
    xp = _pad_spatial(x.data, pad)
    ho = h + 2 * p - k + 1
    wo = w + 2 * p - k + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("kernel larger than padded input")
    out_data = np.zeros((c, ho, wo), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            out_data += xp[:, ki : ki + ho, kj : kj + wo] * wk[:, ki, kj][:, None, None]
    if bias is not None:
        bias = _as_tensor(bias, x)
        out_data = out_data + bias.data[:, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        if weight.requires_grad:
            gw = np.empty((c, k, k), dtype=xp.dtype)
            for ki in range(k):
                for kj in range(k):
                    gw[:, ki, kj] = (xp[:, ki : ki + ho, kj : kj + wo] * g).sum(axis=(1, 2))
            weight._accumulate(gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, ki : ki + ho, kj : kj + wo] += g * wk[:, ki, kj][:, None, None]
            x._accumulate(_unpad_adjoint(gxp, pad, h, w))

    return Tensor._from_op(out_data, parents, grad_fn)


def depthwise_xcorr(template: Tensor, search: Tensor, pad: PadMode = PadMode.valid()) -> Tensor:
    """Per-channel cross-correlation with the template as a dynamic kernel.

    template: [c, hz, wz]; search: [c, hx, wx]; output
    [c, hx + 2p - hz + 1, wx + 2p - wz + 1].  Differentiable in both inputs.
    """
    template = _as_tensor(template)
    search = _as_tensor(search, template)
    if template.ndim != 3 or search.ndim != 3 or template.shape[0] != search.shape[0]:
        raise ShapeError(f"xcorr operands disagree: {template.shape} vs {search.shape}")
    c, hz, wz = template.shape
    xp = _pad_spatial(search.data, pad)
    if xp.shape[1] < hz or xp.shape[2] < wz:
        raise ShapeError("template larger than padded search region")
    ho = xp.shape[1] - hz + 1
    wo = xp.shape[2] - wz + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (hz, wz), axis=(1, 2))
    out_data = np.einsum("chwab,cab->chw", win, template.data, optimize=True)

    def grad_fn(g):
        if template.requires_grad:
            template._accumulate(np.einsum("chwab,chw->cab", win, g, optimize=True))
        if search.requires_grad:
            gxp = np.zeros_like(xp)
            for a in range(hz):
                for b in range(wz):
                    gxp[:, a : a + ho, b : b + wo] += g * template.data[:, a, b][:, None, None]
            search._accumulate(_unpad_adjoint(gxp, pad, search.shape[1], search.shape[2]))

    return Tensor._from_op(out_data, (template, search), grad_fn)


# -- backward pass ----------------------------------------------------------


def _topo_order(root: Tensor) -> list:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar; accumulates into `.grad` fields.

    Leaf tensors keep their gradient across calls (so per-example losses in
    a batch may be backpropagated one after another); intermediate nodes are
    discarded with the graph.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# -- verification -----------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def ok(self) -> bool:
        return all(e.max_rel_err < self.tol for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def summary(self) -> str:
        lines = [f"grad check tol={self.tol:g} -> {'PASS' if self.ok else 'FAIL'}"]
        for e in self.entries:
            lines.append(f"  {e.name}: max rel err {e.max_rel_err:.3e} over {e.checked} entries")
        return "\n".join(lines)


def grad_check(fn, params: dict, tol: float = 1e-4, step: float = 1e-5,
               max_entries: int | None = None, rng=None) -> GradCheckReport:
    """Compare analytic grads of `fn()` against central finite differences.

    `fn` rebuilds the scalar loss from the current parameter values each
    call.  Parameters should be float64 for headroom.  With `max_entries`
    set, a random subset of each parameter's entries is probed.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    zero_grads(params.values())
    loss = fn()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                f_plus = fn().item()
                flat[i] = orig - step
                f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            a = analytic[name].reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
        report.entries.append(GradCheckEntry(name, worst, len(idxs)))
    return report


def truncated_normal(rng, shape, std: float = 0.02, bound: float = 2.0, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) with resampling outside +/- bound*std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)

"""Dense tensors with a small reverse-mode autodiff engine.

Every layer of the network is expressed with the functions in this module.
Arrays are plain numpy buffers; a :class:`Tensor` adds the gradient slot and
the closure that propagates a vector-Jacobian product to its parents.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor", "ConvSpec", "BatchNormState", "NonFiniteError",
    "tensor", "conv2d", "deconv2d", "batchnorm2d", "relu", "maxpool2d",
    "add", "sub", "mul", "square", "sum", "mean", "reshape", "transpose",
    "concat_channels", "softmax", "log_softmax", "sigmoid", "exp", "log",
    "backward", "save_tensor", "load_tensor", "write_tensor", "read_tensor",
    "set_check_finite",
]

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}

# NaN/Inf scan after every op; MTLNET_CHECK_FINITE=0 turns it off for speed.
_CHECK_FINITE = os.environ.get("MTLNET_CHECK_FINITE", "1") != "0"


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def set_check_finite(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def check_finite_enabled() -> bool:
    return _CHECK_FINITE


class Tensor:
    """N-d float array plus an optional gradient buffer.

    Tensors are treated as immutable; only ``grad`` changes after creation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, index):
        return getitem(self, index)


ArrayLike = Union[Tensor, np.ndarray, float, int]


def tensor(data, requires_grad: bool = False, dtype: str = "f64") -> Tensor:
    return Tensor(np.array(data, dtype=DTYPES[dtype]), requires_grad=requires_grad)


def _const(x: ArrayLike, like: np.ndarray) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=like.dtype)


def _make(data: np.ndarray, parents: Iterable[Tensor], fn) -> Tensor:
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError("non-finite value in op output")
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dt = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dt))


# --------------------------------------------------------------------------
# elementwise and structural ops


def add(x: ArrayLike, y: ArrayLike) -> Tensor:
    x = _as_tensor(x, y if isinstance(y, Tensor) else None)
    y = _as_tensor(y, x)
    if x.shape != y.shape and x.data.size != 1 and y.data.size != 1:
        raise ValueError(f"add: shape mismatch {x.shape} vs {y.shape}")
    out = x.data + y.data

    def bw(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _make(out, (x, y), bw)


def sub(x: ArrayLike, y: ArrayLike) -> Tensor:
    x = _as_tensor(x, y if isinstance(y, Tensor) else None)
    y = _as_tensor(y, x)
    if x.shape != y.shape and x.data.size != 1 and y.data.size != 1:
        raise ValueError(f"sub: shape mismatch {x.shape} vs {y.shape}")
    out = x.data - y.data

    def bw(g):
        return _unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)

    return _make(out, (x, y), bw)


def mul(x: ArrayLike, y: ArrayLike) -> Tensor:
    """Elementwise product; either side may be a scalar or a constant array."""
    x = _as_tensor(x, y if isinstance(y, Tensor) else None)
    y = _as_tensor(y, x)
    if x.shape != y.shape and x.data.size != 1 and y.data.size != 1:
        raise ValueError(f"mul: shape mismatch {x.shape} vs {y.shape}")
    xd, yd = x.data, y.data
    out = xd * yd

    def bw(g):
        gx = _unbroadcast(g * yd, x.shape) if x.requires_grad else None
        gy = _unbroadcast(g * xd, y.shape) if y.requires_grad else None
        return gx, gy

    return _make(out, (x, y), bw)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def square(x: Tensor) -> Tensor:
    xd = x.data

    def bw(g):
        return (2.0 * xd * g,)

    return _make(xd * xd, (x,), bw)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), bw)


def mean(x: Tensor) -> Tensor:
    return mul(sum(x), 1.0 / x.data.size)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), bw)


def getitem(x: Tensor, index) -> Tensor:
    shape, dt = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        full[index] = g
        return (full,)

    return _make(np.array(x.data[index]), (x,), bw)


def concat_channels(x: Tensor, y: Tensor) -> Tensor:
    if x.ndim != y.ndim or x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ValueError(f"concat_channels: incompatible {x.shape} and {y.shape}")
    c = x.shape[1]

    def bw(g):
        return g[:, :c], g[:, c:]

    return _make(np.concatenate([x.data, y.data], axis=1), (x, y), bw)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype, copy=False)

    def bw(g):
        return (g * pos,)

    return _make(out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _make(out, (x,), bw)


def log(x: Tensor) -> Tensor:
    xd = x.data

    def bw(g):
        return (g / xd,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make(out, (x,), bw)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), bw)


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = _softmax_np(x.data, axis)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


# --------------------------------------------------------------------------
# convolution family


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    has_bias: bool = False

    def __post_init__(self):
        if self.in_ch <= 0 or self.out_ch <= 0:
            raise ValueError("channel counts must be positive")
        if min(self.kernel) <= 0 or min(self.stride) <= 0 or min(self.padding) < 0:
            raise ValueError(f"invalid kernel/stride/padding in {self}")

    def output_hw(self, h: int, w: int) -> tuple:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        if ho < 1 or wo < 1 or h + 2 * ph < kh or w + 2 * pw < kw:
            raise ValueError(f"non-positive output size for input {h}x{w} with {self}")
        return ho, wo


def _pad(a: np.ndarray, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    """Constant-pad the two spatial axes of an NCHW array (cheaper than np.pad)."""
    n, c, h, w = a.shape
    out = np.full((n, c, h + 2 * ph, w + 2 * pw), value, dtype=a.dtype)
    out[:, :, ph : ph + h, pw : pw + w] = a
    return out


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, ho, wo, kh, kw) strided view of a padded NCHW array."""
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Cross-correlation with zero padding, NCHW input and OCkk weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    n, c, h, wd = x.shape
    kh, kw = spec.kernel
    if c != spec.in_ch or w.shape != (spec.out_ch, spec.in_ch, kh, kw):
        raise ValueError(f"conv2d: shapes {x.shape}, {w.shape} inconsistent with {spec}")
    if b is not None and b.shape != (spec.out_ch,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({spec.out_ch},)")
    ho, wo = spec.output_hw(h, wd)
    (sh, sw), (ph, pw) = spec.stride, spec.padding

    xp = _pad(x.data, ph, pw) if ph or pw else x.data
    if kh == 1 and kw == 1:
        cols = xp[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
        out = np.tensordot(w.data[:, :, 0, 0], cols, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        cols = _windows(xp, kh, kw, sh, sw, ho, wo)
        out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gx = gw = gb = None
        if w.requires_grad:
            if kh == 1 and kw == 1:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            else:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            if kh == 1 and kw == 1:
                gxp[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw] = np.tensordot(
                    w.data[:, :, 0, 0], g, axes=([0], [1])
                ).transpose(1, 0, 2, 3)
            else:
                gcols = np.tensordot(g, w.data, axes=([1], [0]))  # N,ho,wo,C,kh,kw
                gcols = gcols.transpose(0, 3, 4, 5, 1, 2)  # N,C,kh,kw,ho,wo
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += gcols[:, :, i, j]
            gx = gxp[:, :, ph : ph + h, pw : pw + wd] if (ph or pw) else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def deconv_crop(kernel: int, stride: int) -> int:
    """Per-side crop for the two supported transposed-conv configurations.

    ``kernel == stride`` needs no crop; ``kernel == 2*stride`` with even stride
    crops ``stride // 2``. Both give an output of exactly ``H * stride``.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kernel == stride:
        return 0
    if kernel == 2 * stride and stride % 2 == 0:
        return stride // 2
    raise ValueError(f"unsupported deconv configuration kernel={kernel} stride={stride}")


def deconv2d(x: Tensor, w: Tensor, stride: int, b: Optional[Tensor] = None) -> Tensor:
    """Transposed convolution; weight layout (C_in, C_out, k, k)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("deconv2d expects 4-D input and weight")
    n, c, h, wd = x.shape
    ci, o, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"deconv2d: input has {c} channels, weight expects {ci}")
    if kh != kw:
        raise ValueError("deconv2d: square kernels only")
    crop = deconv_crop(kh, stride)
    s = stride
    m = kh // s  # kernel spans m x m blocks of s x s output pixels
    fh, fw = (h - 1 + m) * s, (wd - 1 + m) * s

    # output pixel (y + a) * s + u receives x[y] * w[a * s + u]; summing m*m
    # shifted block images avoids a k*k scatter loop
    cols = np.tensordot(x.data, w.data, axes=([1], [0]))  # N,H,W,O,k,k
    cols = cols.reshape(n, h, wd, o, m, s, m, s)
    full = np.zeros((n, o, h - 1 + m, s, wd - 1 + m, s), dtype=x.dtype)
    for a in range(m):
        for bb in range(m):
            full[:, :, a : a + h, :, bb : bb + wd, :] += cols[:, :, :, :, a, :, bb, :].transpose(0, 3, 1, 4, 2, 5)
    full = full.reshape(n, o, fh, fw)
    out = full[:, :, crop : crop + h * s, crop : crop + wd * s]
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gfull = np.zeros((n, o, fh, fw), dtype=x.dtype)
        gfull[:, :, crop : crop + h * s, crop : crop + wd * s] = g
        gblk = gfull.reshape(n, o, h - 1 + m, s, wd - 1 + m, s)
        gx = np.zeros(x.shape, dtype=x.dtype) if x.requires_grad else None
        gw = np.zeros(w.shape, dtype=w.dtype) if w.requires_grad else None
        for a in range(m):
            for bb in range(m):
                gab = gblk[:, :, a : a + h, :, bb : bb + wd, :]  # N,O,H,u,W,v
                if gx is not None:
                    wab = w.data[:, :, a * s : (a + 1) * s, bb * s : (bb + 1) * s]  # C,O,u,v
                    gx += np.tensordot(gab, wab, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
                if gw is not None:
                    gw[:, :, a * s : (a + 1) * s, bb * s : (bb + 1) * s] = np.tensordot(
                        x.data, gab, axes=([0, 2, 3], [0, 2, 4]))
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def maxpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Window max; padding uses -inf. Ties send the gradient to the first
    maximum in row-major window order."""
    n, c, h, wd = x.shape
    k, s, p = kernel, stride, padding
    if p * 2 > k:
        raise ValueError("maxpool2d: padding larger than half the kernel")
    ho, wo = (h + 2 * p - k) // s + 1, (wd + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"maxpool2d: window {k} does not fit input {h}x{wd}")
    xp = _pad(x.data, p, p, -np.inf) if p else x.data
    win = _windows(xp, k, k, s, s, ho, wo).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for pos in range(k * k):
            i, j = divmod(pos, k)
            gxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += np.where(idx == pos, g, 0)
        return (gxp[:, :, p : p + h, p : p + wd] if p else gxp,)

    return _make(np.ascontiguousarray(out), (x,), bw)


@dataclass
class BatchNormState:
    """Running statistics; replaced (not mutated) by a train-mode call."""

    mean: np.ndarray
    var: np.ndarray


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> tuple[Tensor, BatchNormState]:
    """Per-channel normalisation of an NCHW tensor.

    Returns the output and the running statistics to carry forward (the input
    ``state`` itself in eval mode). Running variance uses the unbiased
    estimator; normalisation uses the biased one.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    n, c, h, wd = x.shape
    m = n * h * wd
    if m == 0:
        raise ValueError("batchnorm2d: zero-size channel")
    g = gamma.data[None, :, None, None]
    if mode == "eval":
        inv = 1.0 / np.sqrt(state.var + eps)
        xhat = (x.data - state.mean[None, :, None, None]) * inv[None, :, None, None]
        out = g * xhat + beta.data[None, :, None, None]

        def bw_eval(gr):
            gx = gr * g * inv[None, :, None, None]
            return gx, (gr * xhat).sum(axis=(0, 2, 3)), gr.sum(axis=(0, 2, 3))

        return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), bw_eval), state

    mu = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mu[None, :, None, None]
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[None, :, None, None]
    out = g * xhat + beta.data[None, :, None, None]
    unbiased = var * (m / (m - 1)) if m > 1 else var
    new_state = BatchNormState(
        mean=((1 - momentum) * state.mean + momentum * mu).astype(state.mean.dtype),
        var=((1 - momentum) * state.var + momentum * unbiased).astype(state.var.dtype),
    )

    def bw(gr):
        gbeta = gr.sum(axis=(0, 2, 3))
        ggamma = (gr * xhat).sum(axis=(0, 2, 3))
        gxhat = gr * g
        gx = (inv[None, :, None, None] / m) * (
            m * gxhat
            - gxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
        return gx, ggamma, gbeta

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), bw), new_state


# --------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor
    with ``requires_grad``. Repeated calls add to existing gradients."""
    if grad is None:
        if loss.data.size != 1:
            raise ValueError("backward() needs a scalar loss or an explicit output gradient")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    pending = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# --------------------------------------------------------------------------
# .ten container

_MAGIC = b"MTLT"
_VERSION = 1


def write_tensor(fh, arr: Union[Tensor, np.ndarray]) -> None:
    a = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    if a.dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {a.dtype}")
    fh.write(_MAGIC)
    fh.write(struct.pack("<IBB", _VERSION, _DTYPE_CODES[a.dtype], a.ndim))
    fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fh.write(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated tensor payload")
    return buf


def read_tensor(fh) -> np.ndarray:
    if _read_exact(fh, 4) != _MAGIC:
        raise ValueError("bad tensor magic")
    version, code, ndim = struct.unpack("<IBB", _read_exact(fh, 6))
    if version != _VERSION:
        raise ValueError(f"unsupported tensor version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    dt = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(fh, count * dt.itemsize)
    return np.frombuffer(raw, dtype=dt.newbyteorder("<")).astype(dt).reshape(shape)


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def tensor_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()

"""Dense float tensors with tape-based reverse-mode differentiation.

Tensors wrap a numpy array (float32 by default). Operations are pure: they
never mutate their inputs. When a :class:`Tape` is active and an operand
requires gradients, the operation is appended to the tape together with a
closure computing the vector-Jacobian product, so that
:meth:`Tape.gradient` can replay it in reverse.

Outside of a tape nothing is recorded, which keeps inference cheap.

Layout convention: images and feature maps are ``C x H x W`` with an optional
leading batch axis, so channel operations act on axis ``-3``.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

_TAPES: list["Tape"] = []


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad

    # -- basic attributes -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=None)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
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
        return scale(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float32
    return Tensor(x, dtype=dtype)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    whose inputs require gradients are recorded in execution order, which is
    a topological order of the computation graph.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each of ``sources``.

        Sources that the loss does not depend on receive zero gradients.
        """
        if loss.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            parent_grads = vjp(g)
            for parent, pg in zip(parents, parent_grads):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [
            np.asarray(grads.get(id(s), np.zeros_like(s.data)), dtype=s.dtype).reshape(s.shape)
            for s in sources
        ]


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
    """Replay ``tape`` from ``loss`` and return ``{param: gradient}``."""
    params = list(params)
    return dict(zip(params, tape.gradient(loss, params)))


def recording() -> bool:
    return bool(_TAPES)


def _result(data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    out = Tensor(data, dtype=None)
    if _TAPES and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPES[-1].records.append((out, parents, vjp))
    return out


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) and np.ndim(x) == 0


def _check_binary(a, b, name: str) -> None:
    if _is_scalar(a) or _is_scalar(b):
        return
    sa, sb = np.shape(_data(a)), np.shape(_data(b))
    if sa != sb and sa != () and sb != ():
        raise ValueError(f"{name}: shape mismatch {sa} vs {sb}")


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape == () else g


# -- elementwise binary ---------------------------------------------------------
def add(a, b) -> Tensor:
    _check_binary(a, b, "add")
    sa, sb = np.shape(_data(a)), np.shape(_data(b))
    return _result(
        np.add(_data(a), _data(b)),
        (a, b),
        lambda g: (_sum_to(g, sa), _sum_to(g, sb)),
    )


def sub(a, b) -> Tensor:
    _check_binary(a, b, "sub")
    sa, sb = np.shape(_data(a)), np.shape(_data(b))
    return _result(
        np.subtract(_data(a), _data(b)),
        (a, b),
        lambda g: (_sum_to(g, sa), _sum_to(-g, sb)),
    )


def mul(a, b) -> Tensor:
    _check_binary(a, b, "mul")
    da, db = _data(a), _data(b)
    sa, sb = np.shape(da), np.shape(db)
    return _result(
        np.multiply(da, db),
        (a, b),
        lambda g: (_sum_to(g * db, sa), _sum_to(g * da, sb)),
    )


def div(a, b) -> Tensor:
    _check_binary(a, b, "div")
    da, db = _data(a), _data(b)
    sa, sb = np.shape(da), np.shape(db)
    out = np.divide(da, db)
    return _result(
        out,
        (a, b),
        lambda g: (_sum_to(g / db, sa), _sum_to(-g * out / db, sb)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return _result(a.data * a.dtype.type(factor), (a,), lambda g: (g * factor,))


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    """Explicit broadcast; the gradient is summed back over expanded axes."""
    src = a.shape
    out = np.broadcast_to(a.data, shape)

    def vjp(g):
        lead = g.ndim - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _result(np.ascontiguousarray(out), (a,), vjp)


# -- elementwise unary ----------------------------------------------------------
def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0, a.data).astype(a.dtype)
    return _result(out, (a,), lambda g: (g * special.expit(a.data),))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    if not 0 <= slope < 1:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    pos = a.data >= 0
    factor = np.where(pos, 1, slope).astype(a.dtype)
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = np.power(a.data, exponent)
    return _result(
        out, (a,), lambda g: (g * exponent * np.power(a.data, exponent - 1),)
    )


def clamp_min(a: Tensor, bound: float) -> Tensor:
    """max(a, bound); gradient passes only where the input is above the bound. NaN propagates."""
    keep = ~(a.data < bound)
    out = np.where(keep, a.data, a.dtype.type(bound))
    return _result(out, (a,), lambda g: (g * keep,))


def normal_cdf(a: Tensor) -> Tensor:
    """Standard normal cumulative distribution function."""
    out = special.ndtr(a.data).astype(a.dtype)
    pdf = np.exp(-0.5 * a.data * a.data) / np.sqrt(2 * np.pi)
    return _result(out, (a,), lambda g: (g * pdf.astype(a.dtype),))


def round_half_away(x):
    """Round half away from zero. Works on arrays and returns a new array.

    Negative zero is normalized to +0 so equal latents are also byte-equal.
    """
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5) + 0.0


def tround(a: Tensor) -> Tensor:
    """Quantize to integers; treated as piecewise constant (zero gradient)."""
    return _result(
        round_half_away(a.data).astype(a.dtype), (a,), lambda g: (np.zeros_like(g),)
    )


# -- reductions and shape ops ------------------------------------------------------
def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis, dtype=np.float64).astype(a.dtype)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    """Mean with float64 accumulation and division, so averaging equal values is exact."""
    shape = a.shape
    count = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    out = (np.sum(a.data, axis=axis, dtype=np.float64) / count).astype(a.dtype)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / a.dtype.type(count), shape),)

    return _result(np.asarray(out), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result(
        np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),)
    )


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -3) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product following numpy ``matmul`` semantics."""
    da, db = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(db, -1, -2)
        gb = np.swapaxes(da, -1, -2) @ g
        return _unbatch(ga, da.shape), _unbatch(gb, db.shape)

    return _result(da @ db, (a, b), vjp)


def _unbatch(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def inverse(a: Tensor) -> Tensor:
    """Matrix inverse; gradient -A^-T G A^-T."""
    inv = np.linalg.inv(a.data.astype(np.float64))
    return _result(
        inv.astype(a.dtype), (a,), lambda g: ((-inv.T @ g @ inv.T).astype(a.dtype),)
    )


# -- convolution family --------------------------------------------------------------
def _as_batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected CxHxW or BxCxHxW input, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Reductions are accumulated in float64 and the result is cast back to the
    input dtype.
    """
    xb, squeeze = _as_batched(x.data)
    w = weight.data
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"weight must be OxCxKxK, got {w.shape}")
    out_c, in_c, k, _ = w.shape
    if xb.shape[1] != in_c:
        raise ValueError(
            f"conv2d: input shape {x.shape} has {xb.shape[1]} channels but weight "
            f"shape {w.shape} expects {in_c}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (out_c,):
        raise ValueError(f"bias shape {bias.shape} does not match {out_c} output channels")
    dtype = x.dtype
    B, C, H, W = xb.shape
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: input {x.shape} too small for kernel {k}")
    w64 = w.astype(np.float64).reshape(out_c, in_c * k * k)
    if k == 1 and padding == 0:
        src = xb[:, :, ::stride, ::stride] if stride > 1 else xb
        cols = src.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, C).astype(np.float64)
    else:
        xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        # im2col rows ordered (b, ho, wo); columns ordered (c, ki, kj) like the weight
        cols = np.empty((B, Ho, Wo, C, k, k), np.float64)
        cols[...] = win.transpose(0, 2, 3, 1, 4, 5)
        cols = cols.reshape(B * Ho * Wo, C * k * k)
    out = cols @ w64.T
    if bias is not None:
        out += bias.data.astype(np.float64)
    result = out.reshape(B, Ho, Wo, out_c).transpose(0, 3, 1, 2).astype(dtype)
    if squeeze:
        result = result[0]

    def vjp(g):
        gb = (g[None] if squeeze else g).transpose(0, 2, 3, 1).reshape(B * Ho * Wo, out_c)
        gb = gb.astype(np.float64)
        grad_b = None if bias is None else gb.sum(axis=0).astype(bias.dtype)
        grad_w = (gb.T @ cols).reshape(w.shape).astype(weight.dtype)
        gcols = (gb @ w64).reshape(B, Ho, Wo, C, k, k)
        if k == 1 and padding == 0:
            gx_s = gcols[..., 0, 0].transpose(0, 3, 1, 2)
            if stride == 1:
                gx = gx_s
            else:
                gx = np.zeros((B, C, H, W))
                gx[:, :, ::stride, ::stride] = gx_s
        else:
            gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
            gcols = gcols.transpose(0, 3, 4, 5, 1, 2)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W]
        gx = gx.astype(dtype)
        if squeeze:
            gx = gx[0]
        return gx, grad_w, grad_b

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(result, parents, vjp)


def pixel_shuffle_down(x: Tensor) -> Tensor:
    """Space-to-depth by 2: each 2x2 block becomes 4 channels.

    Channel ``4*c + k`` of the output holds position ``k`` (top-left,
    top-right, bottom-left, bottom-right) of input channel ``c``.
    """
    *lead, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"pixel_shuffle_down needs even height and width, got {x.shape}")
    n = len(lead)
    t = x.data.reshape(*lead, C, H // 2, 2, W // 2, 2)
    perm = tuple(range(n)) + (n, n + 2, n + 4, n + 1, n + 3)
    out = t.transpose(perm).reshape(*lead, 4 * C, H // 2, W // 2)
    return _result(np.ascontiguousarray(out), (x,), lambda g: (_shuffle_up(g),))


def _shuffle_up(a: np.ndarray) -> np.ndarray:
    *lead, C4, h, w = a.shape
    if C4 % 4:
        raise ValueError(f"pixel_shuffle_up needs a channel count divisible by 4, got {a.shape}")
    n = len(lead)
    C = C4 // 4
    t = a.reshape(*lead, C, 2, 2, h, w)
    perm = tuple(range(n)) + (n, n + 3, n + 1, n + 4, n + 2)
    return np.ascontiguousarray(t.transpose(perm).reshape(*lead, C, 2 * h, 2 * w))


def _shuffle_down(a: np.ndarray) -> np.ndarray:
    *lead, C, H, W = a.shape
    n = len(lead)
    t = a.reshape(*lead, C, H // 2, 2, W // 2, 2)
    perm = tuple(range(n)) + (n, n + 2, n + 4, n + 1, n + 3)
    return np.ascontiguousarray(t.transpose(perm).reshape(*lead, 4 * C, H // 2, W // 2))


def pixel_shuffle_up(x: Tensor) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle_down`."""
    return _result(_shuffle_up(x.data), (x,), lambda g: (_shuffle_down(g),))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def vjp(g):
        *lead, H, W = g.shape
        return (g.reshape(*lead, H // factor, factor, W // factor, factor).sum(axis=(-3, -1)),)

    return _result(out, (x,), vjp)

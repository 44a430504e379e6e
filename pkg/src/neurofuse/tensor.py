"""Dense tensors with reverse-mode autodiff for the layer set used by the classifier.

Values are numpy arrays in NHWC layout (batch, height, width, channels) for
4-D data. Every op is pure: it returns a fresh Tensor and, when any input
requires gradients, records a backward closure on a tape that ``backward()``
replays in reverse topological order. Ops on inputs that do not require
gradients skip the tape entirely, so frozen subgraphs run at plain numpy
speed.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

SUPPORTED_DTYPES = (np.float32, np.float64)


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense n-d array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- graph machinery ----------------------------------------------------

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Propagate gradients from this scalar back to every recorded input."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError(
                "backward() before a recorded forward pass: this value has no "
                "gradient tape (no trainable input contributed to it)"
            )
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
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise and reduction ops ------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward)


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)

    def backward(g):
        x._accumulate(g * (0.5 / data))

    return _make(data, (x,), backward)


def mean(x: Tensor, axes: tuple[int, ...], keepdims: bool = True) -> Tensor:
    data = x.data.mean(axis=axes, keepdims=keepdims)
    count = x.data.size // data.size

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g / count, x.shape).astype(x.dtype, copy=False))

    return _make(data, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))

    return _make(data, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make(data, (x,), backward)


def transpose_last2(x: Tensor) -> Tensor:
    data = np.swapaxes(x.data, -1, -2)

    def backward(g):
        x._accumulate(np.swapaxes(g, -1, -2))

    return _make(data, (x,), backward)


# -- activations -------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def backward(g):
        x._accumulate(g * (x.data > 0))

    return _make(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp never overflows on large finite inputs.
    d = x.data
    data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    data = data.astype(d.dtype, copy=False)

    def backward(g):
        x._accumulate(g * data * (1.0 - data))

    return _make(data, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        x._accumulate(data * (g - dot))

    return _make(data, (x,), backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[0] or a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul shapes do not chain: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: (N, i, j) @ (N, j, k) -> (N, i, k)."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"bmm shapes do not chain: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(data, (a, b), backward)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on (N, F) rows."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# -- convolution --------------------------------------------------------------


def _same_pads(extent: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-extent // stride)  # ceil
    total = max((out - 1) * stride + kernel - extent, 0)
    lo = total // 2  # floor on the leading edge, remainder trails
    return lo, total - lo


def _conv_geometry(h, w, kh, kw, stride, padding):
    if padding == "same":
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        if kh > h or kw > w:
            raise ValueError(f"kernel {kh}x{kw} exceeds input {h}x{w} with valid padding")
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    oh = (h + pt + pb - kh) // stride + 1
    ow = (w + pl + pr - kw) // stride + 1
    return pt, pb, pl, pr, oh, ow


def _window_view(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )


def _scatter_windows(dwin: np.ndarray, padded_shape, kh, kw, stride, oh, ow) -> np.ndarray:
    dx = np.zeros(padded_shape, dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + oh * stride : stride, j : j + ow * stride : stride, :] += dwin[:, :, :, i, j, :]
    return dx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D convolution, NHWC input against an (kh, kw, Cin, Cout) kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, kcin, cout = w.shape
    if cin != kcin:
        raise ValueError(f"conv2d channel mismatch: input has {cin} channels, kernel expects {kcin}")
    pt, pb, pl, pr, oh, ow = _conv_geometry(h, wd, kh, kw, stride, padding)
    xp = np.ascontiguousarray(np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))))
    cols = _window_view(xp, kh, kw, stride, oh, ow).reshape(n * oh * ow, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, oh, ow, cout)
    if b is not None:
        if b.shape != (cout,):
            raise ValueError(f"conv2d bias shape {b.shape} does not match {cout} output channels")
        out = out + b.data

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = g.reshape(n * oh * ow, cout)
        if w.requires_grad:
            w._accumulate((cols.T @ gmat).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            dwin = (gmat @ wmat.T).reshape(n, oh, ow, kh, kw, cin)
            dxp = _scatter_windows(dwin, xp.shape, kh, kw, stride, oh, ow)
            x._accumulate(dxp[:, pt : pt + h, pl : pl + wd, :])

    return _make(out, parents, backward)


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel spatial convolution with a (kh, kw, C, 1) kernel."""
    if w.data.ndim != 4 or w.shape[3] != 1:
        raise ValueError(f"depthwise kernel must be (kh, kw, C, 1), got {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, kc, _ = w.shape
    if cin != kc:
        raise ValueError(f"depthwise channel mismatch: input has {cin} channels, kernel expects {kc}")
    pt, pb, pl, pr, oh, ow = _conv_geometry(h, wd, kh, kw, stride, padding)
    xp = np.ascontiguousarray(np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))))
    win = _window_view(xp, kh, kw, stride, oh, ow)
    kern = w.data[:, :, :, 0]
    out = np.einsum("nhwije,ije->nhwe", win, kern, optimize=True)

    def backward(g):
        if w.requires_grad:
            dk = np.einsum("nhwije,nhwe->ije", win, g, optimize=True)
            w._accumulate(dk[:, :, :, None])
        if x.requires_grad:
            dwin = g[:, :, :, None, None, :] * kern[None, None, None, :, :, :]
            dxp = _scatter_windows(dwin, xp.shape, kh, kw, stride, oh, ow)
            x._accumulate(dxp[:, pt : pt + h, pl : pl + wd, :])

    return _make(out, (x, w), backward)


def depthwise_separable_conv(
    x: Tensor, dw: Tensor, pw: Tensor, b: Tensor | None = None, stride: int = 1, padding: str = "same"
) -> Tensor:
    """Depthwise spatial filter followed by a 1x1 cross-channel projection."""
    return conv2d(depthwise_conv2d(x, dw, stride=stride, padding=padding), pw, b, stride=1, padding="valid")


# -- pooling ------------------------------------------------------------------


def max_pool(x: Tensor, window: int, stride: int | None = None, padding: str = "valid") -> Tensor:
    stride = window if stride is None else stride
    n, h, w, c = x.shape
    if padding == "valid" and (window > h or window > w):
        raise ValueError(f"pool window {window} exceeds spatial extents {h}x{w}")
    pt, pb, pl, pr, oh, ow = _conv_geometry(h, w, window, window, stride, padding)
    fill = np.array(-np.inf, dtype=x.dtype)
    xp = np.ascontiguousarray(np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=fill))
    win = _window_view(xp, window, window, stride, oh, ow).reshape(n, oh, ow, window * window, c)
    flat_idx = win.argmax(axis=3)
    out = np.take_along_axis(win, flat_idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward(g):
        if not x.requires_grad:
            return
        ki, kj = flat_idx // window, flat_idx % window
        ni, oi, oj, ci = np.indices(flat_idx.shape)
        rows = oi * stride + ki
        cols = oj * stride + kj
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        np.add.at(dxp, (ni, rows, cols, ci), g)
        x._accumulate(dxp[:, pt : pt + h, pl : pl + w, :])

    return _make(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (N, H, W, C) -> (N, C)."""
    n, h, w, c = x.shape
    data = x.data.mean(axis=(1, 2))

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).astype(x.dtype, copy=False))

    return _make(data, (x,), backward)


# -- normalization ------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = 0.99,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over all leading axes, channels last.

    Train mode normalizes with batch statistics (biased variance) and updates
    the running arrays in place: running <- momentum*running + (1-momentum)*batch.
    That mutation is the one deliberate side effect in this module. Infer mode
    reads the running arrays and is batch-size independent.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    axes = tuple(range(x.data.ndim - 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("train-mode batch norm needs batch size >= 2")
        mu = mean(x, axes, keepdims=True)
        centered = sub(x, mu)
        var = mean(mul(centered, centered), axes, keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.data.reshape(-1)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.data.reshape(-1)
        inv = div(_wrap(1.0, x.dtype), sqrt(add(var, _wrap(eps, x.dtype))))
        return add(mul(mul(centered, inv), gamma), beta)
    scale = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
    shift = (-running_mean * scale).astype(x.dtype)
    return add(mul(x, mul(gamma, Tensor(scale))), add(mul(gamma, Tensor(shift)), beta))


# -- structure ----------------------------------------------------------------


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate NHWC tensors along the channel axis, argument order preserved."""
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    lead = xs[0].shape[:3]
    for t in xs[1:]:
        if t.shape[:3] != lead:
            raise ValueError(f"concat_channels spatial mismatch: {t.shape[:3]} vs {lead}")
    data = np.concatenate([t.data for t in xs], axis=-1)
    widths = [t.shape[-1] for t in xs]

    def backward(g):
        start = 0
        for t, width in zip(xs, widths):
            if t.requires_grad:
                t._accumulate(g[..., start : start + width])
            start += width

    return _make(data, tuple(xs), backward)


# -- loss ---------------------------------------------------------------------

LOG_CLAMP = 1e-12


def categorical_cross_entropy(probs: Tensor, onehot: Tensor) -> Tensor:
    """Mean negative log-likelihood of the true class, probabilities pre-softmaxed."""
    p, y = probs.data, onehot.data
    if p.shape != y.shape:
        raise ValueError(f"probability and one-hot shapes differ: {p.shape} vs {y.shape}")
    row_sums = p.sum(axis=-1)
    if not np.allclose(row_sums, 1.0, atol=1e-3):
        raise ValueError("probability rows do not sum to 1; apply softmax first")
    ones_per_row = (y == 1.0).sum(axis=-1)
    if not np.all(ones_per_row == 1) or not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("targets must be one-hot rows")
    n = p.shape[0]
    clamped = np.maximum(p, LOG_CLAMP)
    data = np.asarray(-(y * np.log(clamped)).sum() / n)

    def backward(g):
        if probs.requires_grad:
            dp = np.where(p > LOG_CLAMP, -y / clamped, 0.0) * (g / n)
            probs._accumulate(dp.astype(p.dtype, copy=False))

    return _make(data, (probs, onehot), backward)


# -- numerical checking -------------------------------------------------------


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = x.astype(np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(x)
        flat[i] = keep - h
        fm = f(x)
        flat[i] = keep
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def gradient_gap(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute gap between gradients, relative to the numeric gradient scale."""
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)

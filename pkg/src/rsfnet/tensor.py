"""Dense tensor engine with reverse-mode gradients.

Just enough operator coverage to express and train the fusion network:
conv2d (backend-dispatched hot kernel), channel-wise 1D convolution, batch
norm, bilinear resize, pooling, dense layers, and the elementwise suite.
Values live in row-major numpy buffers (float32 or float64); reductions
accumulate in float64 regardless of storage dtype.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import backend

SUPPORTED_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional array with optional gradient tracking.

    Tensors are immutable once built except for gradient accumulation;
    optimizers update leaf parameters in place between graphs.
    """

    __slots__ = ("data", "grad", "tracked", "_parents", "_backward_fn")

    def __init__(self, data, dtype=None, tracked: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.tracked = bool(tracked)
        self._parents = ()
        self._backward_fn = None

    # ---- introspection -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), tracked=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, tracked={self.tracked})"

    # ---- autograd ------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root.

        Accumulates d(self)/d(leaf) into the grad buffer of every tracked
        ancestor. Single-owner per graph: no concurrent backward calls.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar tensor, got shape {self.shape}")
        if not self.tracked:
            raise ValueError("backward on an untracked tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.tracked and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # ---- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, _as_tensor(1.0 / float(scalar), self.dtype))


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.tracked for p in parents):
        out.tracked = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_dtypes(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype.name} vs {b.dtype.name}")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


# ---- elementwise suite --------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b, "add")
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def bwd(g):
        if a.tracked:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.tracked:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b, "sub")
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def bwd(g):
        if a.tracked:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.tracked:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b, "mul")
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def bwd(g):
        if a.tracked:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.tracked:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at exactly 0

    def bwd(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    s[~pos] = ex / (1.0 + ex)

    def bwd(g):
        x._accumulate(g * s * (1.0 - s))

    return _make(s, (x,), bwd)


def log(x: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with `floor`, the argument is clamped from below."""
    if floor is not None:
        xc = np.maximum(x.data, floor)
        inside = x.data >= floor
    else:
        xc = x.data
        inside = True

    def bwd(g):
        x._accumulate(g * inside / xc)

    return _make(np.log(xc), (x,), bwd)


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise 0.5*x^2 for |x| < 1, |x| - 0.5 otherwise."""
    a = np.abs(x.data)
    quad = a < 1.0
    out_data = np.where(quad, 0.5 * x.data * x.data, a - 0.5)

    def bwd(g):
        x._accumulate(g * np.where(quad, x.data, np.sign(x.data)))

    return _make(out_data, (x,), bwd)


def channel_softmax(x: Tensor) -> Tensor:
    """Softmax over the channel axis of [N, C, H, W]."""
    if x.ndim != 4:
        raise ShapeError(f"channel_softmax: rank-4 input required, got rank {x.ndim}")
    d = x.data
    e = np.exp(d - d.max(axis=1, keepdims=True))
    s = (e / e.sum(axis=1, keepdims=True)).astype(x.dtype)

    def bwd(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        x._accumulate((s * (g - dot)).astype(x.dtype))

    return _make(s, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bwd)


def concat_channels(parts) -> Tensor:
    """Concatenate along the channel axis (axis -3 of CHW / NCHW tensors)."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels: empty input list")
    ref = parts[0]
    for p in parts[1:]:
        _check_dtypes(ref, p, "concat_channels")
        if p.ndim != ref.ndim or p.ndim < 3:
            raise ShapeError("concat_channels: operands must share rank >= 3")
        if p.shape[:-3] != ref.shape[:-3] or p.shape[-2:] != ref.shape[-2:]:
            raise ShapeError(
                f"concat_channels: non-channel extents differ ({ref.shape} vs {p.shape})"
            )
    axis = ref.ndim - 3
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.tracked:
                idx = [slice(None)] * ref.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _make(out_data, tuple(parts), bwd)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Inverse of concat_channels: a contiguous channel range."""
    if x.ndim < 3:
        raise ShapeError("slice_channels: rank >= 3 required")
    axis = x.ndim - 3
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        x._accumulate(gx)

    return _make(x.data[idx].copy(), (x,), bwd)


# ---- reductions (float64 accumulation) ----------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims).astype(x.dtype)

    def bwd(g):
        if axis is None:
            x._accumulate(np.full(x.shape, g.reshape(-1)[0], dtype=x.dtype))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(ge, x.shape).astype(x.dtype))

    return _make(np.asarray(out_data), (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= x.shape[ax]
    out_data = x.data.mean(axis=axis, dtype=np.float64, keepdims=keepdims).astype(x.dtype)

    def bwd(g):
        if axis is None:
            x._accumulate(np.full(x.shape, g.reshape(-1)[0] / count, dtype=x.dtype))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(ge / count, x.shape).astype(x.dtype))

    return _make(np.asarray(out_data), (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] arithmetic mean over each spatial plane."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: rank-4 input required, got rank {x.ndim}")
    return tmean(x, axis=(2, 3))


# ---- dense / convolution -------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """[N, I] @ weight[O, I].T (+ bias[O]) -> [N, O]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError("linear: x and weight must be rank 2")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input features {x.shape[1]} != weight in-features {weight.shape[1]}"
        )
    out_data = (x.data.astype(np.float64) @ weight.data.astype(np.float64).T).astype(x.dtype)
    if bias is not None:
        out_data = out_data + bias.data

    def bwd(g):
        g64 = g.astype(np.float64)
        if x.tracked:
            x._accumulate((g64 @ weight.data.astype(np.float64)).astype(x.dtype))
        if weight.tracked:
            weight._accumulate((g64.T @ x.data.astype(np.float64)).astype(x.dtype))
        if bias is not None and bias.tracked:
            bias._accumulate(g.sum(axis=0, dtype=np.float64).astype(x.dtype))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, bwd)


def conv2d_raw(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    stride: tuple[int, int],
    padding: tuple[int, int],
) -> Tensor:
    """2D cross-correlation (no kernel flip), NCHW layout."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input rank {x.ndim} != 4")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight rank {weight.ndim} != 4")
    _check_dtypes(x, weight, "conv2d")
    n, c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if c_in != wc_in:
        raise ShapeError(f"conv2d: input channels {c_in} != kernel in-channels {wc_in}")
    sh, sw = stride
    ph, pw = padding
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(
            f"conv2d: padded extents ({h + 2 * ph}, {w + 2 * pw}) smaller than kernel ({kh}, {kw})"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    out_data = backend.conv2d_forward(x.data, weight.data, (sh, sw), (ph, pw))
    if bias is not None:
        out_data += bias.data[None, :, None, None]

    def bwd(g):
        g = np.ascontiguousarray(g)
        if x.tracked:
            x._accumulate(backend.conv2d_backward_x(g, weight.data, x.shape, (sh, sw), (ph, pw)))
        if weight.tracked:
            weight._accumulate(
                backend.conv2d_backward_w(g, x.data, weight.shape, (sh, sw), (ph, pw))
            )
        if bias is not None and bias.tracked:
            bias._accumulate(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, bwd)


def conv1d_channel(v: Tensor, kernel: Tensor) -> Tensor:
    """Cross-correlate [N, C] along the channel axis, zero padded to length C."""
    if v.ndim != 2:
        raise ShapeError(f"conv1d_channel: rank-2 input required, got rank {v.ndim}")
    if kernel.ndim != 1:
        raise ShapeError("conv1d_channel: kernel must be rank 1")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"conv1d_channel: kernel size {k} must be odd")
    _check_dtypes(v, kernel, "conv1d_channel")
    r = (k - 1) // 2
    c = v.shape[1]
    vp = np.pad(v.data, ((0, 0), (r, r))).astype(np.float64)
    out64 = np.zeros((v.shape[0], c))
    for j in range(k):
        out64 += float(kernel.data[j]) * vp[:, j : j + c]
    out_data = out64.astype(v.dtype)

    def bwd(g):
        g64 = g.astype(np.float64)
        if v.tracked:
            gp = np.pad(g64, ((0, 0), (r, r)))
            dv = np.zeros((v.shape[0], c))
            for j in range(k):
                # output position i pulled input i + j - r
                dv += float(kernel.data[j]) * gp[:, 2 * r - j : 2 * r - j + c]
            v._accumulate(dv.astype(v.dtype))
        if kernel.tracked:
            dk = np.array([(g64 * vp[:, j : j + c]).sum() for j in range(k)])
            kernel._accumulate(dk.astype(kernel.dtype))

    return _make(out_data, (v, kernel), bwd)


def _resize_axis_coords(n_in: int, n_out: int):
    """Half-pixel-center source coordinates: low index, high index, high weight."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Half-pixel-center bilinear resampling of [N, C, H, W]."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize: rank-4 input required, got rank {x.ndim}")
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize: output extents must be >= 1")
    n, c, h, w = x.shape
    y0, y1, wy = _resize_axis_coords(h, out_h)
    x0, x1, wx = _resize_axis_coords(w, out_w)
    wy = wy[:, None]
    wx = wx[None, :]
    d = x.data
    rows0 = d[:, :, y0, :]
    rows1 = d[:, :, y1, :]
    top = rows0[:, :, :, x0] * (1 - wx) + rows0[:, :, :, x1] * wx
    bot = rows1[:, :, :, x0] * (1 - wx) + rows1[:, :, :, x1] * wx
    out_data = (top * (1 - wy) + bot * wy).astype(x.dtype)

    def bwd(g):
        gx = np.zeros((n, c, h, w), dtype=np.float64)
        yy0 = np.repeat(y0, out_w)
        yy1 = np.repeat(y1, out_w)
        xx0 = np.tile(x0, out_h)
        xx1 = np.tile(x1, out_h)
        wyf = np.repeat(wy.ravel(), out_w)
        wxf = np.tile(wx.ravel(), out_h)
        gf = g.reshape(n, c, -1).astype(np.float64)
        np.add.at(gx, (slice(None), slice(None), yy0, xx0), gf * (1 - wyf) * (1 - wxf))
        np.add.at(gx, (slice(None), slice(None), yy0, xx1), gf * (1 - wyf) * wxf)
        np.add.at(gx, (slice(None), slice(None), yy1, xx0), gf * wyf * (1 - wxf))
        np.add.at(gx, (slice(None), slice(None), yy1, xx1), gf * wyf * wxf)
        x._accumulate(gx.astype(x.dtype))

    return _make(out_data, (x,), bwd)


def batch_norm_raw(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float,
    momentum: float,
    training: bool,
) -> Tensor:
    """Per-channel normalization of [N, C, H, W].

    Training mode normalizes by biased batch statistics and updates the
    running buffers in place (new = (1 - momentum) * old + momentum * batch).
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: rank-4 input required, got rank {x.ndim}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: parameter length != channel count {c}")
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes, dtype=np.float64)
        var = np.square(x.data.astype(np.float64)).mean(axis=axes) - mean**2
        var = np.maximum(var, 0.0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)

    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    mean = mean.astype(x.dtype)
    xc = x.data - mean[None, :, None, None]
    xhat = xc * inv[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    m = x.shape[0] * x.shape[2] * x.shape[3]

    def bwd(g):
        if gamma.tracked:
            gamma._accumulate((g * xhat).sum(axis=axes, dtype=np.float64).astype(x.dtype))
        if beta.tracked:
            beta._accumulate(g.sum(axis=axes, dtype=np.float64).astype(x.dtype))
        if not x.tracked:
            return
        dxhat = g * gamma.data[None, :, None, None]
        if not training:
            x._accumulate(dxhat * inv[None, :, None, None])
            return
        inv_b = inv[None, :, None, None].astype(np.float64)
        dxhat = dxhat.astype(np.float64)
        xc64 = xc.astype(np.float64)
        dvar = (dxhat * xc64).sum(axis=axes) * (-0.5) * inv_b.reshape(-1) ** 3
        dmean = -(dxhat.sum(axis=axes)) * inv_b.reshape(-1) + dvar * (-2.0 / m) * xc64.sum(
            axis=axes
        )
        dx = (
            dxhat * inv_b
            + dvar[None, :, None, None] * 2.0 * xc64 / m
            + dmean[None, :, None, None] / m
        )
        x._accumulate(dx.astype(x.dtype))

    return _make(out_data, (x, gamma, beta), bwd)

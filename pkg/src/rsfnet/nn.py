"""Learnable-parameter containers and functional layers on top of tensor.py."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class ConvParams:
    """A 2D convolution: weight [C_out, C_in, K_h, K_w], optional bias [C_out]."""

    weight: Tensor
    bias: Tensor | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"ConvParams: weight rank {self.weight.ndim} != 4")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"ConvParams: bias length {self.bias.shape} != C_out {self.weight.shape[0]}"
            )
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError("ConvParams: stride must be >= 1 and padding >= 0")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_hw(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


@dataclass
class BatchNormParams:
    """Batch normalization state for C channels."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        c = self.gamma.shape
        if not (self.beta.shape == c and self.running_mean.shape == c and self.running_var.shape == c):
            raise ShapeError("BatchNormParams: all four vectors must share length C")
        if self.eps <= 0:
            raise ShapeError("BatchNormParams: eps must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ShapeError("BatchNormParams: momentum must lie in (0, 1)")
        if np.any(self.running_var.data < 0):
            raise ShapeError("BatchNormParams: running variance entries must be >= 0")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class LinearParams:
    """A dense layer: weight [out, in], bias [out]."""

    weight: Tensor
    bias: Tensor


# ---- cost tracing ---------------------------------------------------------


@dataclass
class CostRecorder:
    """Collects inference FLOPs during a traced forward (2 per multiply-add)."""

    flops: int = 0
    by_kind: dict = field(default_factory=dict)

    def _add(self, kind: str, n: int) -> None:
        self.flops += n
        self.by_kind[kind] = self.by_kind.get(kind, 0) + n


_recorder: CostRecorder | None = None


class record_costs:
    """Context manager installing a CostRecorder for nn-level layers."""

    def __init__(self):
        self.recorder = CostRecorder()

    def __enter__(self) -> CostRecorder:
        global _recorder
        self._prev = _recorder
        _recorder = self.recorder
        return self.recorder

    def __exit__(self, *exc):
        global _recorder
        _recorder = self._prev
        return False


# ---- functional layers ----------------------------------------------------


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    out = T.conv2d_raw(x, p.weight, p.bias, p.stride, p.padding)
    if _recorder is not None:
        n, co, oh, ow = out.shape
        kh, kw = p.kernel_hw
        macs = 2 * co * p.in_channels * kh * kw * oh * ow
        bias_adds = co * oh * ow if p.bias is not None else 0
        _recorder._add("conv", n * (macs + bias_adds))
    return out


def batch_norm(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    out = T.batch_norm_raw(
        x,
        p.gamma,
        p.beta,
        p.running_mean.data,
        p.running_var.data,
        p.eps,
        p.momentum,
        training,
    )
    if _recorder is not None:
        _recorder._add("bn", 2 * x.size)
    return out


def linear(x: Tensor, p: LinearParams) -> Tensor:
    out = T.linear(x, p.weight, p.bias)
    if _recorder is not None:
        n_in, n_out = p.weight.shape[1], p.weight.shape[0]
        _recorder._add("fc", x.shape[0] * (2 * n_in * n_out + n_out))
    return out


# ---- initialization --------------------------------------------------------


def init_conv(
    rng: np.random.Generator,
    c_out: int,
    c_in: int,
    kh: int,
    kw: int,
    stride=(1, 1),
    padding=(0, 0),
    bias: bool = False,
    dtype=np.float32,
) -> ConvParams:
    """Kaiming-normal weight, zero bias."""
    std = np.sqrt(2.0 / (c_in * kh * kw))
    w = rng.normal(0.0, std, size=(c_out, c_in, kh, kw)).astype(dtype)
    b = Tensor(np.zeros(c_out, dtype=dtype), tracked=True) if bias else None
    return ConvParams(Tensor(w, tracked=True), b, tuple(stride), tuple(padding))


def init_bn(c: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1) -> BatchNormParams:
    return BatchNormParams(
        gamma=Tensor(np.ones(c, dtype=dtype), tracked=True),
        beta=Tensor(np.zeros(c, dtype=dtype), tracked=True),
        running_mean=Tensor(np.zeros(c, dtype=dtype)),
        running_var=Tensor(np.ones(c, dtype=dtype)),
        eps=eps,
        momentum=momentum,
    )


def init_linear(rng: np.random.Generator, n_out: int, n_in: int, dtype=np.float32) -> LinearParams:
    std = np.sqrt(2.0 / n_in)
    w = rng.normal(0.0, std, size=(n_out, n_in)).astype(dtype)
    return LinearParams(Tensor(w, tracked=True), Tensor(np.zeros(n_out, dtype=dtype), tracked=True))


def param_count(p) -> int:
    """Learnable element count of a ConvParams / BatchNormParams / LinearParams."""
    if isinstance(p, ConvParams):
        return p.weight.size + (p.bias.size if p.bias is not None else 0)
    if isinstance(p, BatchNormParams):
        return p.gamma.size + p.beta.size
    if isinstance(p, LinearParams):
        return p.weight.size + p.bias.size
    raise TypeError(f"unsupported parameter container {type(p)!r}")

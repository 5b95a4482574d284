"""Branch-merging algebra for the K x K fusion stage.

A training-time block runs four parallel branches (K x K, 1 x 1,
1 x 1 -> 1 x K, 1 x 1 -> K x 1, each ending in its own batch norm) whose
outputs are summed. For inference the whole block collapses into one
K x K convolution with bias: fold each BN into its convolution, contract
each pointwise-then-strip pair into a single strip kernel, zero-pad every
kernel to K x K around the center, and sum kernels and biases. All algebra
runs in float64 and casts back to the parameter dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import BatchNormParams, ConvParams
from .tensor import ShapeError, Tensor


@dataclass
class BranchBlockParams:
    """The four-branch K x K convolution block (C in == C out, stride 1)."""

    main_conv: ConvParams
    main_bn: BatchNormParams
    point_conv: ConvParams
    point_bn: BatchNormParams
    horiz_pre: ConvParams
    horiz_conv: ConvParams
    horiz_bn: BatchNormParams
    vert_pre: ConvParams
    vert_conv: ConvParams
    vert_bn: BatchNormParams
    kernel_size: int

    def __post_init__(self):
        k = self.kernel_size
        if k % 2 == 0 or k < 1:
            raise ShapeError(f"BranchBlockParams: kernel size {k} must be odd")
        c = self.main_conv.out_channels
        r = (k - 1) // 2
        expect = [
            (self.main_conv, (k, k), (r, r)),
            (self.point_conv, (1, 1), (0, 0)),
            (self.horiz_pre, (1, 1), (0, 0)),
            (self.horiz_conv, (1, k), (0, r)),
            (self.vert_pre, (1, 1), (0, 0)),
            (self.vert_conv, (k, 1), (r, 0)),
        ]
        for conv, khw, pad in expect:
            if conv.kernel_hw != khw:
                raise ShapeError(f"BranchBlockParams: expected kernel {khw}, got {conv.kernel_hw}")
            if conv.stride != (1, 1):
                raise ShapeError("BranchBlockParams: all branches must use stride 1")
            if conv.padding != pad:
                raise ShapeError(f"BranchBlockParams: expected padding {pad}, got {conv.padding}")
            if conv.out_channels != c or conv.in_channels != c:
                raise ShapeError("BranchBlockParams: all branches must map C -> C channels")
        for bn in (self.main_bn, self.point_bn, self.horiz_bn, self.vert_bn):
            if bn.channels != c:
                raise ShapeError("BranchBlockParams: batch-norm width != branch width")

    @property
    def channels(self) -> int:
        return self.main_conv.out_channels


@dataclass
class EquivalenceReport:
    max_abs_dev: float
    tol: float
    trials: int
    passed: bool


def init_branch_block(
    rng: np.random.Generator, channels: int, kernel_size: int, dtype=np.float32
) -> BranchBlockParams:
    k = kernel_size
    r = (k - 1) // 2
    conv = lambda kh, kw, pad, bias=False: nn.init_conv(
        rng, channels, channels, kh, kw, (1, 1), pad, bias=bias, dtype=dtype
    )
    # Pre-convs stay bias-free: a constant shift before the branch-ending BN
    # is redundant, and zero-padded strip convs only compose exactly with an
    # unbiased pointwise stage (padding would erase the bias at borders).
    return BranchBlockParams(
        main_conv=conv(k, k, (r, r)),
        main_bn=nn.init_bn(channels, dtype),
        point_conv=conv(1, 1, (0, 0)),
        point_bn=nn.init_bn(channels, dtype),
        horiz_pre=conv(1, 1, (0, 0)),
        horiz_conv=conv(1, k, (0, r)),
        horiz_bn=nn.init_bn(channels, dtype),
        vert_pre=conv(1, 1, (0, 0)),
        vert_conv=conv(k, 1, (r, 0)),
        vert_bn=nn.init_bn(channels, dtype),
        kernel_size=k,
    )


def branch_forward(x: Tensor, b: BranchBlockParams, training: bool) -> Tensor:
    """Sum of the four branch outputs; spatial extents preserved."""
    main = nn.batch_norm(nn.conv2d(x, b.main_conv), b.main_bn, training)
    point = nn.batch_norm(nn.conv2d(x, b.point_conv), b.point_bn, training)
    horiz = nn.batch_norm(
        nn.conv2d(nn.conv2d(x, b.horiz_pre), b.horiz_conv), b.horiz_bn, training
    )
    vert = nn.batch_norm(nn.conv2d(nn.conv2d(x, b.vert_pre), b.vert_conv), b.vert_bn, training)
    return T.add(T.add(main, point), T.add(horiz, vert))


def fold_bn(conv: ConvParams, bn: BatchNormParams) -> ConvParams:
    """Absorb inference-mode batch norm into the preceding convolution.

    W' = W * gamma / sqrt(var + eps) per output channel,
    b' = beta + (b - mean) * gamma / sqrt(var + eps).
    """
    if bn.channels != conv.out_channels:
        raise ShapeError(
            f"fold_bn: bn width {bn.channels} != conv out-channels {conv.out_channels}"
        )
    scale = bn.gamma.data.astype(np.float64) / np.sqrt(
        bn.running_var.data.astype(np.float64) + bn.eps
    )
    w = conv.weight.data.astype(np.float64) * scale[:, None, None, None]
    b = conv.bias.data.astype(np.float64) if conv.bias is not None else 0.0
    b = bn.beta.data.astype(np.float64) + (b - bn.running_mean.data.astype(np.float64)) * scale
    dtype = conv.weight.dtype
    return ConvParams(
        Tensor(w.astype(dtype)), Tensor(b.astype(dtype)), conv.stride, conv.padding
    )


def merge_seq_pointwise(k1: ConvParams, k2: ConvParams) -> ConvParams:
    """Collapse a 1x1 convolution followed by k2 into a single convolution.

    The 1x1 stage is a channel-wise linear recombination, so contracting
    k2's input-channel axis against k1's output-channel axis yields a
    kernel with x * k1 * k2 == x * merged for every x. The first bias is
    pushed through k2: b' = sum_{m,u,v} k2[o,m,u,v] * b1[m] + b2[o].

    With a nonzero first bias the identity holds wherever k2 reads real
    values; zero padding on k2 erases the bias at borders, so callers that
    pad (the branch block) must keep the pointwise stage bias-free.
    """
    if k1.kernel_hw != (1, 1):
        raise ShapeError(f"merge_seq_pointwise: first kernel {k1.kernel_hw} is not 1x1")
    if k1.padding != (0, 0) or k1.stride != (1, 1):
        raise ShapeError("merge_seq_pointwise: first conv must be unpadded with stride 1")
    if k2.in_channels != k1.out_channels:
        raise ShapeError(
            f"merge_seq_pointwise: k2 in-channels {k2.in_channels} != k1 out-channels {k1.out_channels}"
        )
    w1 = k1.weight.data.astype(np.float64)[:, :, 0, 0]
    w2 = k2.weight.data.astype(np.float64)
    merged = np.einsum("omuv,mi->oiuv", w2, w1)
    dtype = k2.weight.dtype
    bias = None
    if k1.bias is not None or k2.bias is not None:
        b = np.zeros(k2.out_channels)
        if k1.bias is not None:
            b += np.einsum("omuv,m->o", w2, k1.bias.data.astype(np.float64))
        if k2.bias is not None:
            b += k2.bias.data.astype(np.float64)
        bias = Tensor(b.astype(dtype))
    return ConvParams(Tensor(merged.astype(dtype)), bias, k2.stride, k2.padding)


def zero_pad_kernel(k: ConvParams, kernel_size: int) -> ConvParams:
    """Embed a small odd-extent kernel centered in a K x K kernel.

    The result carries "same" padding, so its forward pass matches the
    original (the added taps only ever multiply zeros or padding).
    """
    if kernel_size % 2 == 0:
        raise ShapeError(f"zero_pad_kernel: target size {kernel_size} must be odd")
    kh, kw = k.kernel_hw
    if kh > kernel_size or kw > kernel_size:
        raise ShapeError(f"zero_pad_kernel: kernel {kh}x{kw} exceeds target {kernel_size}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("zero_pad_kernel: kernel extents must be odd")
    oh = (kernel_size - kh) // 2
    ow = (kernel_size - kw) // 2
    w = np.zeros(
        (k.out_channels, k.in_channels, kernel_size, kernel_size), dtype=k.weight.dtype
    )
    w[:, :, oh : oh + kh, ow : ow + kw] = k.weight.data
    r = (kernel_size - 1) // 2
    bias = Tensor(k.bias.data.copy()) if k.bias is not None else None
    return ConvParams(Tensor(w), bias, k.stride, (r, r))


def fuse_branch_block(b: BranchBlockParams) -> ConvParams:
    """Single K x K convolution equivalent to inference-mode branch_forward."""
    k = b.kernel_size
    main = fold_bn(b.main_conv, b.main_bn)
    point = zero_pad_kernel(fold_bn(b.point_conv, b.point_bn), k)
    horiz = zero_pad_kernel(merge_seq_pointwise(b.horiz_pre, fold_bn(b.horiz_conv, b.horiz_bn)), k)
    vert = zero_pad_kernel(merge_seq_pointwise(b.vert_pre, fold_bn(b.vert_conv, b.vert_bn)), k)
    w = np.zeros(main.weight.shape)
    bias = np.zeros(main.out_channels)
    for part in (main, point, horiz, vert):
        w += part.weight.data.astype(np.float64)
        bias += part.bias.data.astype(np.float64)
    dtype = b.main_conv.weight.dtype
    r = (k - 1) // 2
    return ConvParams(Tensor(w.astype(dtype)), Tensor(bias.astype(dtype)), (1, 1), (r, r))


def wrap_single_branch(fused: ConvParams, dtype=None) -> BranchBlockParams:
    """Re-wrap a fused K x K conv as a block whose re-fusion is bit-identical.

    The main branch carries the kernel behind a BN whose folded scale is
    exactly 1 (var = 1 - eps); the other branches are all zero.
    """
    k = fused.kernel_hw[0]
    if fused.kernel_hw != (k, k) or k % 2 == 0:
        raise ShapeError("wrap_single_branch: fused kernel must be odd and square")
    dtype = dtype or fused.weight.dtype
    c = fused.out_channels
    eps = 1e-5

    def exact_bn():
        return BatchNormParams(
            gamma=Tensor(np.ones(c, dtype=dtype)),
            beta=Tensor(np.zeros(c, dtype=dtype)),
            running_mean=Tensor(np.zeros(c, dtype=dtype)),
            running_var=Tensor(np.full(c, 1.0 - eps, dtype=dtype)),
            eps=eps,
        )

    def zero_conv(kh, kw, pad, bias=False):
        w = Tensor(np.zeros((c, c, kh, kw), dtype=dtype))
        bt = Tensor(np.zeros(c, dtype=dtype)) if bias else None
        return ConvParams(w, bt, (1, 1), pad)

    r = (k - 1) // 2
    main = ConvParams(
        Tensor(fused.weight.data.copy()),
        Tensor(fused.bias.data.copy()) if fused.bias is not None else None,
        (1, 1),
        (r, r),
    )
    return BranchBlockParams(
        main_conv=main,
        main_bn=exact_bn(),
        point_conv=zero_conv(1, 1, (0, 0)),
        point_bn=exact_bn(),
        horiz_pre=zero_conv(1, 1, (0, 0), bias=True),
        horiz_conv=zero_conv(1, k, (0, r)),
        horiz_bn=exact_bn(),
        vert_pre=zero_conv(1, 1, (0, 0), bias=True),
        vert_conv=zero_conv(k, 1, (r, 0)),
        vert_bn=exact_bn(),
        kernel_size=k,
    )


def verify_equivalence(
    b: BranchBlockParams,
    fused: ConvParams,
    trials: int = 16,
    tol: float = 1e-5,
    rng: np.random.Generator | None = None,
    spatial: int = 8,
) -> EquivalenceReport:
    """Max |multi-branch - fused| over random inputs, checked against tol."""
    if fused.weight.shape[1] != b.channels:
        raise ShapeError("verify_equivalence: fused in-channels != block channels")
    rng = rng or np.random.default_rng(0)
    dtype = b.main_conv.weight.dtype
    worst = 0.0
    with T.no_grad():
        for _ in range(trials):
            x = Tensor(rng.standard_normal((1, b.channels, spatial, spatial)).astype(dtype))
            ref = branch_forward(x, b, training=False)
            got = nn.conv2d(x, fused)
            worst = max(worst, float(np.abs(ref.data - got.data).max()))
    return EquivalenceReport(max_abs_dev=worst, tol=tol, trials=trials, passed=worst <= tol)

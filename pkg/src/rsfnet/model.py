"""The full dual-modality segmentation network.

Asymmetric residual encoders (a wider RGB branch, a narrower thermal
branch), per-branch confidence heads regressed onto saliency pseudo-labels,
per-stage recalibrate -> squeeze -> cross-spatial-weight -> expand fusion
blocks whose added feature is scaled by the counterpart branch's confidence
gate, and a two-stream decoder with skip additions. The K x K stage of each
fusion block is a four-branch block during training and collapses to one
convolution for inference (see reparam).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import reparam
from . import tensor as T
from .config import RunConfig
from .nn import BatchNormParams, ConvParams, LinearParams
from .reparam import BranchBlockParams
from .tensor import Tensor


class ValidationError(ValueError):
    """Inputs violate a model precondition."""


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""


@dataclass
class StageFeatures:
    """Per-stage dual-modality feature maps (matching spatial extents)."""

    f_rgb: Tensor
    f_thm: Tensor
    s: int


@dataclass
class ModelOutput:
    y_hat: Tensor  # [N, C, H, W] normalized scores
    conf_rgb: Tensor  # [N, 1] in (0, 1)
    conf_thm: Tensor  # [N, 1]


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


class ResidualBlock:
    def __init__(self, rng, c_in, c_out, stride, dtype):
        self.conv1 = nn.init_conv(rng, c_out, c_in, 3, 3, (stride, stride), (1, 1), dtype=dtype)
        self.bn1 = nn.init_bn(c_out, dtype)
        self.conv2 = nn.init_conv(rng, c_out, c_out, 3, 3, (1, 1), (1, 1), dtype=dtype)
        self.bn2 = nn.init_bn(c_out, dtype)
        if stride != 1 or c_in != c_out:
            self.skip_conv = nn.init_conv(rng, c_out, c_in, 1, 1, (stride, stride), (0, 0), dtype=dtype)
            self.skip_bn = nn.init_bn(c_out, dtype)
        else:
            self.skip_conv = None
            self.skip_bn = None

    def forward(self, x: Tensor, training: bool) -> Tensor:
        h = T.relu(nn.batch_norm(nn.conv2d(x, self.conv1), self.bn1, training))
        h = nn.batch_norm(nn.conv2d(h, self.conv2), self.bn2, training)
        if self.skip_conv is not None:
            x = nn.batch_norm(nn.conv2d(x, self.skip_conv), self.skip_bn, training)
        return T.relu(T.add(h, x))

    def entries(self, name):
        yield from _conv_entries(f"{name}.conv1", self.conv1)
        yield from _bn_entries(f"{name}.bn1", self.bn1)
        yield from _conv_entries(f"{name}.conv2", self.conv2)
        yield from _bn_entries(f"{name}.bn2", self.bn2)
        if self.skip_conv is not None:
            yield from _conv_entries(f"{name}.skip_conv", self.skip_conv)
            yield from _bn_entries(f"{name}.skip_bn", self.skip_bn)


class EncoderBranch:
    """Stem (/2) plus four residual stages; stage 1 lands at input/4."""

    def __init__(self, rng, in_channels, widths, blocks_per_stage, dtype):
        self.widths = tuple(widths)
        self.stem_conv = nn.init_conv(rng, widths[0], in_channels, 3, 3, (2, 2), (1, 1), dtype=dtype)
        self.stem_bn = nn.init_bn(widths[0], dtype)
        self.stages = []
        c_prev = widths[0]
        for w in widths:
            blocks = [ResidualBlock(rng, c_prev, w, 2, dtype)]
            for _ in range(blocks_per_stage - 1):
                blocks.append(ResidualBlock(rng, w, w, 1, dtype))
            self.stages.append(blocks)
            c_prev = w

    def forward(self, x: Tensor, training: bool) -> list[Tensor]:
        h = T.relu(nn.batch_norm(nn.conv2d(x, self.stem_conv), self.stem_bn, training))
        feats = []
        for blocks in self.stages:
            for block in blocks:
                h = block.forward(h, training)
            feats.append(h)
        return feats

    def entries(self, name):
        yield from _conv_entries(f"{name}.stem_conv", self.stem_conv)
        yield from _bn_entries(f"{name}.stem_bn", self.stem_bn)
        for s, blocks in enumerate(self.stages, start=1):
            for i, block in enumerate(blocks):
                yield from block.entries(f"{name}.stage{s}.block{i}")


class ConfidenceHead:
    """p_hat = sigmoid(fc2(relu(fc1(GAP(F4))))), strictly inside (0, 1)."""

    def __init__(self, rng, c4, hidden, dtype):
        hidden = hidden or max(c4 // 4, 4)
        self.fc1 = nn.init_linear(rng, hidden, c4, dtype)
        self.fc2 = nn.init_linear(rng, 1, hidden, dtype)

    def forward(self, f4: Tensor) -> Tensor:
        pooled = T.global_avg_pool(f4)
        return T.sigmoid(nn.linear(T.relu(nn.linear(pooled, self.fc1)), self.fc2))

    def entries(self, name):
        yield "param", f"{name}.fc1.weight", self.fc1.weight
        yield "param", f"{name}.fc1.bias", self.fc1.bias
        yield "param", f"{name}.fc2.weight", self.fc2.weight
        yield "param", f"{name}.fc2.bias", self.fc2.bias


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


class RecalibrationParams:
    """Channel weights from a 1D conv over pooled stats, then a 1x1 reduction."""

    def __init__(self, rng, c_in, c_out, k1d, dtype):
        std = math.sqrt(1.0 / k1d)
        self.kernel1d = Tensor(rng.normal(0.0, std, size=k1d).astype(dtype), tracked=True)
        self.reduce = nn.init_conv(rng, c_out, c_in, 1, 1, bias=True, dtype=dtype)

    def entries(self, name):
        yield "param", f"{name}.kernel1d", self.kernel1d
        yield from _conv_entries(f"{name}.reduce", self.reduce)


def feature_recalibration(f: Tensor, params: RecalibrationParams) -> Tensor:
    """Sigmoid channel weights broadcast onto f, then 1x1 channel reduction."""
    weights = T.sigmoid(T.conv1d_channel(T.global_avg_pool(f), params.kernel1d))
    weights = T.reshape(weights, (f.shape[0], f.shape[1], 1, 1))
    return nn.conv2d(T.mul(weights, f), params.reduce)


class RsfStage:
    """One fusion block: squeeze both modalities to the inner width, swap
    spatial weight maps built from the counterpart features, expand back."""

    def __init__(self, rng, c_stage, c_inner, kernel_size, dtype):
        self.squeeze_rgb = nn.init_conv(rng, c_inner, c_stage, 1, 1, dtype=dtype)
        self.squeeze_rgb_bn = nn.init_bn(c_inner, dtype)
        self.squeeze_thm = nn.init_conv(rng, c_inner, c_stage, 1, 1, dtype=dtype)
        self.squeeze_thm_bn = nn.init_bn(c_inner, dtype)
        # spatial_<m> consumes modality m's squeezed features and weights the
        # counterpart; a BranchBlockParams while training, ConvParams once fused
        self.spatial_rgb = reparam.init_branch_block(rng, c_inner, kernel_size, dtype)
        self.spatial_thm = reparam.init_branch_block(rng, c_inner, kernel_size, dtype)
        self.expand_rgb = nn.init_conv(rng, c_stage, 2 * c_inner, 1, 1, bias=True, dtype=dtype)
        self.expand_thm = nn.init_conv(rng, c_stage, 2 * c_inner, 1, 1, bias=True, dtype=dtype)

    def _spatial(self, which: str, z: Tensor, training: bool) -> Tensor:
        block = getattr(self, which)
        if isinstance(block, BranchBlockParams):
            return reparam.branch_forward(z, block, training)
        return nn.conv2d(z, block)

    def forward(
        self,
        f_rgb: Tensor,
        f_thm: Tensor,
        gate_rgb: Tensor,
        gate_thm: Tensor,
        training: bool,
    ) -> tuple[Tensor, Tensor]:
        if f_rgb.shape != f_thm.shape:
            raise ValidationError(
                f"rsf stage: modality shapes differ ({f_rgb.shape} vs {f_thm.shape})"
            )
        z_rgb = T.relu(nn.batch_norm(nn.conv2d(f_rgb, self.squeeze_rgb), self.squeeze_rgb_bn, training))
        z_thm = T.relu(nn.batch_norm(nn.conv2d(f_thm, self.squeeze_thm), self.squeeze_thm_bn, training))
        w_rgb = T.sigmoid(self._spatial("spatial_rgb", z_rgb, training))
        w_thm = T.sigmoid(self._spatial("spatial_thm", z_thm, training))
        z_cross_rgb = T.mul(z_rgb, w_thm)
        z_cross_thm = T.mul(z_thm, w_rgb)
        z_hat_rgb = nn.conv2d(T.concat_channels([z_cross_rgb, z_rgb]), self.expand_rgb)
        z_hat_thm = nn.conv2d(T.concat_channels([z_cross_thm, z_thm]), self.expand_thm)
        n = f_rgb.shape[0]
        g_rgb = T.reshape(gate_rgb, (n, 1, 1, 1))
        g_thm = T.reshape(gate_thm, (n, 1, 1, 1))
        f_hat_rgb = T.add(f_rgb, T.mul(g_rgb, z_hat_rgb))
        f_hat_thm = T.add(f_thm, T.mul(g_thm, z_hat_thm))
        return f_hat_rgb, f_hat_thm

    def fuse(self) -> None:
        if isinstance(self.spatial_rgb, BranchBlockParams):
            self.spatial_rgb = reparam.fuse_branch_block(self.spatial_rgb)
        if isinstance(self.spatial_thm, BranchBlockParams):
            self.spatial_thm = reparam.fuse_branch_block(self.spatial_thm)

    def entries(self, name):
        yield from _conv_entries(f"{name}.squeeze_rgb", self.squeeze_rgb)
        yield from _bn_entries(f"{name}.squeeze_rgb_bn", self.squeeze_rgb_bn)
        yield from _conv_entries(f"{name}.squeeze_thm", self.squeeze_thm)
        yield from _bn_entries(f"{name}.squeeze_thm_bn", self.squeeze_thm_bn)
        for mod in ("rgb", "thm"):
            block = getattr(self, f"spatial_{mod}")
            prefix = f"{name}.spatial_{mod}"
            if isinstance(block, BranchBlockParams):
                yield from _branch_entries(prefix, block)
            else:
                yield from _conv_entries(prefix, block)
        yield from _conv_entries(f"{name}.expand_rgb", self.expand_rgb)
        yield from _conv_entries(f"{name}.expand_thm", self.expand_thm)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


class DecoderBlock:
    """conv (to the skip width) -> x2 upsample -> +skip -> conv -> conv."""

    def __init__(self, rng, c_in, c_out, dtype):
        self.conv_a = nn.init_conv(rng, c_out, c_in, 3, 3, (1, 1), (1, 1), dtype=dtype)
        self.bn_a = nn.init_bn(c_out, dtype)
        self.conv_b = nn.init_conv(rng, c_out, c_out, 3, 3, (1, 1), (1, 1), dtype=dtype)
        self.bn_b = nn.init_bn(c_out, dtype)
        self.conv_c = nn.init_conv(rng, c_out, c_out, 3, 3, (1, 1), (1, 1), dtype=dtype)
        self.bn_c = nn.init_bn(c_out, dtype)

    def forward(self, x: Tensor, skip: Tensor, training: bool) -> Tensor:
        h = T.relu(nn.batch_norm(nn.conv2d(x, self.conv_a), self.bn_a, training))
        h = T.bilinear_resize(h, skip.shape[2], skip.shape[3])
        h = T.add(h, skip)
        h = T.relu(nn.batch_norm(nn.conv2d(h, self.conv_b), self.bn_b, training))
        return T.relu(nn.batch_norm(nn.conv2d(h, self.conv_c), self.bn_c, training))

    def entries(self, name):
        for tag in ("a", "b", "c"):
            yield from _conv_entries(f"{name}.conv_{tag}", getattr(self, f"conv_{tag}"))
            yield from _bn_entries(f"{name}.bn_{tag}", getattr(self, f"bn_{tag}"))


class Decoder:
    """Two streams over the enhanced stages, summed into a class-score head."""

    def __init__(self, rng, reduced_widths, num_classes, output_norm, dtype):
        self.output_norm = output_norm
        self.streams = {}
        for mod in ("rgb", "thm"):
            blocks = []
            for target in (2, 1, 0):  # decode stage 4 -> 3 -> 2 -> 1
                blocks.append(
                    DecoderBlock(rng, reduced_widths[target + 1], reduced_widths[target], dtype)
                )
            self.streams[mod] = blocks
        self.head = nn.init_conv(rng, num_classes, reduced_widths[0], 1, 1, bias=True, dtype=dtype)

    def forward(self, enhanced: list[StageFeatures], out_hw, training: bool) -> Tensor:
        if len(enhanced) != 4:
            raise ValidationError(f"decoder: expected 4 stages, got {len(enhanced)}")
        outputs = []
        for mod in ("rgb", "thm"):
            feats = [getattr(sf, f"f_{mod}") for sf in enhanced]
            x = feats[3]
            for block, target in zip(self.streams[mod], (2, 1, 0)):
                x = block.forward(x, feats[target], training)
            outputs.append(x)
        merged = T.add(outputs[0], outputs[1])
        logits = nn.conv2d(merged, self.head)
        logits = T.bilinear_resize(logits, out_hw[0], out_hw[1])
        if self.output_norm == "softmax":
            return T.channel_softmax(logits)
        return T.sigmoid(logits)

    def entries(self, name):
        for mod in ("rgb", "thm"):
            for i, block in enumerate(self.streams[mod]):
                yield from block.entries(f"{name}.{mod}.block{i}")
        yield from _conv_entries(f"{name}.head", self.head)


# ---------------------------------------------------------------------------
# entry walkers
# ---------------------------------------------------------------------------


def _conv_entries(name, conv: ConvParams):
    yield "param", f"{name}.weight", conv.weight
    if conv.bias is not None:
        yield "param", f"{name}.bias", conv.bias


def _bn_entries(name, bn: BatchNormParams):
    yield "param", f"{name}.gamma", bn.gamma
    yield "param", f"{name}.beta", bn.beta
    yield "buffer", f"{name}.running_mean", bn.running_mean
    yield "buffer", f"{name}.running_var", bn.running_var


def _branch_entries(name, b: BranchBlockParams):
    yield from _conv_entries(f"{name}.main_conv", b.main_conv)
    yield from _bn_entries(f"{name}.main_bn", b.main_bn)
    yield from _conv_entries(f"{name}.point_conv", b.point_conv)
    yield from _bn_entries(f"{name}.point_bn", b.point_bn)
    yield from _conv_entries(f"{name}.horiz_pre", b.horiz_pre)
    yield from _conv_entries(f"{name}.horiz_conv", b.horiz_conv)
    yield from _bn_entries(f"{name}.horiz_bn", b.horiz_bn)
    yield from _conv_entries(f"{name}.vert_pre", b.vert_pre)
    yield from _conv_entries(f"{name}.vert_conv", b.vert_conv)
    yield from _bn_entries(f"{name}.vert_bn", b.vert_bn)


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------


class RsfNet:
    def __init__(self, cfg: RunConfig, seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        self.fused = False
        dtype = cfg.dtype()
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 0])
        self.enc_rgb = EncoderBranch(rng, 3, cfg.rgb_widths, cfg.blocks_per_stage, dtype)
        self.enc_thm = EncoderBranch(rng, 1, cfg.thm_widths, cfg.blocks_per_stage, dtype)
        self.head_rgb = ConfidenceHead(rng, cfg.rgb_widths[3], cfg.conf_hidden, dtype)
        self.head_thm = ConfidenceHead(rng, cfg.thm_widths[3], cfg.conf_hidden, dtype)
        self.recal_rgb = [
            RecalibrationParams(rng, cfg.rgb_widths[s], cfg.reduced_widths[s], cfg.recal_kernel_size, dtype)
            for s in range(4)
        ]
        self.recal_thm = [
            RecalibrationParams(rng, cfg.thm_widths[s], cfg.reduced_widths[s], cfg.recal_kernel_size, dtype)
            for s in range(4)
        ]
        self.rsf_stages = [
            RsfStage(rng, cfg.reduced_widths[s], cfg.inner_width, cfg.kernel_size, dtype)
            for s in range(4)
        ]
        self.decoder = Decoder(rng, cfg.reduced_widths, cfg.num_classes, cfg.output_norm, dtype)

    # ---- forward passes -------------------------------------------------
    def encoder_forward(self, img_rgb: Tensor, img_thm: Tensor, training: bool) -> list[StageFeatures]:
        for img, channels, name in ((img_rgb, 3, "rgb"), (img_thm, 1, "thm")):
            if img.ndim != 4 or img.shape[1] != channels:
                raise ValidationError(f"encoder: {name} input must be [N, {channels}, H, W]")
        n, _, h, w = img_rgb.shape
        if img_thm.shape[0] != n or img_thm.shape[2:] != (h, w):
            raise ValidationError("encoder: rgb/thm extents differ")
        if h % 32 or w % 32:
            raise ValidationError(f"encoder: extents ({h}, {w}) must be divisible by 32")
        feats_rgb = self.enc_rgb.forward(img_rgb, training)
        feats_thm = self.enc_thm.forward(img_thm, training)
        return [StageFeatures(fr, ft, s + 1) for s, (fr, ft) in enumerate(zip(feats_rgb, feats_thm))]

    def gates(self, conf_rgb: Tensor, conf_thm: Tensor) -> tuple[Tensor, Tensor]:
        """(gate on the rgb-side residual, gate on the thm side)."""
        if self.cfg.freeze_gates:
            zero = Tensor(np.zeros(conf_rgb.shape, dtype=conf_rgb.dtype))
            return zero, zero
        if self.cfg.gate_mode == "counterpart":
            return conf_thm, conf_rgb
        return conf_rgb, conf_thm

    def forward(self, img_rgb: Tensor, img_thm: Tensor, training: bool) -> ModelOutput:
        stages = self.encoder_forward(img_rgb, img_thm, training)
        conf_rgb = self.head_rgb.forward(stages[3].f_rgb)
        conf_thm = self.head_thm.forward(stages[3].f_thm)
        gate_rgb, gate_thm = self.gates(conf_rgb, conf_thm)
        enhanced = []
        for s, sf in enumerate(stages):
            f_rgb = feature_recalibration(sf.f_rgb, self.recal_rgb[s])
            f_thm = feature_recalibration(sf.f_thm, self.recal_thm[s])
            f_hat_rgb, f_hat_thm = self.rsf_stages[s].forward(
                f_rgb, f_thm, gate_rgb, gate_thm, training
            )
            enhanced.append(StageFeatures(f_hat_rgb, f_hat_thm, sf.s))
        y_hat = self.decoder.forward(enhanced, img_rgb.shape[2:], training)
        return ModelOutput(y_hat=y_hat, conf_rgb=conf_rgb, conf_thm=conf_thm)

    def predict(self, rgb: np.ndarray, thm: np.ndarray) -> np.ndarray:
        """Per-pixel argmax label map [H, W] (ties pick the lowest class)."""
        if rgb.ndim == 3:
            rgb = rgb[None]
        if thm.ndim == 3:
            thm = thm[None]
        dtype = self.cfg.dtype()
        with T.no_grad():
            out = self.forward(Tensor(rgb, dtype), Tensor(thm, dtype), training=False)
        labels = np.argmax(out.y_hat.data, axis=1).astype(np.int64)
        return labels[0] if labels.shape[0] == 1 else labels

    # ---- parameter access ------------------------------------------------
    def _entries(self):
        yield from self.enc_rgb.entries("enc_rgb")
        yield from self.enc_thm.entries("enc_thm")
        yield from self.head_rgb.entries("head_rgb")
        yield from self.head_thm.entries("head_thm")
        for s in range(4):
            yield from self.recal_rgb[s].entries(f"recal_rgb.s{s + 1}")
            yield from self.recal_thm[s].entries(f"recal_thm.s{s + 1}")
            yield from self.rsf_stages[s].entries(f"rsf.s{s + 1}")
        yield from self.decoder.entries("decoder")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(name, t) for kind, name, t in self._entries() if kind == "param"]

    def named_buffers(self) -> list[tuple[str, Tensor]]:
        return [(name, t) for kind, name, t in self._entries() if kind == "buffer"]

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.zero_grad()

    def fuse(self) -> None:
        """Collapse every training-time branch block into one convolution."""
        for stage in self.rsf_stages:
            stage.fuse()
        self.fused = True


# ---------------------------------------------------------------------------
# losses and schedule
# ---------------------------------------------------------------------------


def class_weights(class_freqs: np.ndarray) -> np.ndarray:
    """w_c = 1 / ln(1.05 + p_c) from the training-set class frequencies."""
    freqs = np.asarray(class_freqs, dtype=np.float64)
    if freqs.min() < 0 or not math.isclose(float(freqs.sum()), 1.0, abs_tol=1e-6):
        raise ValidationError("class_weights: frequencies must be non-negative and sum to 1")
    return 1.0 / np.log(1.05 + freqs)


def one_hot(gt: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    gt = np.asarray(gt)
    if gt.min() < 0 or gt.max() >= num_classes:
        raise ValidationError(f"one_hot: class index out of range [0, {num_classes})")
    out = np.zeros((num_classes,) + gt.shape, dtype=dtype)
    np.put_along_axis(out, gt[None], 1.0, axis=0)
    return np.moveaxis(out, 0, -3)


def segmentation_loss(y_hat: Tensor, y: np.ndarray, class_freqs: np.ndarray) -> Tensor:
    """Frequency-weighted cross-entropy averaged over pixels.

    y is one-hot [(N,) C, H, W]; each pixel contributes
    -w_c * log(y_hat) at its true class, with w_c = 1 / ln(1.05 + p_c)
    and the log clamped at 1e-12.
    """
    y = np.asarray(y)
    if y_hat.ndim == 3:
        y_hat = T.reshape(y_hat, (1,) + y_hat.shape)
    if y.ndim == 3:
        y = y[None]
    if y.shape != y_hat.shape:
        raise ValidationError(f"segmentation_loss: shapes {y.shape} vs {y_hat.shape} differ")
    w = class_weights(class_freqs).astype(y_hat.dtype)
    mask = (y * w[None, :, None, None]).astype(y_hat.dtype)
    n, _, h, wdt = y_hat.shape
    picked = T.tsum(T.mul(T.log(y_hat, floor=1e-12), Tensor(mask)))
    return picked * (-1.0 / (n * h * wdt))


def regression_loss(
    pseudo_rgb: np.ndarray, pseudo_thm: np.ndarray, conf_rgb: Tensor, conf_thm: Tensor
) -> Tensor:
    """Smooth-L1 between confidences and pseudo-labels, rgb + thm terms."""
    total = None
    for target, conf in ((pseudo_rgb, conf_rgb), (pseudo_thm, conf_thm)):
        target = np.asarray(target, dtype=conf.dtype).reshape(-1)
        err = T.sub(T.reshape(conf, (-1,)), Tensor(target))
        term = T.tmean(T.smooth_l1(err))
        total = term if total is None else T.add(total, term)
    return total


def total_loss(seg: Tensor, reg: Tensor, lambda_reg: float) -> Tensor:
    if lambda_reg < 0:
        raise ValidationError("total_loss: lambda must be >= 0")
    return T.add(seg, reg * float(lambda_reg))


def poly_lr(lr0: float, iteration: int, iter_max: int, power: float = 0.9) -> float:
    """lr0 * (1 - iter / iter_max) ** power."""
    if not 0 <= iteration <= iter_max:
        raise ValidationError(f"poly_lr: iteration {iteration} outside [0, {iter_max}]")
    return lr0 * (1.0 - iteration / iter_max) ** power


class SgdMomentum:
    """v <- mu * v + g + wd * theta;  theta <- theta - lr * v."""

    def __init__(self, momentum: float, weight_decay: float):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, named_params, lr: float) -> None:
        for name, p in named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.momentum * v + g + self.weight_decay * p.data
            self.velocity[name] = v
            p.data -= lr * v


@dataclass
class TrainBatch:
    rgb: np.ndarray  # [N, 3, H, W] in [0, 1]
    thm: np.ndarray  # [N, 1, H, W]
    gt: np.ndarray  # [N, H, W] int
    pseudo_rgb: np.ndarray  # [N]
    pseudo_thm: np.ndarray  # [N]


def batch_from_samples(samples) -> TrainBatch:
    """Stack SamplePair-like records (pseudo labels must be attached)."""
    for s in samples:
        if s.pseudo is None:
            raise ValidationError(f"sample {s.id}: pseudo labels not attached")
    return TrainBatch(
        rgb=np.stack([s.rgb for s in samples]),
        thm=np.stack([s.thm for s in samples]),
        gt=np.stack([s.gt for s in samples]),
        pseudo_rgb=np.array([s.pseudo.p_rgb for s in samples]),
        pseudo_thm=np.array([s.pseudo.p_thm for s in samples]),
    )


def fit(
    net: RsfNet,
    samples,
    steps: int | None = None,
    augment_fn=None,
    on_step=None,
) -> list[dict]:
    """Poly-LR SGD over shuffled mini-batches; returns one log row per step.

    `augment_fn(sample, step) -> sample` is applied per draw when given;
    `on_step(row)` observes each appended log row.
    """
    cfg = net.cfg
    n = len(samples)
    if n == 0:
        raise ValidationError("fit: empty training set")
    gt_max = max(int(s.gt.max()) for s in samples)
    if gt_max >= cfg.num_classes:
        raise ValidationError(f"fit: class index {gt_max} >= num_classes {cfg.num_classes}")
    counts = np.zeros(cfg.num_classes, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.gt.reshape(-1), minlength=cfg.num_classes)
    freqs = counts / counts.sum()
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    iter_max = steps if steps else cfg.epochs * batches_per_epoch
    opt = SgdMomentum(cfg.momentum, cfg.weight_decay)
    shuffle_rng = np.random.default_rng([cfg.seed, 3])
    order = shuffle_rng.permutation(n)
    cursor = 0
    rows = []
    for step in range(iter_max):
        if cursor + cfg.batch_size > n:
            order = shuffle_rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        picked = [samples[i] for i in idx]
        if augment_fn is not None:
            picked = [augment_fn(s, step) for s in picked]
        lr = poly_lr(cfg.lr, step, iter_max, cfg.poly_power)
        stats = train_step(batch_from_samples(picked), net, opt, lr, freqs)
        row = {"step": step, "lr": lr, **stats}
        rows.append(row)
        if on_step is not None:
            on_step(row)
    return rows


def train_step(
    batch: TrainBatch,
    net: RsfNet,
    opt: SgdMomentum,
    lr: float,
    class_freqs: np.ndarray,
) -> dict:
    """One SGD step; returns the loss components as floats."""
    dtype = net.cfg.dtype()
    out = net.forward(Tensor(batch.rgb, dtype), Tensor(batch.thm, dtype), training=True)
    y = one_hot(batch.gt, net.cfg.num_classes, dtype)
    seg = segmentation_loss(out.y_hat, y, class_freqs)
    reg = regression_loss(batch.pseudo_rgb, batch.pseudo_thm, out.conf_rgb, out.conf_thm)
    loss = total_loss(seg, reg, net.cfg.lambda_reg)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(
            f"non-finite loss {value} (seg={seg.item()}, reg={reg.item()}, lr={lr})"
        )
    net.zero_grad()
    loss.backward()
    opt.step(net.named_parameters(), lr)
    return {"loss": value, "seg": seg.item(), "reg": reg.item()}

"""Saliency-driven pseudo-label generation.

Per image: grayscale -> multi-scale center-surround saliency (integral-image
box means) -> histogram-based binarization -> IoU against the binarized
ground truth. The two IoU scores (RGB, thermal) are the soft labels that
supervise the confidence regression heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_SCALES = (2, 4, 8)
LUMA_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-R BT.601


@dataclass
class PseudoLabelPair:
    """IoU soft labels for one image pair, both in [0, 1]."""

    p_rgb: float
    p_thm: float


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """[3, H, W] in [0, 255] -> BT.601 luma [H, W]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"to_grayscale: expected [3, H, W], got {rgb.shape}")
    r, g, b = LUMA_WEIGHTS
    return r * rgb[0] + g * rgb[1] + b * rgb[2]


def box_mean(img: np.ndarray, radius: int) -> np.ndarray:
    """Mean over the (2r+1)-square window clamped to the image bounds."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    ii = np.zeros((h + 1, w + 1))
    ii[1:, 1:] = img.cumsum(axis=0).cumsum(axis=1)
    ys = np.arange(h)
    xs = np.arange(w)
    y0 = np.maximum(ys - radius, 0)
    y1 = np.minimum(ys + radius, h - 1)
    x0 = np.maximum(xs - radius, 0)
    x1 = np.minimum(xs + radius, w - 1)
    sums = (
        ii[np.ix_(y1 + 1, x1 + 1)]
        - ii[np.ix_(y0, x1 + 1)]
        - ii[np.ix_(y1 + 1, x0)]
        + ii[np.ix_(y0, x0)]
    )
    area = np.outer(y1 - y0 + 1, x1 - x0 + 1)
    return sums / area


def clip_scales(scales, h: int, w: int) -> tuple[int, ...]:
    """Clamp the default radii into the valid range for an H x W image."""
    limit = max((min(h, w) - 1) // 2, 1)
    out = sorted({min(max(int(s), 1), limit) for s in scales})
    return tuple(out)


def fine_grained_saliency(img: np.ndarray, scales=DEFAULT_SCALES) -> np.ndarray:
    """Multi-scale center-surround contrast, rescaled so the max is 255.

    Per radius r the response is |I - boxmean_r(I)|; responses are summed
    over scales. An all-flat image maps to the all-zero saliency map.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"fine_grained_saliency: expected [H, W], got {img.shape}")
    scales = tuple(scales)
    if not scales:
        raise ValueError("fine_grained_saliency: at least one scale is required")
    h, w = img.shape
    for r in scales:
        if r < 1 or r >= min(h, w) / 2:
            raise ValueError(f"fine_grained_saliency: radius {r} invalid for {h}x{w} image")
    sal = np.zeros((h, w))
    for r in scales:
        sal += np.abs(img - box_mean(img, r))
    peak = sal.max()
    if peak > 0:
        sal *= 255.0 / peak
    return sal


def otsu_binarize(m: np.ndarray) -> tuple[float, np.ndarray]:
    """Threshold maximizing inter-class variance over the 256-bin histogram.

    Returns (threshold, mask) with mask = values > threshold, so the
    threshold value itself counts as background. Ties pick the smallest
    threshold; a degenerate map (single occupied bin) yields an all-zero
    mask with threshold max(m).
    """
    m = np.asarray(m, dtype=np.float64)
    bins = np.clip(np.floor(m), 0, 255).astype(np.int64)
    hist = np.bincount(bins.reshape(-1), minlength=256).astype(np.float64)
    total = hist.sum()
    levels = np.arange(256, dtype=np.float64)
    w0 = hist.cumsum()
    m0 = (hist * levels).cumsum()
    w1 = total - w0
    mu_all = m0[-1]
    # between-class variance w0*w1*(mu0 - mu1)^2 for split (<= t | > t)
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.divide(m0, w0, out=np.zeros(256), where=w0 > 0)
    mu1 = np.divide(mu_all - m0, w1, out=np.zeros(256), where=w1 > 0)
    sigma_b = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, 0.0)
    best = int(np.argmax(sigma_b))  # argmax takes the smallest index on ties
    if sigma_b[best] <= 0.0:
        return float(m.max()), np.zeros(m.shape, dtype=np.uint8)
    threshold = float(m[bins <= best].max())
    return threshold, (m > threshold).astype(np.uint8)


def binarize_ground_truth(y: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    """Foreground mask: every pixel whose class index is nonzero."""
    y = np.asarray(y)
    if y.min() < 0:
        raise ValueError(f"binarize_ground_truth: negative class index {int(y.min())}")
    if num_classes is not None and y.max() >= num_classes:
        raise ValueError(
            f"binarize_ground_truth: class index {int(y.max())} >= num_classes {num_classes}"
        )
    return (y != 0).astype(np.uint8)


def iou_score(a: np.ndarray, b: np.ndarray) -> float:
    """|a AND b| / |a OR b|; an empty union scores 0."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"iou_score: shape mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def saliency_mask(intensity: np.ndarray, scales=DEFAULT_SCALES) -> np.ndarray:
    """Binary saliency mask of a single-channel [0, 255] intensity map."""
    _, mask = otsu_binarize(fine_grained_saliency(intensity, scales))
    return mask


def generate_pseudo_labels(
    rgb: np.ndarray,
    thm: np.ndarray,
    gt: np.ndarray,
    scales=None,
    num_classes: int | None = None,
) -> PseudoLabelPair:
    """IoU of each modality's binary saliency map with the binarized labels.

    rgb is [3, H, W] and thm [H, W] (or [1, H, W]), both in [0, 255];
    gt is an [H, W] class-index map with 0 = background.
    """
    thm = np.asarray(thm)
    if thm.ndim == 3:
        thm = thm[0]
    gt = np.asarray(gt)
    if gt.shape != thm.shape or rgb.shape[1:] != gt.shape:
        raise ValueError(
            f"generate_pseudo_labels: extent mismatch rgb {rgb.shape} thm {thm.shape} gt {gt.shape}"
        )
    if scales is None:
        scales = clip_scales(DEFAULT_SCALES, *gt.shape)
    gt_mask = binarize_ground_truth(gt, num_classes)
    p_rgb = iou_score(saliency_mask(to_grayscale(rgb), scales), gt_mask)
    p_thm = iou_score(saliency_mask(thm, scales), gt_mask)
    return PseudoLabelPair(p_rgb=p_rgb, p_thm=p_thm)

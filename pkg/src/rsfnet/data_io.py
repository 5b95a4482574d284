"""Dataset ingestion, augmentation, synthetic scenes, and checkpoints.

On-disk dataset layout:

    root/rgb/<id>.png      8-bit RGB
    root/thm/<id>.png      8-bit grayscale thermal
    root/labels/<id>.png   8-bit grayscale class indices (0 = background)
    root/<split>.txt       newline-separated sample ids (UTF-8)

(The public MFNet layout maps onto this by placing its images/ into rgb/
plus thm/ and its labels/ unchanged, with the provided split lists.)

Checkpoints are a little-endian binary container: magic "RSFC", a version
word, and named typed arrays; round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import plg
from .plg import PseudoLabelPair

CKPT_MAGIC = b"RSFC"
CKPT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2, np.dtype(np.uint8): 3}


class DatasetError(IOError):
    """A sample could not be read or is inconsistent."""


class CheckpointError(IOError):
    """Checkpoint parse/validation failure; `code` states which kind."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class SamplePair:
    id: str
    rgb: np.ndarray  # [3, H, W] float32 in [0, 1]
    thm: np.ndarray  # [1, H, W] float32 in [0, 1]
    gt: np.ndarray  # [H, W] int64 class indices
    pseudo: PseudoLabelPair | None = None


# ---------------------------------------------------------------------------
# PNG image IO
# ---------------------------------------------------------------------------


def _read_png(path: Path, mode: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing file {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert(mode), dtype=np.uint8)


def write_png(path, arr: np.ndarray) -> None:
    """8-bit PNG from [H, W] / [H, W, 3] uint8 or [C, H, W] floats in [0, 1]."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        if arr.ndim == 3 and arr.shape[0] in (1, 3):
            arr = np.moveaxis(arr, 0, -1)
            if arr.shape[-1] == 1:
                arr = arr[..., 0]
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def load_sample(root: Path, sample_id: str) -> SamplePair:
    rgb = _read_png(root / "rgb" / f"{sample_id}.png", "RGB")
    thm = _read_png(root / "thm" / f"{sample_id}.png", "L")
    gt = _read_png(root / "labels" / f"{sample_id}.png", "L")
    if rgb.shape[:2] != thm.shape or thm.shape != gt.shape:
        raise DatasetError(
            f"sample {sample_id}: extents differ (rgb {rgb.shape[:2]}, thm {thm.shape}, gt {gt.shape})"
        )
    return SamplePair(
        id=sample_id,
        rgb=np.moveaxis(rgb, -1, 0).astype(np.float32) / 255.0,
        thm=thm[None].astype(np.float32) / 255.0,
        gt=gt.astype(np.int64),
    )


def load_dataset(root, split: str) -> list[SamplePair]:
    """Load every id from root/<split>.txt, ordered by id."""
    root = Path(root)
    split_file = root / f"{split}.txt"
    if not split_file.is_file():
        raise DatasetError(f"missing split file {split_file}")
    ids = sorted({line.strip() for line in split_file.read_text(encoding="utf-8").splitlines() if line.strip()})
    samples = []
    for sample_id in ids:
        try:
            samples.append(load_sample(root, sample_id))
        except DatasetError as exc:
            raise DatasetError(f"sample {sample_id}: {exc}") from exc
    return samples


def save_dataset(samples: list[SamplePair], root, split: str) -> None:
    root = Path(root)
    for s in samples:
        write_png(root / "rgb" / f"{s.id}.png", s.rgb)
        write_png(root / "thm" / f"{s.id}.png", s.thm)
        write_png(root / "labels" / f"{s.id}.png", s.gt.astype(np.uint8))
    root.mkdir(parents=True, exist_ok=True)
    (root / f"{split}.txt").write_text("".join(f"{s.id}\n" for s in samples), encoding="utf-8")


def class_frequencies(samples: list[SamplePair], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        if s.gt.max() >= num_classes:
            raise DatasetError(f"sample {s.id}: class index {int(s.gt.max())} >= {num_classes}")
        counts += np.bincount(s.gt.reshape(-1), minlength=num_classes)
    return counts / counts.sum()


def attach_pseudo_labels(samples: list[SamplePair], scales=None, num_classes=None) -> list[SamplePair]:
    """Compute each sample's saliency-IoU soft labels (images are [0, 1])."""
    out = []
    for s in samples:
        pair = plg.generate_pseudo_labels(
            s.rgb * 255.0, s.thm[0] * 255.0, s.gt, scales=scales, num_classes=num_classes
        )
        out.append(replace(s, pseudo=pair))
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentPolicy:
    flip_prob: float = 0.5
    max_rotate_deg: float = 10.0
    crop_hw: tuple | None = None


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    """Deterministic per-sample stream derived from (seed, id)."""
    digest = int.from_bytes(sample_id.encode("utf-8").ljust(8, b"\0")[:8], "little")
    return np.random.default_rng([seed, 1, digest])


def augment(s: SamplePair, rng: np.random.Generator, policy: AugmentPolicy) -> SamplePair:
    """One shared geometric transform for rgb, thm, and gt.

    Images are rotated bilinearly, labels by nearest neighbor; pixels
    exposed by rotation become background (class 0, intensity 0).
    """
    do_flip = policy.flip_prob > 0 and rng.random() < policy.flip_prob
    angle = float(rng.uniform(-policy.max_rotate_deg, policy.max_rotate_deg)) if policy.max_rotate_deg > 0 else 0.0
    rgb, thm, gt = s.rgb, s.thm, s.gt
    if do_flip:
        rgb = rgb[:, :, ::-1]
        thm = thm[:, :, ::-1]
        gt = gt[:, ::-1]
    if angle != 0.0:
        rgb = ndimage.rotate(rgb, angle, axes=(1, 2), reshape=False, order=1, mode="constant", cval=0.0)
        thm = ndimage.rotate(thm, angle, axes=(1, 2), reshape=False, order=1, mode="constant", cval=0.0)
        gt = ndimage.rotate(gt, angle, axes=(0, 1), reshape=False, order=0, mode="constant", cval=0)
        rgb = np.clip(rgb, 0.0, 1.0)
        thm = np.clip(thm, 0.0, 1.0)
    if policy.crop_hw is not None and tuple(policy.crop_hw) != (0, 0):
        ch, cw = policy.crop_hw
        h, w = gt.shape
        if ch > h or cw > w:
            raise ValueError(f"augment: crop {policy.crop_hw} exceeds image extents ({h}, {w})")
        if (ch, cw) != (h, w):
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            rgb = rgb[:, top : top + ch, left : left + cw]
            thm = thm[:, top : top + ch, left : left + cw]
            gt = gt[top : top + ch, left : left + cw]
    return replace(
        s,
        rgb=np.ascontiguousarray(rgb, dtype=np.float32),
        thm=np.ascontiguousarray(thm, dtype=np.float32),
        gt=np.ascontiguousarray(gt, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

SYNTH_CLASSES = 3  # background, disk (hot), box (warm)


def make_synthetic_dataset(n: int, seed: int, mode: str, size: int = 64) -> list[SamplePair]:
    """Paired 64x64 scenes with exact ground truth.

    Every scene holds one hot disk (class 1) and one warm box (class 2) on
    a cool background. "day": targets are visible in both modalities;
    "night": the rgb channels are near-uniform noise and only the thermal
    channel carries the targets.
    """
    if n < 1:
        raise ValueError("make_synthetic_dataset: n must be >= 1")
    if mode not in ("day", "night"):
        raise ValueError(f"make_synthetic_dataset: mode must be 'day' or 'night', got {mode!r}")
    samples = []
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(n):
        rng = np.random.default_rng([seed, 2, i])
        gt = np.zeros((size, size), dtype=np.int64)
        thm = rng.normal(0.20, 0.02, (size, size))

        r = int(rng.integers(5, 10))
        cy, cx = (int(rng.integers(r + 1, size - r - 1)) for _ in range(2))
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        hy, hx = int(rng.integers(4, 10)), int(rng.integers(4, 10))
        by, bx = (int(rng.integers(h + 1, size - h - 1)) for h in (hy, hx))
        box = (np.abs(yy - by) <= hy) & (np.abs(xx - bx) <= hx)

        gt[disk] = 1
        gt[box] = 2
        thm[gt == 1] = rng.normal(0.85, 0.02) + rng.normal(0, 0.01, int((gt == 1).sum()))
        thm[gt == 2] = rng.normal(0.55, 0.02) + rng.normal(0, 0.01, int((gt == 2).sum()))

        if mode == "day":
            base = np.array([0.10, 0.12, 0.10])
            rgb = base[:, None, None] + rng.normal(0, 0.01, (3, size, size))
            disk_color = np.array([0.75, 0.30, 0.25]) + rng.normal(0, 0.02, 3)
            box_color = np.array([0.25, 0.35, 0.80]) + rng.normal(0, 0.02, 3)
            for c in range(3):
                rgb[c][gt == 1] = disk_color[c]
                rgb[c][gt == 2] = box_color[c]
        else:
            rgb = 0.35 + rng.normal(0, 0.02, (3, size, size))

        samples.append(
            SamplePair(
                id=f"{mode}_{i:04d}",
                rgb=np.clip(rgb, 0, 1).astype(np.float32),
                thm=np.clip(thm, 0, 1)[None].astype(np.float32),
                gt=gt,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(entries: dict[str, np.ndarray], path) -> None:
    """Write named arrays as the RSFC little-endian container."""
    names = list(entries)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate_name", "duplicate entry names")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(names)))
        for name in names:
            arr = np.asarray(entries[name])
            if arr.dtype not in _CODE_FOR:
                raise CheckpointError("bad_dtype", f"entry {name!r}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def model_entries(net) -> dict[str, np.ndarray]:
    """Checkpoint entries of a model: config text, fused flag, all tensors."""
    entries: dict[str, np.ndarray] = {
        "cfg_text": np.frombuffer(net.cfg.to_text().encode("utf-8"), dtype=np.uint8).copy(),
        "meta.fused": np.array([1 if net.fused else 0], dtype=np.int64),
    }
    for name, t in list(net.named_parameters()) + list(net.named_buffers()):
        entries[name] = t.data
    return entries


def save_model(net, path, extra: dict[str, np.ndarray] | None = None) -> None:
    entries = model_entries(net)
    if extra:
        entries.update(extra)
    save_checkpoint(entries, path)


def load_model(path):
    """Rebuild a model from a checkpoint; returns (net, raw entries)."""
    from .config import parse_config_text
    from .model import RsfNet

    entries = load_checkpoint(path)
    if "cfg_text" not in entries or "meta.fused" not in entries:
        raise CheckpointError("missing_entry", "checkpoint lacks cfg_text/meta.fused entries")
    cfg = parse_config_text(bytes(entries["cfg_text"].tobytes()).decode("utf-8"))
    net = RsfNet(cfg)
    if int(entries["meta.fused"][0]):
        net.fuse()
    for name, t in list(net.named_parameters()) + list(net.named_buffers()):
        if name not in entries:
            raise CheckpointError("missing_entry", f"checkpoint lacks entry {name!r}")
        arr = entries[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise CheckpointError(
                "bad_shape", f"entry {name!r}: shape {arr.shape} != model {t.shape}"
            )
        t.data[...] = arr.astype(t.dtype)
    return net, entries


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Parse an RSFC container; raises CheckpointError with a distinct code."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError("missing_file", f"no checkpoint at {path}")
    blob = path.read_bytes()
    view = memoryview(blob)
    pos = 0

    def take(nbytes: int) -> memoryview:
        nonlocal pos
        if pos + nbytes > len(view):
            raise CheckpointError("truncated", f"truncated payload at byte {pos} of {path}")
        chunk = view[pos : pos + nbytes]
        pos += nbytes
        return chunk

    if bytes(take(4)) != CKPT_MAGIC:
        raise CheckpointError("bad_magic", f"{path} is not an RSFC checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError("bad_version", f"checkpoint version {version} != {CKPT_VERSION}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPE_CODES:
            raise CheckpointError("bad_dtype", f"entry {name!r}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).copy()
        if name in entries:
            raise CheckpointError("duplicate_name", f"duplicate entry {name!r}")
        entries[name] = arr
    if pos != len(view):
        raise CheckpointError("trailing_data", f"{len(view) - pos} unexpected trailing bytes")
    return entries

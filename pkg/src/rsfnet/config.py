"""Run configuration: defaults, config-file parsing, and CLI overrides.

Precedence is flags > config file > defaults. Defaults follow the published
training recipe (poly LR from 0.01, SGD momentum 0.9, weight decay 5e-4,
K=5, reduced widths 64/128/256/256, inner width 64, lambda 0.3); the
`toy_profile` shrinks everything to desk scale for synthetic-scene runs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace


class ConfigError(ValueError):
    """Bad configuration key or value."""


@dataclass
class RunConfig:
    # model structure
    num_classes: int = 9
    rgb_widths: tuple = (256, 512, 1024, 2048)
    thm_widths: tuple = (64, 128, 256, 512)
    blocks_per_stage: int = 2
    reduced_widths: tuple = (64, 128, 256, 256)
    inner_width: int = 64
    kernel_size: int = 5
    recal_kernel_size: int = 3
    conf_hidden: int = 0  # 0 -> stage-4 width / 4
    gate_mode: str = "counterpart"  # or "own"
    freeze_gates: int = 0  # 1 -> clamp both fusion gates to 0 (ablation)
    output_norm: str = "sigmoid"  # or "softmax"
    fp64: int = 0
    # training schedule
    lambda_reg: float = 0.3
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    poly_power: float = 0.9
    epochs: int = 300
    batch_size: int = 4
    crop_size: tuple = (0, 0)  # (0, 0) -> no cropping
    steps: int = 0  # 0 -> epochs * ceil(n / batch_size)
    checkpoint_every: int = 0  # 0 -> final checkpoint only
    aug_flip: int = 1
    aug_rotate: float = 10.0
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        for key in ("rgb_widths", "thm_widths", "reduced_widths"):
            val = getattr(self, key)
            if len(val) != 4 or min(val) < 1:
                raise ConfigError(f"{key} must list four positive stage widths")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigError("kernel_size must be odd")
        if self.recal_kernel_size % 2 == 0 or self.recal_kernel_size < 1:
            raise ConfigError("recal_kernel_size must be odd")
        if self.gate_mode not in ("counterpart", "own"):
            raise ConfigError("gate_mode must be 'counterpart' or 'own'")
        if self.output_norm not in ("sigmoid", "softmax"):
            raise ConfigError("output_norm must be 'sigmoid' or 'softmax'")
        if self.lambda_reg < 0:
            raise ConfigError("lambda_reg must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        return self

    def dtype(self):
        import numpy as np

        return np.float64 if self.fp64 else np.float32

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"


_INT_TUPLE_KEYS = {"rgb_widths", "thm_widths", "reduced_widths", "crop_size"}
_FLOAT_KEYS = {"lambda_reg", "lr", "momentum", "weight_decay", "poly_power", "aug_rotate"}
_STR_KEYS = {"gate_mode", "output_norm"}
_ALL_KEYS = {f.name for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _INT_TUPLE_KEYS:
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v != "")
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _STR_KEYS:
            return raw
        return int(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse value {raw!r}")


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse `key = value` lines ('#' starts a comment) over `base`."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"unknown config key: {key!r}")
        values[key] = _parse_value(key, raw)
    cfg = replace(base or RunConfig(), **values)
    return cfg.validate()


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply non-None CLI overrides (highest precedence)."""
    clean = {k: v for k, v in overrides.items() if v is not None}
    bad = set(clean) - _ALL_KEYS
    if bad:
        raise ConfigError(f"unknown config key: {sorted(bad)[0]!r}")
    return replace(cfg, **clean).validate()


def toy_profile(base: RunConfig | None = None) -> RunConfig:
    """Desk-scale profile used for synthetic-scene training and tests."""
    cfg = replace(
        base or RunConfig(),
        num_classes=3,
        rgb_widths=(8, 16, 32, 32),
        thm_widths=(4, 8, 16, 16),
        blocks_per_stage=1,
        reduced_widths=(8, 12, 16, 16),
        inner_width=8,
        kernel_size=3,
        recal_kernel_size=3,
        # softmax keeps the true-class loss term competitive across channels;
        # with per-channel sigmoids the all-ones output is a degenerate optimum
        output_norm="softmax",
        lr=0.05,
        epochs=10,
        batch_size=4,
        crop_size=(0, 0),
        aug_flip=0,
        aug_rotate=0.0,
    )
    return cfg.validate()

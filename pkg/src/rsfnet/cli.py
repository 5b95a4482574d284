"""Command-line surface: synth, plg, train, fuse, eval, bench.

Exit codes: 0 success, 2 IO/format error, 3 validation/config error,
1 internal error. All randomness flows from --seed through named
sub-streams (init, augment, synthetic, shuffle), so identical invocations
produce byte-identical CSV outputs.
"""

from __future__ import annotations

import argparse
import shutil
import sys
import traceback
from pathlib import Path

import numpy as np

from . import data_io, metrics, plg, reparam
from . import model as M
from .backend import active_backend
from .config import ConfigError, RunConfig, apply_overrides, load_config, toy_profile
from .data_io import CheckpointError, DatasetError
from .model import ValidationError
from .tensor import ShapeError


def _parse_scales(text: str) -> tuple[int, ...]:
    try:
        scales = tuple(int(v) for v in text.replace(" ", "").split(",") if v != "")
    except ValueError:
        raise ConfigError(f"--scales: cannot parse {text!r}")
    if not scales:
        raise ConfigError("--scales: at least one radius required")
    return scales


def _load_samples(args, cfg_seed: int) -> list[data_io.SamplePair]:
    if args.synthetic:
        return data_io.make_synthetic_dataset(args.n, cfg_seed, args.synthetic)
    if not args.dataset:
        raise ConfigError("either --dataset or --synthetic is required")
    return data_io.load_dataset(args.dataset, args.split)


def _write_csv(path: Path, header: str, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    samples = data_io.make_synthetic_dataset(args.n, args.seed, args.synthetic)
    data_io.save_dataset(samples, args.out, args.split)
    print(f"wrote {len(samples)} {args.synthetic} samples to {args.out} (split '{args.split}')")
    return 0


def cmd_plg(args) -> int:
    samples = _load_samples(args, args.seed)
    scales = _parse_scales(args.scales) if args.scales else None
    out = Path(args.out)
    rows = []
    for s in samples:
        pair = plg.generate_pseudo_labels(s.rgb * 255.0, s.thm[0] * 255.0, s.gt, scales=scales)
        rows.append(f"{s.id},{pair.p_rgb:.6f},{pair.p_thm:.6f}")
        if args.save_maps:
            use = scales or plg.clip_scales(plg.DEFAULT_SCALES, *s.gt.shape)
            for tag, intensity in (("rgb", plg.to_grayscale(s.rgb * 255.0)), ("thm", s.thm[0] * 255.0)):
                sal = plg.fine_grained_saliency(intensity, use)
                _, mask = plg.otsu_binarize(sal)
                data_io.write_png(out / "saliency" / f"{s.id}_{tag}.png", (sal / 255.0)[None])
                data_io.write_png(out / "masks" / f"{s.id}_{tag}.png", mask * 255)
    _write_csv(out / "pseudo_labels.csv", "id,p_rgb,p_thm", rows)
    print(f"wrote {len(rows)} pseudo-label rows to {out / 'pseudo_labels.csv'}")
    return 0


def _resolve_train_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.synthetic:
        cfg = toy_profile()
    else:
        cfg = RunConfig()
    overrides = {"seed": args.seed}
    if args.fp64:
        overrides["fp64"] = 1
    if args.steps is not None:
        overrides["steps"] = args.steps
    return apply_overrides(cfg, overrides)


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    out = Path(args.out)
    samples = _load_samples(args, cfg.seed)
    if not samples:
        raise ValidationError("training set is empty")
    scales = _parse_scales(args.scales) if args.scales else None
    samples = data_io.attach_pseudo_labels(samples, scales=scales, num_classes=cfg.num_classes)

    augment_fn = None
    policy = data_io.AugmentPolicy(
        flip_prob=0.5 if cfg.aug_flip else 0.0,
        max_rotate_deg=cfg.aug_rotate,
        crop_hw=cfg.crop_size if tuple(cfg.crop_size) != (0, 0) else None,
    )
    if policy.flip_prob > 0 or policy.max_rotate_deg > 0 or policy.crop_hw is not None:
        def augment_fn(sample, step):
            rng = data_io.sample_rng(cfg.seed, f"{sample.id}@{step}")
            return data_io.augment(sample, rng, policy)

    net = M.RsfNet(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.txt").write_text(cfg.to_text(), encoding="utf-8")
    rows = []

    def on_step(row):
        rows.append(f"{row['step']},{row['lr']:.8f},{row['loss']:.8f},{row['seg']:.8f},{row['reg']:.8f}")
        if cfg.checkpoint_every and (row["step"] + 1) % cfg.checkpoint_every == 0:
            data_io.save_model(net, out / f"checkpoint_{row['step'] + 1:06d}.rsfc")

    log = M.fit(net, samples, steps=cfg.steps or None, augment_fn=augment_fn, on_step=on_step)
    _write_csv(out / "loss_log.csv", "step,lr,loss,seg,reg", rows)
    data_io.save_model(net, out / "checkpoint_final.rsfc")
    print(
        f"trained {len(log)} steps on {len(samples)} samples "
        f"(loss {log[0]['loss']:.4f} -> {log[-1]['loss']:.4f}); "
        f"checkpoint at {out / 'checkpoint_final.rsfc'}"
    )
    return 0


def cmd_fuse(args) -> int:
    net, _ = data_io.load_model(args.checkpoint)
    out = Path(args.out)
    if net.fused:
        print("checkpoint is already fused; copying unchanged")
        out.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(args.checkpoint, out)
        return 0
    rng = np.random.default_rng([net.cfg.seed, 4])
    extra = {}
    worst = 0.0
    for s, stage in enumerate(net.rsf_stages, start=1):
        for mod in ("rgb", "thm"):
            block = getattr(stage, f"spatial_{mod}")
            fused = reparam.fuse_branch_block(block)
            rep = reparam.verify_equivalence(block, fused, trials=args.trials, tol=args.tol, rng=rng)
            print(
                f"stage {s} {mod}: max |multi-branch - fused| = {rep.max_abs_dev:.3e} "
                f"({'pass' if rep.passed else 'FAIL'} at tol {args.tol:g})"
            )
            if not rep.passed:
                raise RuntimeError(
                    f"fusion equivalence failed at stage {s} {mod}: {rep.max_abs_dev:.3e} > {args.tol:g}"
                )
            worst = max(worst, rep.max_abs_dev)
            setattr(stage, f"spatial_{mod}", fused)
            extra[f"meta.fuse_report.s{s}.{mod}.max_dev"] = np.array([rep.max_abs_dev])
    net.fused = True
    extra["meta.fuse_report.tol"] = np.array([args.tol])
    extra["meta.fuse_report.trials"] = np.array([args.trials], dtype=np.int64)
    data_io.save_model(net, out, extra=extra)
    print(f"fused checkpoint written to {out} (worst deviation {worst:.3e})")
    return 0


def cmd_eval(args) -> int:
    net, _ = data_io.load_model(args.checkpoint)
    samples = _load_samples(args, args.seed)
    if not samples:
        raise ValidationError("evaluation set is empty")
    bad = max(int(s.gt.max()) for s in samples)
    if bad >= net.cfg.num_classes:
        raise ValidationError(f"class index {bad} >= model classes {net.cfg.num_classes}")
    cm, report, preds = metrics.evaluate_model(net, samples, include_class0=not args.skip_class0)
    print(f"{'class':>6} {'acc':>8} {'iou':>8}")
    for c in range(net.cfg.num_classes):
        acc = f"{report.acc[c]:.4f}" if np.isfinite(report.acc[c]) else "-"
        iou = f"{report.iou[c]:.4f}" if np.isfinite(report.iou[c]) else "-"
        print(f"{c:>6} {acc:>8} {iou:>8}")
    print(f"mAcc {report.macc:.4f}  mIoU {report.miou:.4f}  (pixels {cm.total})")
    if report.excluded:
        print(f"classes excluded (absent from gt and pred): {report.excluded}")
    if args.out:
        out = Path(args.out)
        rows = []
        for c in range(net.cfg.num_classes):
            acc = f"{report.acc[c]:.6f}" if np.isfinite(report.acc[c]) else ""
            iou = f"{report.iou[c]:.6f}" if np.isfinite(report.iou[c]) else ""
            rows.append(f"{c},{acc},{iou}")
        rows.append(f"mean,{report.macc:.6f},{report.miou:.6f}")
        _write_csv(out / "metrics.csv", "class,acc,iou", rows)
        if args.save_maps:
            for sid, pred in preds.items():
                data_io.write_png(out / "pred" / f"{sid}.png", pred.astype(np.uint8))
    return 0


def cmd_bench(args) -> int:
    net, _ = data_io.load_model(args.checkpoint)
    hw = (args.height, args.width)
    if hw[0] % 32 or hw[1] % 32:
        raise ValidationError(f"bench extents {hw} must be divisible by 32")
    dtype = net.cfg.dtype()
    rng = np.random.default_rng([net.cfg.seed, 5])
    rgb = rng.random((1, 3, *hw)).astype(dtype)
    thm = rng.random((1, 1, *hw)).astype(dtype)

    variants = []
    if net.fused:
        variants.append(("fused", net))
    else:
        variants.append(("multi-branch", net))
        fused_net, _ = data_io.load_model(args.checkpoint)
        fused_net.fuse()
        variants.append(("fused", fused_net))

    print(f"FLOPs convention: 2 per multiply-accumulate; backend: {active_backend()}")
    print(f"{'variant':>14} {'params':>10} {'flops':>14} {'mean ms':>9} {'p50 ms':>9} {'p95 ms':>9}")
    rows = []
    for name, variant in variants:
        cost = metrics.count_cost(variant, hw)
        lat = metrics.bench_latency(lambda v=variant: v.predict(rgb[0], thm[0]), args.trials, args.warmup)
        print(
            f"{name:>14} {cost.params:>10} {cost.flops:>14} "
            f"{lat.mean_ms:>9.2f} {lat.p50_ms:>9.2f} {lat.p95_ms:>9.2f}"
        )
        rows.append(f"{name},{cost.params},{cost.flops},{lat.mean_ms:.4f},{lat.p50_ms:.4f},{lat.p95_ms:.4f}")
    if args.out:
        _write_csv(Path(args.out) / "bench.csv", "variant,params,flops,mean_ms,p50_ms,p95_ms", rows)
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rsfnet",
        description="Residual spatial fusion segmentation: pseudo-labels, training, "
        "branch fusion, evaluation, and benchmarking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, dataset=False):
        p.add_argument("--seed", type=int, default=0, help="root seed for all sub-streams")
        if dataset:
            p.add_argument("--dataset", help="dataset root (rgb/, thm/, labels/, <split>.txt)")
            p.add_argument("--split", default="train", help="split list name (default: train)")
            p.add_argument("--synthetic", choices=("day", "night"), help="generate scenes instead")
            p.add_argument("--n", type=int, default=16, help="synthetic sample count")

    p = sub.add_parser("synth", help="write a synthetic dataset as PNGs")
    p.add_argument("--synthetic", choices=("day", "night"), required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("plg", help="pseudo-label CSV (and optional saliency maps)")
    add_common(p, dataset=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scales", help="saliency radii, e.g. 2,4,8")
    p.add_argument("--save-maps", action="store_true", help="emit saliency/mask PNGs")
    p.set_defaults(func=cmd_plg)

    p = sub.add_parser("train", help="train on a dataset or synthetic scenes")
    add_common(p, dataset=True)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="override the step budget")
    p.add_argument("--scales", help="saliency radii for pseudo-labels")
    p.add_argument("--fp64", action="store_true", help="train in float64")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="re-parameterize all fusion blocks for inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=16)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="per-class Acc/IoU tables for a checkpoint")
    add_common(p, dataset=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="write metrics.csv (and label maps) here")
    p.add_argument("--save-maps", action="store_true", help="emit predicted label PNGs")
    p.add_argument("--skip-class0", action="store_true", help="exclude class 0 from the means")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="cost + latency, fused vs multi-branch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, CheckpointError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValidationError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary maps bugs to exit 1
        traceback.print_exc()
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

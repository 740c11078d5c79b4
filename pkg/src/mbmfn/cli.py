"""Command-line interface: train, eval, infer, ablate, gradcheck, params."""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from .blocks import (
    ATTENTION_KINDS,
    BRANCH_MODES,
    MBMFN,
    ModelConfig,
    count_params,
    init_params,
    param_breakdown,
)
from .config import RunConfig, apply_overrides, format_config, parse_config
from .data import (
    ImagePlane,
    bicubic_resize,
    load_image,
    load_manifest,
    rgb_to_ycbcr,
    save_image,
    ycbcr_to_rgb,
)
from .gradcheck import TOLERANCE, check_model, check_ops
from .metrics import evaluate
from .tensor import Tensor
from .training import load_checkpoint, train


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="path to a key = value config file")
    p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
    p.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def _run_config(args) -> RunConfig:
    rc = RunConfig()
    if args.config:
        rc = parse_config(Path(args.config).read_text())
    if args.set:
        rc = apply_overrides(rc, args.set)
    if args.seed is not None:
        rc = apply_overrides(rc, [f"train.seed={args.seed}"])
    return rc


def cmd_train(args) -> int:
    rc = _run_config(args)
    if args.epochs is not None:
        rc = apply_overrides(rc, [f"train.epochs={args.epochs}"])
    if not rc.data.train_manifest:
        print("error: data.train_manifest is not set", file=sys.stderr)
        return 1
    manifest = load_manifest(rc.data.train_manifest)
    model = MBMFN.create(rc.model, seed=rc.train.seed)
    print(f"model: {count_params(model.params)} parameters, scale x{rc.model.scale}")
    print(f"training on {len(manifest)} images for {rc.train.epochs} epochs")
    out_dir = Path(rc.data.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # Effective config kept beside the outputs for provenance.
    (out_dir / "config.cfg").write_text(format_config(rc))
    result = train(model, manifest, rc.train, out_dir)
    print(f"loss log: {result.loss_log}")
    print(f"last checkpoint: {result.last_checkpoint}")
    print(f"final epoch mean L1: {result.epoch_means[-1]:.6f}")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        model = ckpt.model()
        scale = model.config.scale
        if args.scale is not None and args.scale != scale:
            print(
                f"error: checkpoint is x{scale}, --scale asked for x{args.scale}",
                file=sys.stderr,
            )
            return 1
    elif args.model == "bicubic":
        model = "bicubic"
        if args.scale is None:
            print("error: --scale is required with --model bicubic", file=sys.stderr)
            return 1
        scale = args.scale
    else:
        print("error: pass --checkpoint PATH or --model bicubic", file=sys.stderr)
        return 1
    report = evaluate(model, manifest, scale, shave=args.shave, dataset=args.dataset)
    print(report.to_table(), end="")
    if args.report_dir:
        rdir = Path(args.report_dir)
        rdir.mkdir(parents=True, exist_ok=True)
        base = f"{args.dataset}_x{scale}_{report.model_id}"
        (rdir / f"{base}.csv").write_text(report.to_csv())
        (rdir / f"{base}.txt").write_text(report.to_table())
        print(f"report written to {rdir / (base + '.csv')}")
    return 0


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model()
    scale = model.config.scale
    rgb = load_image(args.input)
    y, cb, cr = rgb_to_ycbcr(rgb)
    start = time.perf_counter()
    out = model.forward(Tensor(y.data[None, None, :, :]))
    elapsed = time.perf_counter() - start
    sr_y = ImagePlane(np.clip(out.data[0, 0], 0.0, 1.0), "y")
    sr_cb = bicubic_resize(cb, y.h * scale, y.w * scale)
    sr_cr = bicubic_resize(cr, y.h * scale, y.w * scale)
    save_image(ycbcr_to_rgb(sr_y, sr_cb, sr_cr), args.output)
    print(
        f"{args.input} ({y.h}x{y.w}) -> {args.output} "
        f"({y.h * scale}x{y.w * scale}) in {elapsed:.2f}s"
    )
    return 0


def _ablation_variants(axis: str, base: ModelConfig) -> list:
    """(label, config) pairs for one sweep axis."""
    variants = []
    if axis == "wiring":
        for basic in (False, True):
            for mode in BRANCH_MODES:
                label = f"{mode}{'+basic' if basic else ''}"
                variants.append(
                    (label, dataclasses.replace(base, branch_input_mode=mode, basic_branch=basic))
                )
    elif axis == "attention":
        for kind in ATTENTION_KINDS:
            variants.append((f"att-{kind}", dataclasses.replace(base, attention_kind=kind)))
    elif axis == "upsampler":
        rows = [
            ("nearest-direct", dict(upsampler="nearest_direct", recon_attention=False)),
            ("nearest-direct-att", dict(upsampler="nearest_direct", recon_attention=True)),
            ("stepwise-shared", dict(upsampler="nearest_stepwise", recon_attention=False,
                                     recon_weight_sharing=True)),
            ("stepwise-shared-att", dict(upsampler="nearest_stepwise", recon_attention=True,
                                         recon_weight_sharing=True)),
            ("stepwise-unshared-att", dict(upsampler="nearest_stepwise", recon_attention=True,
                                           recon_weight_sharing=False)),
            ("subpixel", dict(upsampler="subpixel")),
        ]
        for label, kw in rows:
            variants.append((label, dataclasses.replace(base, **kw)))
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    return variants


def cmd_ablate(args) -> int:
    rc = _run_config(args)
    variants = _ablation_variants(args.axis, rc.model)
    rng = np.random.default_rng(rc.train.seed)
    probe = Tensor(rng.random((1, rc.model.in_channels, 16, 16)).astype(np.float32))
    failures = 0
    print(f"{'variant':<24} {'params':>10}  status")
    for label, cfg in variants:
        try:
            model = MBMFN.create(cfg, seed=rc.train.seed)
            out = model.forward(probe)
            expect = (probe.n, cfg.in_channels, 16 * cfg.scale, 16 * cfg.scale)
            if out.shape != expect:
                raise ValueError(f"forward produced {out.shape}, expected {expect}")
            status = "ok"
            if args.epochs > 0:
                if not rc.data.train_manifest:
                    raise ValueError("--epochs needs data.train_manifest in the config")
                manifest = load_manifest(rc.data.train_manifest)
                tcfg = dataclasses.replace(rc.train, epochs=args.epochs)
                out_dir = Path(rc.data.checkpoint_dir) / f"ablate_{args.axis}" / label
                result = train(model, manifest, tcfg, out_dir)
                status = f"trained, final L1 {result.epoch_means[-1]:.5f}"
            print(f"{label:<24} {count_params(model.params):>10}  {status}")
        except Exception as exc:  # report and keep sweeping
            failures += 1
            print(f"{label:<24} {'-':>10}  FAILED: {exc}")
    if failures:
        print(f"{failures} variant(s) failed")
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _run_config(args).model if args.config else ModelConfig(
        scale=2, num_blocks=1, trunk_channels=8, distill_channels=6
    )
    seed = args.seed if args.seed is not None else 0
    start = time.perf_counter()
    rows = [(f"op:{name}", err) for name, err in check_ops(seed)]
    rows += [(f"param:{name}", err) for name, err in check_model(cfg, seed)]
    worst = max(err for _, err in rows)
    failed = [(n, e) for n, e in rows if e >= TOLERANCE]
    for name, err in failed:
        print(f"FAIL {name}: {err:.3e}")
    print(
        f"checked {len(rows)} gradients in {time.perf_counter() - start:.1f}s, "
        f"worst rel error {worst:.3e} (tolerance {TOLERANCE:.0e})"
    )
    return 1 if failed else 0


def cmd_params(args) -> int:
    rc = _run_config(args)
    store = init_params(rc.model, seed=rc.train.seed)
    total = count_params(store)
    for group, subs in param_breakdown(store).items():
        gsum = sum(subs.values())
        print(f"{group:<12} {gsum:>10}")
        if len(subs) > 1 or "" not in subs:
            for sub, n in subs.items():
                print(f"  {sub:<10} {n:>10}")
    print(f"{'total':<12} {total:>10}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mbmfn", description="single-image super-resolution toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config")
    p.add_argument("--epochs", type=int, help="shorthand for --set train.epochs=N")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or the bicubic baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--model", choices=["bicubic"], help="baseline instead of a checkpoint")
    p.add_argument("--scale", type=int, choices=[2, 3, 4])
    p.add_argument("--shave", type=int, default=None)
    p.add_argument("--dataset", default="dataset")
    p.add_argument("--report-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="upscale one image with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="sweep one ablation axis")
    p.add_argument("--axis", required=True, choices=["wiring", "attention", "upsampler"])
    p.add_argument("--epochs", type=int, default=0, help="optionally train each variant")
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_config_args(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter count breakdown")
    _add_config_args(p)
    p.set_defaults(func=cmd_params)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

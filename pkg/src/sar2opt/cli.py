"""``sar2opt`` command line: synth, train, translate, evaluate.

Exit status: 0 success, 2 configuration error, 3 data/checkpoint error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import data as datamod
from .metrics import FeatureExtractor, evaluate_pairs
from .tensor import ContractError, DimensionError
from .training import (
    CheckpointError,
    ModelConfig,
    NumericalError,
    TrainConfig,
    build_model,
    load_checkpoint,
    run_training,
    translate_images,
)

log = logging.getLogger("sar2opt")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

PRESETS = {
    "paper": dict(size=256, depth=6, ngf=50, ndf=64, extractor="pixel8"),
    "desk": dict(size=64, depth=4, ngf=8, ndf=8, extractor="pixel8"),
}


class ConfigError(ValueError):
    pass


def _write_config(out: Path, command: str, values: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": command, **values}
    (out / "effective_config.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _add_arch(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("architecture")
    g.add_argument("--preset", choices=sorted(PRESETS), default="paper")
    g.add_argument("--size", type=int, help="square image/patch size (preset default)")
    g.add_argument("--depth", type=int, help="translator downsamplings")
    g.add_argument("--ngf", type=int, help="translator base width")
    g.add_argument("--ndf", type=int, help="discriminator base width")
    g.add_argument("--n-stride2", type=int, default=3)
    g.add_argument("--sar-channels", type=int, choices=(1, 3), default=1)


def _deepest_fit(size: int, limit: int) -> int:
    depth = 0
    while depth < limit and size % 2 ** (depth + 1) == 0 and size // 2 ** (depth + 1) >= 2:
        depth += 1
    return depth


def _resolve_arch(args) -> ModelConfig:
    preset = PRESETS[args.preset]
    explicit_depth = args.depth is not None
    for key in ("size", "depth", "ngf", "ndf"):
        if getattr(args, key) is None:
            setattr(args, key, preset[key])
    if not explicit_depth and args.size // 2 ** args.depth < 2:
        fit = _deepest_fit(args.size, args.depth)
        if fit < 1:
            raise ConfigError(f"--size {args.size} admits no translator depth")
        log.warning("preset depth %d does not fit --size %d; using depth %d", args.depth, args.size, fit)
        args.depth = fit
    return ModelConfig(args.sar_channels, args.size, args.depth, args.ngf, args.ndf, args.n_stride2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sar2opt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="export a synthetic co-registered dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--speckle", choices=("on", "off"), default="on")
    p.add_argument("--sar-channels", type=int, choices=(1, 3), default=1)

    p = sub.add_parser("train", help="train the reciprocal translators")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="dataset root with A/ and B/")
    src.add_argument("--synth", action="store_true", help="train on an in-memory synthetic set")
    p.add_argument("--n-synth", type=int, default=256)
    p.add_argument("--synth-seed", type=int, default=0)
    p.add_argument("--speckle", choices=("on", "off"), default="on")
    p.add_argument("--patch-stride", type=int, help="patch grid stride (default: patch size)")
    _add_arch(p)
    g = p.add_argument_group("optimisation")
    g.add_argument("--steps", type=int, default=1000)
    g.add_argument("--batch-size", type=int, default=4)
    g.add_argument("--beta", type=float, default=20.0)
    g.add_argument("--lr", type=float, default=2e-4)
    g.add_argument("--adam-beta1", type=float, default=0.5)
    g.add_argument("--adam-beta2", type=float, default=0.999)
    g.add_argument("--adam-eps", type=float, default=1e-8)
    g.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    g.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("run"))
    p.add_argument("--checkpoint", type=Path, help="default: <out>/checkpoint.sogr")
    p.add_argument("--checkpoint-every", type=int, default=100)
    p.add_argument("--resume", type=Path, help="continue from this checkpoint")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("translate", help="translate images with a trained checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--input", required=True, type=Path, help="dataset root; reads A/ (s2o) or B/ (o2s)")
    p.add_argument("--direction", choices=("s2o", "o2s"), default="s2o")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("evaluate", help="L1/PSNR/SSIM/FID of translated vs. true images")
    p.add_argument("--pred", required=True, type=Path, help="directory of translated PNGs")
    p.add_argument("--true", required=True, type=Path, help="directory of true PNGs")
    p.add_argument("--extractor", choices=("pixel8", "randconv"), default="pixel8")
    p.add_argument("--extractor-seed", type=int, default=0)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--no-shrink", action="store_true", help="disable covariance shrinkage")
    p.add_argument("--out", type=Path, help="directory for report.json and the figure")
    p.add_argument("--no-figures", action="store_true")
    return parser


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def cmd_synth(args) -> int:
    pairs = datamod.synth_dataset(args.seed, args.n, args.size, args.speckle == "on", args.sar_channels)
    meta = {"seed": args.seed, "size": args.size, "speckle": args.speckle, "sar_channels": args.sar_channels}
    datamod.export_dataset(pairs, args.out, meta)
    _write_config(args.out, "synth", {"n": args.n, **meta})
    log.info("wrote %d pairs to %s", len(pairs), args.out)
    return 0


def _training_pairs(args, model_cfg: ModelConfig) -> list:
    if args.synth:
        return datamod.synth_dataset(
            args.synth_seed, args.n_synth, model_cfg.image_size, args.speckle == "on", model_cfg.sar_channels
        )
    manifest, pairs = datamod.load_dataset(args.data, patch_size=model_cfg.image_size)
    if manifest.sar_channels != model_cfg.sar_channels:
        raise ConfigError(f"dataset is {manifest.channel_mode} but --sar-channels is {model_cfg.sar_channels}")
    patches = []
    for pair in pairs:
        patches.extend(datamod.cut_patches(pair, model_cfg.image_size, args.patch_stride))
    return patches


def cmd_train(args) -> int:
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model, cfg = ckpt.model, TrainConfig(**{**asdict(ckpt.train_config), "total_steps": args.steps})
        model_cfg = model.config
        args.size, args.depth, args.ngf, args.ndf = model_cfg.image_size, model_cfg.depth, model_cfg.ngf, model_cfg.ndf
        args.sar_channels, args.n_stride2 = model_cfg.sar_channels, model_cfg.n_stride2
    else:
        model_cfg = _resolve_arch(args)
        cfg = TrainConfig(
            beta=args.beta,
            learning_rate=args.lr,
            adam_beta1=args.adam_beta1,
            adam_beta2=args.adam_beta2,
            adam_eps=args.adam_eps,
            batch_size=args.batch_size,
            total_steps=args.steps,
            seed=args.seed,
            optimizer_kind=args.optimizer,
        )
        model = build_model(model_cfg, cfg.seed)
    pairs = _training_pairs(args, model_cfg)
    ckpt_path = args.checkpoint or args.out / "checkpoint.sogr"
    _write_config(
        args.out,
        "train",
        {
            "model": asdict(model_cfg),
            "train": asdict(cfg),
            "data": str(args.data) if args.data else None,
            "synth": args.synth,
            "n_synth": args.n_synth,
            "synth_seed": args.synth_seed,
            "speckle": args.speckle,
            "patch_stride": args.patch_stride,
            "checkpoint": str(ckpt_path),
            "checkpoint_every": args.checkpoint_every,
            "resume": str(args.resume) if args.resume else None,
            "n_pairs": len(pairs),
        },
    )
    records: List[dict] = []
    log_path = args.out / "train_log.jsonl"
    with log_path.open("a" if args.resume else "w") as fh:

        def on_step(report):
            rec = report.as_dict()
            records.append(rec)
            line = json.dumps(rec, sort_keys=True)
            fh.write(line + "\n")
            _emit(rec)

        try:
            run_training(model, pairs, cfg, on_step=on_step, checkpoint_path=ckpt_path,
                         checkpoint_every=args.checkpoint_every)
        finally:
            if records and not args.no_figures:
                from .plotting import plot_losses

                plot_losses(records, args.out / "losses.png")
    log.info("checkpoint at %s (step %d)", ckpt_path, model.step)
    return 0


def _png_files(directory: Path) -> List[Path]:
    if not directory.is_dir():
        raise datamod.DataError(f"{directory} is not a directory")
    return sorted(directory.glob("*.png"))


def cmd_translate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    mc = model.config
    net = model.t_s2o if args.direction == "s2o" else model.t_o2s
    expect_c = net.config.in_channels
    src = args.input / ("A" if args.direction == "s2o" else "B")
    files = _png_files(src)
    if not files:
        raise datamod.DataError(f"no PNG images in {src}")
    images = []
    for f in files:
        im = datamod.read_png(f)
        if im.shape != (mc.image_size, mc.image_size, expect_c):
            raise DimensionError(
                f"{f.name} has shape {list(im.shape)}, checkpoint expects {[mc.image_size, mc.image_size, expect_c]}"
            )
        images.append(im)
    args.out.mkdir(parents=True, exist_ok=True)
    for f, out in zip(files, translate_images(net, images)):
        datamod.write_png(args.out / f.name, out)
    _write_config(
        args.out,
        "translate",
        {"checkpoint": str(args.checkpoint), "input": str(args.input), "direction": args.direction,
         "step": model.step, "model": asdict(mc), "n_images": len(files)},
    )
    log.info("translated %d images into %s", len(files), args.out)
    return 0


def cmd_evaluate(args) -> int:
    pred_files = {f.name: f for f in _png_files(args.pred)}
    true_files = {f.name: f for f in _png_files(args.true)}
    if set(pred_files) != set(true_files):
        odd = sorted(set(pred_files) ^ set(true_files))
        raise datamod.DataError(f"unmatched filenames between {args.pred} and {args.true}: {odd[:5]}")
    names = sorted(pred_files)
    fakes = [datamod.read_png(pred_files[n]) for n in names]
    reals = [datamod.read_png(true_files[n]) for n in names]
    extractor = FeatureExtractor(args.extractor, args.extractor_seed, 64 if args.extractor == "pixel8" else args.feature_dim)
    report = evaluate_pairs(list(zip(fakes, reals)), extractor, shrink=not args.no_shrink)
    _emit(report.as_dict())
    if args.out:
        _write_config(
            args.out,
            "evaluate",
            {"pred": str(args.pred), "true": str(args.true), "extractor": extractor.describe(),
             "shrink": not args.no_shrink},
        )
        (args.out / "report.json").write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")
        if not args.no_figures:
            from .plotting import plot_comparison

            plot_comparison(fakes, reals, report.per_pair, args.out / "comparison.png")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "translate": cmd_translate, "evaluate": cmd_evaluate}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        # non-finite values are reported by the loss checks, not numpy warnings
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            return COMMANDS[args.command](args)
    except NumericalError as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except (datamod.DataError, CheckpointError, DimensionError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except (ConfigError, ContractError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

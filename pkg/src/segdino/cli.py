"""Command-line entry point: ``segdino <verb> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime or
numeric error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from segdino import config as cfgmod
from segdino.bench import run_bench
from segdino.config import RunConfig, format_config
from segdino.data import load_dataset, load_image, save_mask, split, synth_generate, write_dataset
from segdino.decoder import trainable_param_count
from segdino.encoder import init_frozen
from segdino.errors import ConfigError, SegDinoError
from segdino.metrics import report_csv, summary_table
from segdino.pipeline import Model, evaluate_samples, load_model, preprocessor
from segdino.trainer import gradcheck, loss_csv, train

log = logging.getLogger("segdino")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

LOSS_CSV = "loss.csv"
METRICS_CSV = "metrics.csv"
SUMMARY_TXT = "summary.txt"
CHECKPOINT = "checkpoint.sgdw"
CONFIG_TXT = "config.txt"


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.paper_defaults:
        cfg = cfgmod.apply_overrides(cfg, cfgmod.PAPER_DEFAULTS, validate=False)
    config_path = args.config
    if config_path is None and getattr(args, "checkpoint", None):
        sibling = Path(args.checkpoint).parent / CONFIG_TXT
        if sibling.exists():
            config_path = sibling
    if config_path is not None:
        cfg = cfgmod.parse_config(Path(config_path).read_text(encoding="utf-8"), base=cfg, validate=False)
    if args.seed is not None:
        cfg = cfgmod.with_seed(cfg, args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg.validate()


def echo_config(cfg: RunConfig) -> None:
    print("# effective configuration")
    print(format_config(cfg), end="")
    print("# end configuration")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_summary(samples) -> str:
    fg = [float(s.mask.labels.mean()) for s in samples]
    return f"samples: {len(samples)}  mean foreground fraction: {np.mean(fg):.4f}  (min {min(fg):.4f}, max {max(fg):.4f})"


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg) / "data"
    samples = synth_generate(cfg.data.synth)
    manifest = write_dataset(samples, out)
    train_set, test_set = split(samples, cfg.data.synth.seed, cfg.data.train_fraction)
    print(f"wrote {len(samples)} images and masks under {out}")
    print(f"manifest: {manifest}")
    print(_dataset_summary(samples))
    print(f"split: {len(train_set)} train / {len(test_set)} test")
    return EXIT_OK


def _manifest_path(cfg: RunConfig, explicit: str | None = None) -> Path:
    if explicit:
        return Path(explicit)
    if cfg.data.manifest:
        return Path(cfg.data.manifest)
    return Path(cfg.output_dir) / "data" / "manifest.tsv"


def _write_eval(out: Path, reports, summary, cfg: RunConfig) -> None:
    (out / METRICS_CSV).write_text(report_csv(reports, summary))
    table = summary_table(summary, len(reports), cfg.metrics.beta_sq, cfg.metrics.threshold)
    (out / SUMMARY_TXT).write_text(table)
    print(table, end="")


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    (out / CONFIG_TXT).write_text(format_config(cfg))
    manifest = _manifest_path(cfg)
    if cfg.data.manifest is None and not manifest.exists():
        write_dataset(synth_generate(cfg.data.synth), manifest.parent)
    samples = load_dataset(manifest)
    train_set, test_set = split(samples, cfg.data.synth.seed, cfg.data.train_fraction)
    if not test_set:
        test_set = train_set
    print(f"training on {len(train_set)} samples, evaluating on {len(test_set)}")
    encoder = init_frozen(cfg.encoder, cfg.train.dtype)
    result = train(
        train_set, cfg.encoder, cfg.decoder, cfg.train, encoder=encoder, preprocess=preprocessor(cfg),
        max_steps=args.max_steps,
    )
    (out / LOSS_CSV).write_text(loss_csv(result.losses))
    model = Model(encoder, result.params, cfg)
    model.save(out / CHECKPOINT)
    if result.losses:
        print(f"steps: {len(result.losses)}  final loss: {result.losses[-1].loss:.6f}")
    reports, summary = evaluate_samples(model, test_set)
    _write_eval(out, reports, summary, cfg)
    return EXIT_OK


def _select(samples, cfg: RunConfig, which: str):
    if which == "all":
        return list(samples)
    train_set, test_set = split(samples, cfg.data.synth.seed, cfg.data.train_fraction)
    if which == "train":
        return train_set
    return test_set or train_set


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT
    model = load_model(ckpt, cfg)
    samples = _select(load_dataset(_manifest_path(cfg, args.manifest)), cfg, args.split)
    reports, summary = evaluate_samples(model, samples, gt_as_prediction=args.gt_as_prediction)
    _write_eval(out, reports, summary, cfg)
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT
    model = load_model(ckpt, cfg)
    image = load_image(args.image)
    _, mask, _ = model.predict(image)
    target = Path(args.output) if args.output else out / (Path(args.image).stem + "_mask.pgm")
    save_mask(mask, target)
    print(f"wrote {target} ({mask.height}x{mask.width}, foreground pixels: {int((mask.labels == 1).sum())})")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    groups = gradcheck(
        cfg.encoder, cfg.decoder, seed=cfg.train.seed, loss_resolution=args.loss_resolution or cfg.train.loss_resolution,
        elements_per_group=args.elements, tolerance=args.tolerance, perturb=args.perturb, preprocess=preprocessor(cfg),
    )
    print(f"{'group':<10} {'checked':>8} {'max_rel_err':>12}  status")
    for g in groups:
        print(f"{g.name:<10} {g.n_checked:>8} {g.max_rel_error:>12.3e}  {'ok' if g.passed else 'FAIL'}")
    failed = [g.name for g in groups if not g.passed]
    print(f"groups: {len(groups)}  tolerance: {args.tolerance:g}  elapsed: {time.perf_counter() - t0:.2f}s")
    if failed:
        print(f"gradient check FAILED for: {', '.join(failed)}")
        return EXIT_RUNTIME
    print("gradient check passed")
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    if args.checkpoint:
        model = load_model(args.checkpoint, cfg)
    else:
        from segdino.decoder import init_params

        dt = cfg.train.dtype
        model = Model(init_frozen(cfg.encoder, dt), init_params(cfg.decoder, cfg.encoder.embed_dim, cfg.train.seed, dt), cfg)
    report = run_bench(model, iterations=args.iterations, warmup=args.warmup, include_io=args.include_io)
    for line in report.lines():
        print(line)
    expected = trainable_param_count(cfg.decoder, cfg.encoder.embed_dim)
    print(f"trainable_params_formula  {expected}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (section.key = value lines)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", help="run output directory")
    common.add_argument("--paper-defaults", action="store_true",
                        help="start from 256x256 inputs, a 12-block backbone with taps 3/6/9/12, lr/wd 1e-4, 50 epochs, batch 4")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="segdino", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset and manifest")

    p = sub.add_parser("train", parents=[common], help="train the decoder, write loss.csv, checkpoint, metrics")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many optimiser steps")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--gt-as-prediction", action="store_true", help="score ground truth against itself")

    p = sub.add_parser("predict", parents=[common], help="predict a mask for one PPM image")
    p.add_argument("--checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--output")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of decoder gradients")
    p.add_argument("--elements", type=int, default=64, help="elements sampled per parameter group")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--loss-resolution", choices=("token", "pixel"))
    p.add_argument("--perturb", help=argparse.SUPPRESS)

    p = sub.add_parser("bench", parents=[common], help="forward-pass latency and parameter counts")
    p.add_argument("--checkpoint")
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--include-io", action="store_true", help="time PPM decoding and normalisation too")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    echo_config(cfg)
    try:
        return COMMANDS[args.verb](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SegDinoError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

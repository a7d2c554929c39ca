"""Command line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("weathergan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _alphas(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid alpha list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("alpha list is empty")
    bad = [v for v in values if not 0.0 <= v <= 1.0]
    if bad:
        raise argparse.ArgumentTypeError(f"alpha values must lie in [0, 1], got {bad}")
    return values


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", ",").split(",")
    try:
        size = tuple(int(p) for p in parts if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid size {text!r}") from None
    if len(size) == 1:
        size = size * 2
    if len(size) != 2 or min(size) < 1:
        raise argparse.ArgumentTypeError(f"invalid size {text!r}")
    return size


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="weathergan", description="Multi-domain weather translation GAN.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="scan root/<class>/ image folders into a manifest skeleton")
    p.add_argument("--root", required=True, type=Path)
    p.add_argument("--manifest-out", required=True, type=Path)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--output-dir", type=Path, help="overrides [output] dir")

    p = sub.add_parser("translate", help="translate images with a trained generator")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--input", required=True, type=Path, help="image file or directory")
    p.add_argument("--alpha", type=_alphas, default=[0.0, 0.25, 0.5, 0.75, 1.0],
                   help="comma-separated intensities in [0, 1] (default 0,0.25,0.5,0.75,1)")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--dump-intermediates", action="store_true",
                   help="also write input, g_init, attention, T and per-cue segmentation maps")
    p.add_argument("--direction", choices=("xy", "yx"), default="xy")

    p = sub.add_parser("evaluate", help="FID and KID between two image directories")
    p.add_argument("--real-dir", required=True, type=Path)
    p.add_argument("--fake-dir", required=True, type=Path)
    p.add_argument("--extractor-weights", type=Path, help="torchvision inception_v3 state dict")
    p.add_argument("--extractor", choices=("inception", "pixels"),
                   help="default: inception when weights are given, else pooled pixels")
    p.add_argument("--image-size", type=_size, default=(299, 299))
    p.add_argument("--subset-size", type=int, default=100)
    p.add_argument("--n-subsets", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report-out", type=Path, default=Path("metrics_report.txt"))

    p = sub.add_parser("ablate", help="train (and optionally translate) with one branch configuration")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--mode", required=True, choices=("full", "attention_only", "segmentation_only", "init_only"))
    p.add_argument("--iterations", type=int, help="override total_iterations")
    p.add_argument("--output-dir", type=Path)
    p.add_argument("--input", type=Path, help="images to translate after training")
    p.add_argument("--alpha", type=_alphas, default=[1.0])
    return parser


def cmd_prepare(args) -> int:
    from .dataset import DEFAULT_CUES, format_manifest, scan_image_tree
    from .fileio import atomic_write_text

    try:
        entries = scan_image_tree(args.root)
    except FileNotFoundError as err:
        log.error("%s", err)
        return 2
    if not entries:
        log.error("no images found under %s/<class_name>/", args.root)
        return 2
    atomic_write_text(args.manifest_out, format_manifest(DEFAULT_CUES, [(rel, cls, ()) for rel, cls in entries]))
    counts: dict[str, int] = {}
    for _, cls in entries:
        counts[cls.label] = counts.get(cls.label, 0) + 1
    for label, count in counts.items():
        print(f"{label}\t{count}")
    print(f"wrote {len(entries)} records to {args.manifest_out}")
    return 0


def _load_config(path):
    from .training import load_config

    try:
        return load_config(path)
    except (FileNotFoundError, ValueError) as err:
        raise UsageError(str(err)) from None


def _run_training(config, resume=None, output_dir=None):
    from .dataset import load_dataset
    from .training import train

    if not config.data_root or not config.manifest:
        raise UsageError("config needs [data] root and manifest")
    index = load_dataset(config.data_root, config.manifest)
    every = config.log_every

    def show(report):
        if (report.iteration + 1) % every == 0:
            parts = " ".join(f"{k}={v:.4f}" for k, v in report.losses.items())
            print(f"iter {report.iteration + 1}/{config.total_iterations} lr={report.lr:.3e} {parts}", flush=True)

    trainer, _ = train(config, index, output_dir=output_dir, resume=resume, on_step=show)
    return trainer


def cmd_train(args) -> int:
    config = _load_config(args.config)
    out = args.output_dir or Path(config.output_dir)
    _run_training(config, resume=args.resume, output_dir=out)
    log.info("final checkpoint: %s", out / "final.ckpt")
    return 0


def cmd_translate(args) -> int:
    from .inference import list_inputs, load_generator, translate_file

    gen, config, cue_names = load_generator(args.checkpoint, args.direction)
    inputs = list_inputs(args.input)
    if not inputs:
        raise UsageError(f"no images found at {args.input}")
    for path in inputs:
        written = translate_file(gen, path, args.out, args.alpha, config.image_size, args.dump_intermediates, cue_names)
        log.info("%s -> %d file(s)", path.name, len(written))
    return 0


def cmd_evaluate(args) -> int:
    from .fileio import atomic_write_text
    from .metrics import EvalConfig, InceptionExtractor, PooledPixelExtractor, TooFewImagesError, evaluate_pair

    kind = args.extractor or ("inception" if args.extractor_weights else "pixels")
    if kind == "pixels":
        if args.extractor_weights is None:
            log.warning("no --extractor-weights given; using pooled pixel features instead of Inception")
        extractor = PooledPixelExtractor()
    else:
        extractor = InceptionExtractor(args.extractor_weights)
    config = EvalConfig(args.image_size, args.subset_size, args.n_subsets, args.seed)
    try:
        report = evaluate_pair(args.real_dir, args.fake_dir, extractor, config)
    except (FileNotFoundError, TooFewImagesError) as err:
        raise UsageError(str(err)) from None
    text = report.to_text()
    sys.stdout.write(text)
    atomic_write_text(args.report_out, text)
    return 0


def cmd_ablate(args) -> int:
    from dataclasses import replace

    from .inference import list_inputs, translate_file

    config = _load_config(args.config)
    changes = {"ablation": args.mode}
    if args.iterations is not None:
        if args.iterations < 1:
            raise UsageError("--iterations must be >= 1")
        changes["total_iterations"] = args.iterations
        if config.decay_start >= args.iterations:
            changes["decay_start"] = args.iterations // 2
            log.info("decay_start lowered to %d to fit %d iterations", changes["decay_start"], args.iterations)
    try:
        config = replace(config, **changes)
    except ValueError as err:
        raise UsageError(str(err)) from None
    out = args.output_dir or Path(config.output_dir) / f"ablate_{args.mode}"
    trainer = _run_training(config, output_dir=out)
    print(f"mode={args.mode} composition: {trainer.composition_description}")
    if args.input is not None:
        trainer.G.eval()
        for path in list_inputs(args.input):
            translate_file(trainer.G, path, out / "translations", args.alpha, config.image_size,
                           cue_names=trainer.cue_names)
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"weathergan {args.command}: error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - report any runtime failure as exit 2
        log.error("%s failed: %s", args.command, err)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""``scriptbmi`` command line: synth, segment, augment, split, train, evaluate, ablate, predict."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import weights
from .augment import AugmentSpec
from .corpus import augment_corpus, load_split, load_splits
from .dataset import class_bmi_table, load_manifest, predict_bmi, split
from .exceptions import CompatibilityError, ConfigError, ScriptBMIError
from .harness import emit_reports, run_ablation, synth_dataset, write_run_reports
from .imaging import load_image, preprocess, segment_sheet, write_crop_index, write_crops
from .metrics import CSV_HEADER
from .model import INPUT_SIZES, ModelConfig, ablation_presets, preset
from .tensor import RngStream
from .training import TrainConfig, evaluate, predict_proba, train

logger = logging.getLogger("scriptbmi")

DEFAULT_SEED = 42


def _size(text: str) -> tuple[int, int]:
    if text in INPUT_SIZES:
        return INPUT_SIZES[text]
    parts = text.lower().replace("x", ",").split(",")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use N or HxW") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    return dims


def _ratios(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(p) for p in text.replace(":", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratios {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("ratios need three values, e.g. 0.7,0.15,0.15")
    total = sum(vals)
    return tuple(v / total for v in vals)


def _load_manifest(args, check_files=True):
    return load_manifest(args.manifest, args.writers, check_files=check_files, strict=args.strict)


def _train_config(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch, max_epochs=args.epochs, learning_rate=args.lr,
                       early_stop_patience=args.patience, seed=args.seed,
                       input_size=args.input_size, channels=args.channels)


def _model_config(args, num_classes) -> ModelConfig:
    if args.config:
        cfg = ModelConfig.from_dict(json.loads(Path(args.config).read_text()))
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "num_classes": num_classes})
    else:
        cfg = preset(args.preset, num_classes=num_classes)
    return cfg.with_input(channels=args.channels, size=args.input_size)


def _log_to(path: Path):
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("scriptbmi").addHandler(handler)
    return handler


def cmd_synth(args):
    _, manifest = synth_dataset(args.writers, args.chars, args.image_size,
                                RngStream(args.seed, "synth"), out_dir=args.out)
    print(f"wrote {len(manifest)} crops for {args.writers} writers to {args.out}")


def cmd_segment(args):
    sheets_dir, out = Path(args.sheets), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sheets = sorted(p for p in sheets_dir.iterdir() if p.suffix.lower() in (".ppm", ".pgm", ".pnm"))
    if not sheets:
        warnings.warn(f"no sheets found in {sheets_dir}")
    rows = []
    for path in sheets:
        crops = segment_sheet(load_image(path), args.min_area, args.pad, source=str(path))
        rows += write_crops(crops, out, path.stem)
    write_crop_index(rows, out / "crops.csv")
    print(f"segmented {len(sheets)} sheets into {len(rows)} crops")


def cmd_augment(args):
    manifest = _load_manifest(args)
    spec = AugmentSpec(**json.loads(Path(args.config).read_text())) if args.config else AugmentSpec()
    spec = AugmentSpec(**{**spec.to_dict(), "seed": args.seed})
    out = augment_corpus(manifest, args.out, spec, size=args.input_size, channels=args.channels)
    out.save(Path(args.out) / "manifest.csv")
    print(f"augmented {len(manifest)} crops into {len(out)} images")


def cmd_split(args):
    manifest = _load_manifest(args)
    result = split(manifest, args.ratios, RngStream(args.seed, "split"),
                   group_variants=args.split_before_augment)
    target = Path(args.out or args.manifest)
    result.save(target, target.parent / "writers.csv")
    counts = result.counts()
    print(f"train={counts['train']} val={counts['val']} test={counts['test']}")


def cmd_train(args):
    manifest = _load_manifest(args)
    if not manifest.subset("train"):
        raise ConfigError("manifest has no split assignment; run `scriptbmi split` first")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = _log_to(out / "run.log")
    try:
        cfg = _model_config(args, manifest.num_classes)
        tcfg = _train_config(args)
        logger.info("model config: %s", cfg.to_json())
        logger.info("train config: batch=%d lr=%g epochs=%d patience=%d seed=%d",
                    tcfg.batch_size, tcfg.learning_rate, tcfg.max_epochs, tcfg.early_stop_patience, tcfg.seed)
        data = load_splits(manifest, args.channels, args.input_size)
        network, report = train(cfg, data, tcfg)
        weights.save_weights(network, out / "weights.bin")
        write_run_reports(report, out, svg=not args.no_svg)
    finally:
        logging.getLogger("scriptbmi").removeHandler(handler)
        handler.close()
    if report.test_metrics is not None:
        print(",".join(CSV_HEADER))
        print(report.test_metrics.csv_row())


def _check_compatible(network, manifest):
    if network.num_classes != manifest.num_classes:
        raise CompatibilityError(f"weights have {network.num_classes} classes, "
                                 f"manifest has {manifest.num_classes} writers")


def cmd_evaluate(args):
    manifest = _load_manifest(args)
    network = weights.load_weights(args.weights)
    _check_compatible(network, manifest)
    c, h, w = network.config.input_shape
    X, y = load_split(manifest, args.split, c, (h, w))
    report, cm = evaluate(network, X, y)
    text = ",".join(CSV_HEADER) + "\n" + report.csv_row() + "\n"
    if args.out:
        Path(args.out).write_text(text)
        Path(args.out).with_name(Path(args.out).stem + "_confusion.csv").write_text(cm.to_csv())
    sys.stdout.write(text)


def cmd_ablate(args):
    manifest = _load_manifest(args)
    configs = ablation_presets(num_classes=manifest.num_classes)
    if args.presets != "all":
        wanted = [p.strip() for p in args.presets.split(",")]
        configs = [preset(name, num_classes=manifest.num_classes) for name in wanted]
    data = load_splits(manifest, args.channels, args.input_size)
    result = run_ablation(configs, data, _train_config(args))
    emit_reports(result, args.out, svg=not args.no_svg)
    sys.stdout.write(result.to_csv())


def cmd_predict(args):
    network = weights.load_weights(args.weights)
    manifest = _load_manifest(args, check_files=False)
    _check_compatible(network, manifest)
    c, h, w = network.config.input_shape
    x = preprocess(load_image(args.image, 3), (h, w), c, denoise=True)[None]
    cls, value, conf = predict_bmi(predict_proba(network, x)[0], class_bmi_table(manifest))
    print(f"{cls},{value:.2f},{conf:.6f}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help="master seed (default 42)")
    common.add_argument("--config", help="JSON config file (model config for train, augment spec for augment)")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--manifest", required=True, help="manifest CSV")
    data.add_argument("--writers", help="writer table CSV (default: writers.csv beside the manifest)")
    data.add_argument("--strict", action="store_true", help="treat BMI mismatches as errors")

    image = argparse.ArgumentParser(add_help=False)
    image.add_argument("--input-size", type=_size, default=(224, 224), help="N, HxW or a named size (default, compact); default 224")
    image.add_argument("--channels", type=int, choices=(1, 3), default=3)

    hyper = argparse.ArgumentParser(add_help=False)
    hyper.add_argument("--batch", type=int, default=32)
    hyper.add_argument("--lr", type=float, default=1e-4)
    hyper.add_argument("--epochs", type=int, default=100)
    hyper.add_argument("--patience", type=int, default=10)
    hyper.add_argument("--no-svg", action="store_true", help="skip loss_curve.svg")

    parser = argparse.ArgumentParser(prog="scriptbmi", description=__doc__)
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic handwriting corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--writers", type=int, default=8)
    p.add_argument("--chars", type=int, default=26, help="crops per writer")
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", parents=[common], help="cut scanned sheets into character crops")
    p.add_argument("--sheets", required=True, help="directory of P5/P6 sheet scans")
    p.add_argument("--out", required=True)
    p.add_argument("--min-area", type=int, default=30)
    p.add_argument("--pad", type=int, default=4)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("augment", parents=[common, data, image], help="preprocess crops and write 6 variants each")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("split", parents=[common, data], help="assign train/val/test")
    p.add_argument("--ratios", type=_ratios, default=(0.70, 0.15, 0.15))
    p.add_argument("--split-before-augment", action="store_true",
                   help="keep all variants of a source crop in one split")
    p.add_argument("--out", help="output manifest (default: overwrite --manifest)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common, data, image, hyper], help="train one model")
    p.add_argument("--preset", default="best", help="ablation preset (best, base, row1..row8) when --config is absent")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common, data], help="metrics of saved weights on one split")
    p.add_argument("--weights", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common, data, image, hyper], help="train the ablation presets")
    p.add_argument("--presets", default="all", help="comma list of preset names/tags, or 'all'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", parents=[common, data], help="predict the writer's BMI for one image")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # the package logger stays at INFO so run.log is complete; -q only quiets the console
    console = logging.StreamHandler()
    console.setLevel(logging.WARNING if args.quiet else logging.INFO)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logger.setLevel(logging.INFO)
    logger.addHandler(console)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            args.func(args)
    except (ScriptBMIError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        logger.removeHandler(console)
    return 0


if __name__ == "__main__":
    sys.exit(main())

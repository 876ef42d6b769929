"""Command-line entry point: train, eval, profile, gradcheck, ablate, generate."""

import argparse
import csv
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np
import pydantic

from . import ablation, checkpoint, gradcheck
from .config import (
    PRESETS,
    PROFILE_RESOLUTION,
    Preset,
    RunConfig,
    SyntheticSpec,
    dump_run_config,
    load_run_config,
    preset_config,
)
from .data import Sample, generate_synthetic, load_dataset, save_dataset
from .errors import DataError, FormatVersionError, GroupKanError
from .metrics import (
    MetricRow,
    activation_map,
    aggregate_rows,
    f1,
    iou,
    plausibility_iou,
    write_metric_report,
)
from .model import build, count_flops, count_params, log_profile
from .tensor import Tensor
from .training import predict_logits, train

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.gkn"
TRAIN_LOG_FILE = "train_log.csv"
CONFIG_FILE = "config.ini"
METRICS_FILE = "metrics.csv"
PROFILE_FILE = "profile.csv"

PROFILE_COLUMNS = ("model", "component", "params", "flops")


def _parse_assignment(text: str) -> tuple:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), value.strip()


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    """Dotted config overrides implied by command-line flags."""
    overrides: Dict[str, object] = {}
    if args.preset:
        for key, value in PRESETS[args.preset].items():
            overrides[f"model.{key}"] = value
    if args.seed is not None:
        for key in ("model.seed", "train.seed", "synthetic.seed"):
            overrides[key] = args.seed
    if args.out:
        overrides["out"] = args.out
    if args.synthetic:
        overrides["data.synthetic"] = True
    if args.data:
        overrides["data.path"] = args.data
    if getattr(args, "epochs", None) is not None:
        overrides["train.epochs"] = args.epochs
    for key, value in args.set or []:
        overrides[key] = value
    return overrides


def resolve_run_config(args: argparse.Namespace, defaults: Optional[dict] = None) -> RunConfig:
    overrides = dict(defaults or {})
    overrides.update(_overrides(args))
    return load_run_config(args.config, overrides)


def load_samples(
    run: RunConfig, resolution: Optional[int] = None, channels: Optional[int] = None
) -> List[Sample]:
    """Synthetic samples or the configured dataset directory."""
    channels = channels or run.model.input_channels
    if run.data.synthetic:
        values = run.synthetic.dict()
        values["channels"] = channels
        if resolution is not None:
            values["resolution"] = resolution
        return generate_synthetic(SyntheticSpec(**values))
    if run.data.path is None:
        raise DataError("No dataset given: pass --data <dir> or --synthetic")
    return load_dataset(run.data.path, channels=channels, resolution=resolution)


def _prepare_out(run: RunConfig) -> str:
    os.makedirs(run.out, exist_ok=True)
    return run.out


def cmd_train(args: argparse.Namespace) -> int:
    run = resolve_run_config(args)
    out = _prepare_out(run)
    samples = load_samples(run, args.resolution)
    net = build(run.model)
    log_profile(net, *samples[0].spatial)

    result = train(net, samples, run.train, run.loss, log_path=os.path.join(out, TRAIN_LOG_FILE))
    metadata = checkpoint.CheckpointMetadata(
        seed=run.train.seed,
        best_epoch=result.best_epoch,
        best_val_iou=result.best_val_iou,
        best_val_f1=result.best_val_f1,
        resolution=samples[0].spatial[0],
        dataset=run.data.name,
    )
    checkpoint.save_checkpoint(os.path.join(out, CHECKPOINT_FILE), net, metadata)
    with open(os.path.join(out, CONFIG_FILE), "w", encoding="utf8") as fp:
        fp.write(dump_run_config(run))
    logger.info(
        "Best val_iou %.4f (val_f1 %.4f) at epoch %d",
        result.best_val_iou,
        result.best_val_f1,
        result.best_epoch,
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    run = resolve_run_config(args)
    out = _prepare_out(run)
    path = args.checkpoint or os.path.join(run.out, CHECKPOINT_FILE)
    stored = checkpoint.load_checkpoint(path)
    expected = run.model if (args.config or args.preset) else None
    net = checkpoint.restore(stored, expected)

    samples = load_samples(run, args.resolution, stored.config.input_channels)
    if samples[0].channels != stored.config.input_channels:
        raise FormatVersionError(
            f"Checkpoint expects {stored.config.input_channels} input channels, "
            f"data has {samples[0].channels}"
        )
    params = count_params(net).total
    gflops = count_flops(net, *samples[0].spatial).total / 1e9

    logits = predict_logits(net, np.stack([sample.image for sample in samples]))
    rows = []
    for sample, sample_logits in zip(samples, logits):
        pred = sample_logits[0] > 0
        plausibility = None
        if args.explain:
            features = net.bottleneck_features(Tensor(sample.image[None]))
            heat = activation_map(features, sample.spatial)
            plausibility = plausibility_iou(heat, sample.mask, run.data.threshold_rule)
        rows.append(
            MetricRow(
                dataset=f"{run.data.name}:{sample.id}",
                seed=stored.metadata.seed,
                iou=iou(pred, sample.mask),
                f1=f1(pred, sample.mask),
                plausibility_iou=plausibility,
                params=params,
                gflops=gflops,
            )
        )
    summary = aggregate_rows(rows, run.data.name)
    report = args.report or os.path.join(out, METRICS_FILE)
    write_metric_report(report, rows + [summary], explain=args.explain)

    logger.info("Mean IoU %.4f, mean F1 %.4f over %d samples", summary.iou, summary.f1, len(rows))
    if stored.metadata.best_val_iou is not None:
        logger.info("Validation IoU at save time was %.4f", stored.metadata.best_val_iou)
    return 0


def _profile_targets(args: argparse.Namespace) -> Dict[str, object]:
    if args.presets:
        return {name: preset_config(name) for name in args.presets}
    run = resolve_run_config(args)
    return {args.preset or "config": run.model}


def cmd_profile(args: argparse.Namespace) -> int:
    resolution = args.resolution or PROFILE_RESOLUTION
    targets = _profile_targets(args)
    rows = []
    for name, config in targets.items():
        params, flops = log_profile(build(config), resolution, resolution)
        for component in list(params.__fields__):
            rows.append(
                {
                    "model": name,
                    "component": component,
                    "params": getattr(params, component),
                    "flops": getattr(flops, component),
                }
            )

    writer = csv.DictWriter(sys.stdout, fieldnames=PROFILE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, PROFILE_FILE), "w", newline="", encoding="utf8") as fp:
            file_writer = csv.DictWriter(fp, fieldnames=PROFILE_COLUMNS)
            file_writer.writeheader()
            file_writer.writerows(rows)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = gradcheck.run_suite(args.scope, seed=args.seed or 0)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["check", "max_rel_error", "tolerance", "coordinates", "status"])
    for result in results:
        writer.writerow(
            [
                result.name,
                f"{result.max_rel_error:.3e}",
                f"{result.tolerance:.0e}",
                result.coordinates,
                "pass" if result.passed else "FAIL",
            ]
        )
    return 0 if all(result.passed for result in results) else 1


def cmd_ablate(args: argparse.Namespace) -> int:
    defaults: Dict[str, object] = {}
    if not args.config and not args.preset:
        defaults.update({f"model.{key}": value for key, value in PRESETS["tiny"].items()})
    if not args.data:
        defaults["data.synthetic"] = True
    run = resolve_run_config(args, defaults)
    out = _prepare_out(run)
    samples = load_samples(run, args.resolution)
    rows = ablation.run_ablation(args.axis, run, samples)
    ablation.write_ablation(os.path.join(out, f"ablation_{args.axis}.csv"), rows)
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    defaults: Dict[str, object] = {}
    if args.count is not None:
        defaults["synthetic.count"] = args.count
    if args.resolution is not None:
        defaults["synthetic.resolution"] = args.resolution
    run = resolve_run_config(args, defaults)
    out = _prepare_out(run)
    save_dataset(generate_synthetic(run.synthetic), out)
    with open(os.path.join(out, CONFIG_FILE), "w", encoding="utf8") as fp:
        fp.write(dump_run_config(run))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="seed for init, split, shuffling and data")
    common.add_argument("--out", help="output directory")
    common.add_argument("--preset", choices=[preset.value for preset in Preset])
    common.add_argument("--synthetic", action="store_true", help="use the built-in blob task")
    common.add_argument("--data", help="dataset directory with images/ and masks/")
    common.add_argument("--resolution", type=int, help="input side length")
    common.add_argument(
        "--set",
        action="append",
        type=_parse_assignment,
        metavar="KEY=VALUE",
        help="override a config value, e.g. train.batch_size=4",
    )
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )

    parser = argparse.ArgumentParser(
        prog="groupkan", description="GroupKAN segmentation networks"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train_parser = commands.add_parser("train", parents=[common], help="train a network")
    train_parser.add_argument("--epochs", type=int)
    train_parser.set_defaults(handler=cmd_train)

    eval_parser = commands.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    eval_parser.add_argument("--checkpoint", help=f"defaults to <out>/{CHECKPOINT_FILE}")
    eval_parser.add_argument("--report", help=f"defaults to <out>/{METRICS_FILE}")
    eval_parser.add_argument(
        "--explain", action="store_true", help="add plausibility IoU of activation maps"
    )
    eval_parser.set_defaults(handler=cmd_eval)

    profile_parser = commands.add_parser(
        "profile", parents=[common], help="parameter and FLOP breakdown"
    )
    profile_parser.add_argument(
        "--presets",
        type=lambda text: [name.strip() for name in text.split(",") if name.strip()],
        help="comma-separated presets to compare, e.g. s,base,l",
    )
    profile_parser.set_defaults(handler=cmd_profile)

    check_parser = commands.add_parser(
        "gradcheck", parents=[common], help="finite-difference gradient checks"
    )
    check_parser.add_argument("scope", choices=[scope.value for scope in gradcheck.Scope])
    check_parser.set_defaults(handler=cmd_gradcheck)

    ablate_parser = commands.add_parser("ablate", parents=[common], help="run an ablation sweep")
    ablate_parser.add_argument("axis", choices=[axis.value for axis in ablation.AblationAxis])
    ablate_parser.add_argument("--epochs", type=int)
    ablate_parser.set_defaults(handler=cmd_ablate)

    generate_parser = commands.add_parser(
        "generate", parents=[common], help="write a synthetic dataset"
    )
    generate_parser.add_argument("--count", type=int)
    generate_parser.set_defaults(handler=cmd_generate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "presets", None):
        unknown = [name for name in args.presets if name not in PRESETS]
        if unknown:
            parser.error(f"unknown presets: {', '.join(unknown)}")
    try:
        return args.handler(args)
    except (GroupKanError, pydantic.ValidationError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""
LIDAR-EPW Command Line
======================

Entry point binding the pipeline together:
- gen-data   synthetic dense frames + ground-truth scans
- fit-lut    EPW lookup table and echo-occurrence histogram
- train      one EPW network per echo index
- infer      two-stage sensor model on the validation frames
- evaluate   KPI report between two scan traces
- bench      MSE / accuracy / latency table of trained variants
- serve      newline-delimited JSON service for simulation engines

Exit codes: 0 success, 1 usage error, 2 data / format error, 3 runtime failure.

Author: LIDAR-EPW Team
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from rich.console import Console

from . import __version__
from .config import load_environment, setup_logging
from .core.conv_net import Variant, build_network, load_checkpoint, save_checkpoint
from .core.echo_select import (
    MODEL_FILES,
    SelectionConfig,
    SensorModel,
    checkpoint_name,
    fit_echo_hist,
    write_hist,
)
from .core.evaluation import full_report, load_box_pairs, write_report
from .core.frames import read_dense_jsonl, read_scan_csv, write_scan_csv
from .core.lut_model import LutBins, fit_lut, lut_report, write_lut
from .core.scene import DatasetConfig, derive_seed, load_manifest, load_split, make_dataset, save_dataset
from .core.sensor import SensorSpec
from .core.training import TrainConfig, bench, echo_tensors, train
from .errors import CheckpointError, ConfigurationError, LidarEpwError, UsageError
from .server import create_server, serve
from .ui.messages import MessageDisplay

logger = logging.getLogger(__name__)

VARIANTS = [v.value for v in Variant]
DEFAULT_PATIENCE = 20


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting."""

    def error(self, message: str) -> None:
        raise UsageError(f"{message}\n{self.format_usage()}")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="lidar-epw",
        description="LIDAR-EPW - LiDAR echo pulse width sensor model",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  lidar-epw gen-data --frames 50 --out data --seed 1
  lidar-epw fit-lut --in data
  lidar-epw train --in data --variant tiny-lf --epochs 100
  lidar-epw infer --in data --out pred.csv --backend net --variant tiny-lf
  lidar-epw evaluate --ref data/val/scan.csv --pred pred.csv --out report.json
  lidar-epw serve --in data --port 7400 --variant tiny-lf
        """,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=ArgumentParser)
    sub.required = True

    gen = sub.add_parser("gen-data", help="Generate a synthetic dataset")
    gen.add_argument("--frames", type=int, required=True, help="Total frame count (>= 2)")
    gen.add_argument("--out", required=True, help="Dataset directory")
    gen.add_argument("--spec", help="Sensor-spec JSON (default: desk-scale spec)")
    gen.add_argument("--seed", type=int, default=0)

    fit = sub.add_parser("fit-lut", help="Fit the EPW lookup table and echo histogram")
    fit.add_argument("--in", dest="in_dir", required=True, help="Dataset directory")
    fit.add_argument("--out", help="Models directory (default: <in>/models)")
    fit.add_argument("--spec", help="Sensor-spec JSON (default: the dataset's spec)")

    tr = sub.add_parser("train", help="Train one EPW network per echo")
    tr.add_argument("--in", dest="in_dir", required=True, help="Dataset directory")
    tr.add_argument("--out", help="Models directory (default: <in>/models)")
    tr.add_argument("--spec", help="Sensor-spec JSON (default: the dataset's spec)")
    tr.add_argument("--variant", choices=VARIANTS, default=Variant.UNET.value)
    tr.add_argument("--epochs", type=int, default=350)
    tr.add_argument("--batch", type=int, default=8)
    tr.add_argument("--lr", type=float, default=1e-5)
    tr.add_argument("--lambda", dest="lam", type=float, default=1e-4)
    tr.add_argument("--patience", type=int, help=f"Early-stop patience (default: {DEFAULT_PATIENCE})")
    tr.add_argument("--seed", type=int, default=0)

    inf = sub.add_parser("infer", help="Run the sensor model on the validation frames")
    inf.add_argument("--in", dest="in_dir", required=True, help="Dataset directory")
    inf.add_argument("--out", required=True, help="Output scan CSV")
    _add_model_flags(inf)

    ev = sub.add_parser("evaluate", help="KPI report between two scan traces")
    ev.add_argument("--ref", required=True, help="Reference scan CSV")
    ev.add_argument("--pred", required=True, help="Predicted scan CSV")
    ev.add_argument("--boxes", help="YAML file of oriented box pairs")
    ev.add_argument("--spec", help="Sensor-spec JSON used for box containment (default: desk-scale)")
    ev.add_argument("--out", help="Report JSON path or directory (default: JSON to stdout)")

    be = sub.add_parser("bench", help="Benchmark trained network variants")
    be.add_argument("--in", dest="in_dir", required=True, help="Dataset directory")
    be.add_argument("--variant", choices=VARIANTS, help="Only this variant (default: every trained one)")
    be.add_argument("--frames", type=int, default=10, help="Timed repetitions")
    be.add_argument("--out", help="Optional CSV of the bench table")
    be.add_argument("--spec", help="Sensor-spec JSON (default: the dataset's spec)")

    sv = sub.add_parser("serve", help="Serve the sensor model over TCP")
    sv.add_argument("--in", dest="in_dir", required=True, help="Dataset directory holding models/")
    sv.add_argument("--port", type=int, required=True)
    _add_model_flags(sv)
    return parser


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--spec", help="Sensor-spec JSON (default: the dataset's spec)")
    parser.add_argument("--backend", choices=["net", "lut"], default="net")
    parser.add_argument("--mode", choices=["argmax", "sample"], default="argmax")
    parser.add_argument("--variant", choices=VARIANTS, default=Variant.UNET.value)
    parser.add_argument("--seed", type=int, default=0)


def _dataset_spec(args: argparse.Namespace) -> SensorSpec:
    if args.spec:
        return SensorSpec.from_file(args.spec)
    return load_manifest(args.in_dir)["spec"]


def _models_dir(args: argparse.Namespace) -> Path:
    return Path(getattr(args, "out", None) or Path(args.in_dir) / "models")


def _cluster_gap(in_dir: str) -> float:
    return DatasetConfig.from_dict(load_manifest(in_dir).get("config", {})).cluster_gap


def _load_model(args: argparse.Namespace) -> SensorModel:
    spec = _dataset_spec(args)
    config = SelectionConfig(gap=_cluster_gap(args.in_dir), mode=args.mode, seed=args.seed)
    return SensorModel.load(Path(args.in_dir) / "models", spec, args.backend, args.variant, config)


def _handle_gen_data(args: argparse.Namespace, messages: MessageDisplay) -> int:
    if args.frames < 2:
        raise ConfigurationError("--frames must be at least 2 (one train and one val frame)")
    spec = SensorSpec.from_file(args.spec) if args.spec else SensorSpec.desk()
    n_val = max(1, round(0.2 * args.frames))
    config = DatasetConfig()
    messages.show_command_start("gen-data", f"{args.frames} frames, {spec.rows}x{spec.cols} grid, seed {args.seed}")
    train_set, val_set = make_dataset(config, spec, args.frames - n_val, n_val, args.seed)
    save_dataset(args.out, train_set, val_set, spec, config, args.seed)
    points = sum(len(p.truth) for p in train_set + val_set)
    messages.show_dataset_summary(args.out, len(train_set), len(val_set), points)
    return 0


def _handle_fit_lut(args: argparse.Namespace, messages: MessageDisplay) -> int:
    spec = _dataset_spec(args)
    pairs = load_split(Path(args.in_dir) / "train")
    out = _models_dir(args)
    messages.show_command_start("fit-lut", f"{len(pairs)} training frames from {args.in_dir}")
    lut = fit_lut((p.truth for p in pairs), LutBins.covering(spec), spec)
    hist = fit_echo_hist(pairs, spec, _cluster_gap(args.in_dir))
    out.mkdir(parents=True, exist_ok=True)
    write_lut(out / MODEL_FILES["lut"], lut)
    write_hist(out / MODEL_FILES["hist"], hist)
    (out / "lut_report.csv").write_text(lut_report(lut), encoding="utf-8")
    messages.show_lut_summary(lut.non_empty, int(lut.count.size), int(hist.counts.sum()))
    messages.show_success(f"Models written to {out}")
    return 0


def _handle_train(args: argparse.Namespace, messages: MessageDisplay) -> int:
    spec = _dataset_spec(args)
    gap = _cluster_gap(args.in_dir)
    patience = args.patience if args.patience is not None else min(DEFAULT_PATIENCE, args.epochs - 1)
    config = TrainConfig(args.batch, args.lr, args.epochs, args.lam, patience, args.seed)
    train_pairs = load_split(Path(args.in_dir) / "train")
    val_pairs = load_split(Path(args.in_dir) / "val")
    out = _models_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    messages.show_command_start("train", f"{args.variant}: {len(train_pairs)} train / {len(val_pairs)} val frames")
    for echo in range(spec.max_echoes):
        net = build_network(args.variant, seed=derive_seed(args.seed, echo))
        data = echo_tensors(train_pairs, spec, echo, gap)
        val = echo_tensors(val_pairs, spec, echo, gap) if val_pairs else None
        with messages.training_progress() as progress:
            task = progress.add_task(f"echo {echo}", total=config.max_epochs, status="")

            def on_epoch(epoch: int, train_loss: float, val_l1: float) -> None:
                progress.update(task, completed=epoch, status=f"loss {train_loss:.4f} val L1 {val_l1:.4f}")

            train(net, data, val, replace(config, seed=derive_seed(args.seed, echo)), on_epoch)
        save_checkpoint(out / checkpoint_name(args.variant, echo), net)
        messages.show_training_result(args.variant, echo, net.history.epochs, min(net.history.val_l1))
    messages.show_success(f"Checkpoints written to {out}")
    return 0


def _handle_infer(args: argparse.Namespace, messages: MessageDisplay) -> int:
    model = _load_model(args)
    frames = read_dense_jsonl(Path(args.in_dir) / "val" / "dense.jsonl")
    messages.show_command_start("infer", f"{len(frames)} frames, {model.backend} backend, {args.mode} selection")
    results = []
    for frame in frames:
        frame.validate(model.spec)
        results.append(model.apply(frame))
    write_scan_csv(args.out, results)
    messages.show_success(f"{sum(len(r) for r in results)} scan points written to {args.out}")
    return 0


def _handle_evaluate(args: argparse.Namespace, messages: MessageDisplay) -> int:
    spec = SensorSpec.from_file(args.spec) if args.spec else SensorSpec.desk()
    reference, predicted = read_scan_csv(args.ref), read_scan_csv(args.pred)
    boxes = load_box_pairs(args.boxes) if args.boxes else []
    messages.show_command_start("evaluate", f"{args.ref} vs {args.pred}")
    report = full_report(reference, predicted, spec, boxes)
    messages.show_report(report)
    if args.out:
        path = write_report(args.out, report)
        messages.show_success(f"Report written to {path}")
    else:
        sys.stdout.write(report.to_json())
    return 0


def _handle_bench(args: argparse.Namespace, messages: MessageDisplay) -> int:
    spec = _dataset_spec(args)
    models_dir = Path(args.in_dir) / "models"
    variants = [args.variant] if args.variant else VARIANTS
    models: Dict[str, List] = {}
    for variant in variants:
        paths = [models_dir / checkpoint_name(variant, e) for e in range(spec.max_echoes)]
        if all(p.exists() for p in paths):
            models[variant] = [load_checkpoint(p) for p in paths]
        elif args.variant:
            raise CheckpointError(f"No trained {variant} checkpoints in {models_dir} (run train first)")
        elif any(p.exists() for p in paths):
            messages.show_warning(f"Skipping {variant}: checkpoints for some echoes are missing")
    if not models:
        raise CheckpointError(f"No trained checkpoints in {models_dir} (run train first)")
    gap = _cluster_gap(args.in_dir)
    val_pairs = load_split(Path(args.in_dir) / "val")
    val_sets = [echo_tensors(val_pairs, spec, echo, gap) for echo in range(spec.max_echoes)]
    messages.show_command_start("bench", f"{len(models)} variants, {len(val_pairs)} val frames, {args.frames} repetitions")
    rows = bench(models, val_sets, args.frames)
    messages.show_bench_table(rows)
    if args.out:
        lines = ["variant,mse_ns2,accuracy_pct,latency_ms,flops,parameters"]
        lines += [f"{r.variant},{r.mse:.6f},{r.accuracy:.4f},{r.latency_ms:.4f},{r.flops},{r.parameters}" for r in rows]
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def _handle_serve(args: argparse.Namespace, messages: MessageDisplay) -> int:
    model = _load_model(args)
    server = create_server(model, args.port)
    messages.show_serving(*server.server_address[:2], model.backend)
    serve(model, args.port, server=server)
    return 0


HANDLERS = {
    "gen-data": _handle_gen_data,
    "fit-lut": _handle_fit_lut,
    "train": _handle_train,
    "infer": _handle_infer,
    "evaluate": _handle_evaluate,
    "bench": _handle_bench,
    "serve": _handle_serve,
}


def run(argv: Optional[Sequence[str]] = None, console: Optional[Console] = None) -> int:
    """
    Execute one command.

    Args:
        argv: Arguments without the program name (default: sys.argv[1:])
        console: Console for user-facing output (default: standard error)

    Returns:
        int: Process exit code
    """
    messages = MessageDisplay(console)
    try:
        args = build_parser().parse_args(list(sys.argv[1:] if argv is None else argv))
        return HANDLERS[args.command](args, messages)
    except SystemExit as e:
        # --help and --version
        return int(e.code or 0)
    except KeyboardInterrupt:
        logger.warning("Operation cancelled by user")
        return 130
    except LidarEpwError as e:
        logger.error(str(e))
        messages.show_error_message(str(e), e.exit_code)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Runtime failure: {e}")
        messages.show_error_message(str(e), 3)
        return 3


def main() -> None:
    load_environment()
    setup_logging()
    sys.exit(run())


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""
fedsim - federated averaging simulator for multi-label audio tagging.

Subcommands partition a clip manifest by uploader, build task directories
(synthetic or from audio), train a centralized baseline, run federated
averaging or a C x E grid of it, merge report tables and evaluate client
selection probabilities.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from loguru import logger
from pydantic import ValidationError

from .blob import load_checkpoint, save_checkpoint
from .config import (
    HIGH_VOLUME_MIN_CLIPS,
    CentralConfig,
    FederationConfig,
    GridSpec,
    ModelSpec,
    SynthTaskSpec,
    load_config,
)
from .data import (
    FederatedTask,
    export_synthetic_task,
    ingest_metadata,
    load_task,
    partition_by_uploader,
    synth_federated_task,
    uploader_histogram,
)
from .errors import FedsimRuntimeError, InvalidInputError
from .experiment import (
    CellResult,
    cell_run_id,
    grid_search,
    start_manifest,
    train_central,
)
from .features import build_feature_task
from .federation import run_federation
from .metrics import cohort_size, group_selection_probability, selection_probability
from .model import param_manifest
from .report import emit_epoch_report, emit_report, merge_reports

LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} - {name} - {level} - {message}"
MANIFEST_JSON = "run_manifest.json"
CHECKPOINT_FILE = "final.fsim"
BEST_CHECKPOINT_FILE = "best.fsim"
EPOCHS_FILE = "epochs.csv"


def setup_logging(verbose: bool = False, log_file: Optional[Path] = None) -> None:
    """
    Set up logging configuration.

    Args:
        verbose: Whether to show debug logs
        log_file: Optional file that receives a copy of the log
    """
    level = "DEBUG" if verbose else "INFO"
    logger.remove()
    logger.add(sys.stderr, level=level, format=LOG_FORMAT)
    if log_file is not None:
        logger.add(log_file, level=level, format=LOG_FORMAT)


def _add_model_options(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("Model Options")
    group.add_argument(
        "--model-kind",
        choices=["linear", "mlp"],
        default="linear",
        help="Classifier trained on the task features",
    )
    group.add_argument("--hidden-dim", type=int, help="Hidden width of the mlp model")


def _add_optimizer_options(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("Optimizer Options")
    group.add_argument("--optimizer", choices=["sgd", "adam"], help="Optimizer name")
    group.add_argument("--lr", type=float, help="Learning rate")


def _add_federation_options(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("Federation Options")
    group.add_argument(
        "--sampler",
        choices=["uniform", "proportional", "hybrid"],
        help="Client selection strategy",
    )
    group.add_argument(
        "--aggregator", choices=["fedavg", "stale"], help="Aggregation strategy"
    )
    group.add_argument(
        "--guaranteed-clients",
        type=int,
        dest="guaranteed_clients",
        help="Largest clients selected every round by the hybrid sampler",
    )
    group.add_argument("--threads", type=int, help="Client worker threads")


def _add_task_options(parser: argparse.ArgumentParser, min_clips: int) -> None:
    parser.add_argument("--task", type=Path, required=True, help="Task directory")
    parser.add_argument("--out", type=Path, required=True, help="Output directory")
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument(
        "--min-clips",
        type=int,
        default=min_clips,
        dest="min_clips",
        help=f"Drop uploaders with fewer training clips (default {min_clips})",
    )
    parser.add_argument(
        "--timing",
        action="store_true",
        help="Record wall-clock times in the report tables",
    )


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Simulate federated averaging on a multi-label tagging task",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="Enable verbose output"
    )
    parser.add_argument("--log-file", type=Path, help="Also write the log to this file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="Partition a clip manifest by uploader")
    p.add_argument("manifest", type=Path, help="Clip manifest (CSV)")
    p.add_argument(
        "--min-clips",
        type=int,
        default=HIGH_VOLUME_MIN_CLIPS,
        dest="min_clips",
        help=f"Minimum training clips per client (default {HIGH_VOLUME_MIN_CLIPS})",
    )
    p.add_argument("--out", type=Path, help="Write client_id,n_k rows to this CSV")

    p = sub.add_parser("synth", help="Generate a synthetic non-IID task directory")
    p.add_argument("--out", type=Path, required=True, help="Task directory to create")
    p.add_argument("--config", type=Path, help="JSON config file (SynthTaskSpec)")
    p.add_argument("--num-clients", type=int, dest="num_clients")
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.add_argument("--input-dim", type=int, dest="input_dim")
    p.add_argument("--concentration", type=float, help="Dirichlet label skew")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("features", help="Build a task directory from wav files")
    p.add_argument("manifest", type=Path, help="Clip manifest (CSV)")
    p.add_argument(
        "--audio-dir", type=Path, required=True, help="Directory of <clip_id>.wav files"
    )
    p.add_argument("--out", type=Path, required=True, help="Task directory to create")

    p = sub.add_parser("train-central", help="Train the centralized baseline")
    _add_task_options(p, HIGH_VOLUME_MIN_CLIPS)
    _add_model_options(p)
    _add_optimizer_options(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--patience", type=int, help="Early-stopping patience in epochs")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train-fed", help="Run federated averaging")
    _add_task_options(p, HIGH_VOLUME_MIN_CLIPS)
    _add_model_options(p)
    _add_optimizer_options(p)
    _add_federation_options(p)
    p.add_argument("--C", type=float, dest="C", help="Fraction of clients per round")
    p.add_argument("--E", type=int, dest="E", help="Local epochs")
    p.add_argument("--B", type=int, dest="B", help="Local batch size")
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--init", type=Path, help="Start from this FSIM1 checkpoint")

    p = sub.add_parser("grid", help="Run the C x E grid search")
    _add_task_options(p, HIGH_VOLUME_MIN_CLIPS)
    _add_model_options(p)
    _add_optimizer_options(p)
    _add_federation_options(p)
    p.add_argument("--C-values", type=float, nargs="+", dest="C_values")
    p.add_argument("--E-values", type=int, nargs="+", dest="E_values")
    p.add_argument("--B", type=int, dest="B")
    p.add_argument("--rounds", type=int)
    p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("report", help="Merge the report tables of several runs")
    p.add_argument("run_dirs", type=Path, nargs="+", help="Output directories to merge")
    p.add_argument("--out", type=Path, required=True, help="Merged output directory")

    p = sub.add_parser("prob", help="Chance of being selected at least once")
    p.add_argument("--clients", type=int, required=True, help="Number of clients N")
    p.add_argument("--C", type=float, dest="C", required=True, help="Fraction per round")
    p.add_argument("--rounds", type=int, required=True, help="Communication rounds")
    p.add_argument(
        "--group-size",
        type=int,
        dest="group_size",
        help="Probability that any member of a group of this size is selected",
    )

    return parser.parse_args(argv)


def _optimizer_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {"name": args.optimizer, "lr": args.lr}


def _model_spec(args: argparse.Namespace, task: FederatedTask) -> ModelSpec:
    return ModelSpec(
        kind=args.model_kind,
        input_dim=task.eval_set.inputs.shape[1],
        hidden_dim=args.hidden_dim,
        num_classes=len(task.vocabulary),
    )


def _load_task(args: argparse.Namespace) -> FederatedTask:
    task = load_task(args.task, min_clips=args.min_clips)
    if not task.clients:
        raise InvalidInputError(
            f"no uploader in {args.task} has {args.min_clips} or more training clips"
        )
    return task


def run_partition(args: argparse.Namespace) -> int:
    records = ingest_metadata(args.manifest)
    clients = partition_by_uploader(records, args.min_clips)
    train_total = sum(1 for r in records if r.split == "train")
    covered = sum(c.n_k for c in clients)
    share = covered / train_total if train_total else 0.0
    print(f"Clients: {len(clients)}")
    print(f"Training clips covered: {covered}/{train_total} ({share:.1%})")
    for bucket, count in uploader_histogram(
        [r for r in records if r.split == "train"]
    ).items():
        print(f"Uploaders with {bucket} clips: {count}")
    if args.out is not None:
        lines = ["client_id,n_k"] + [f"{c.client_id},{c.n_k}" for c in clients]
        args.out.write_text("\n".join(lines) + "\n")
        logger.info(f"Wrote {len(clients)} clients to {args.out}")
    return 0


def run_synth(args: argparse.Namespace) -> int:
    spec = load_config(
        args.config,
        SynthTaskSpec,
        {
            "num_clients": args.num_clients,
            "num_classes": args.num_classes,
            "input_dim": args.input_dim,
            "concentration": args.concentration,
            "seed": args.seed,
        },
    )
    task = synth_federated_task(spec)
    export_synthetic_task(task, args.out)
    logger.info(
        f"Synthetic task with {len(task.clients)} clients and "
        f"{len(task.eval_set)} evaluation rows written to {args.out}"
    )
    return 0


def run_features(args: argparse.Namespace) -> int:
    records = ingest_metadata(args.manifest)
    build_feature_task(records, args.audio_dir, args.out)
    return 0


def run_train_central(args: argparse.Namespace) -> int:
    config = load_config(
        args.config,
        CentralConfig,
        {
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "patience": args.patience,
            "seed": args.seed,
            "optimizer": _optimizer_overrides(args),
        },
    )
    task = _load_task(args)
    spec = _model_spec(args, task)
    args.out.mkdir(parents=True, exist_ok=True)
    manifest = start_manifest(
        f"central_seed{config.seed}", "train-central", config, spec, task.fingerprint
    )

    result = train_central(config, task.clients, task.eval_set, spec)
    epochs_path = emit_epoch_report(result.epochs, args.out / EPOCHS_FILE, args.timing)
    checkpoint = args.out / BEST_CHECKPOINT_FILE
    save_checkpoint(result.best_params, checkpoint)
    manifest.finish(epochs=epochs_path, checkpoint=checkpoint).write(
        args.out / MANIFEST_JSON
    )
    best = result.epochs[result.best_epoch - 1]
    logger.info(
        f"Centralized training done: best epoch {result.best_epoch} "
        f"(PR-AUC={best.pr_auc:.4f}) of {len(result.epochs)}"
    )
    return 0


def run_train_fed(args: argparse.Namespace) -> int:
    config = load_config(
        args.config,
        FederationConfig,
        {
            "C": args.C,
            "E": args.E,
            "B": args.B,
            "rounds": args.rounds,
            "seed": args.seed,
            "sampler": args.sampler,
            "aggregator": args.aggregator,
            "guaranteed_clients": args.guaranteed_clients,
            "threads": args.threads,
            "optimizer": _optimizer_overrides(args),
        },
    )
    task = _load_task(args)
    spec = _model_spec(args, task)
    init = load_checkpoint(args.init, param_manifest(spec)) if args.init else None
    args.out.mkdir(parents=True, exist_ok=True)
    run_id = cell_run_id(config)
    manifest = start_manifest(run_id, "train-fed", config, spec, task.fingerprint)

    result = run_federation(config, task.clients, task.eval_set, spec, init=init)
    series, summary = emit_report(
        [CellResult(run_id, config, result.records)], args.out, args.timing
    )
    checkpoint = args.out / CHECKPOINT_FILE
    save_checkpoint(result.params, checkpoint)
    manifest.finish(series=series, summary=summary, checkpoint=checkpoint).write(
        args.out / MANIFEST_JSON
    )
    scores = [r.eval_metrics["pr_auc"] for r in result.records]
    logger.info(f"Federation done: max PR-AUC={max(scores):.4f}, final={scores[-1]:.4f}")
    return 0


def run_grid(args: argparse.Namespace) -> int:
    grid = load_config(
        args.config,
        GridSpec,
        {
            "C_values": args.C_values,
            "E_values": args.E_values,
            "B": args.B,
            "rounds": args.rounds,
            "seeds": args.seeds,
        },
    )
    base = load_config(
        None,
        FederationConfig,
        {
            "sampler": args.sampler,
            "aggregator": args.aggregator,
            "guaranteed_clients": args.guaranteed_clients,
            "threads": args.threads,
            "optimizer": _optimizer_overrides(args),
        },
    )
    task = _load_task(args)
    spec = _model_spec(args, task)
    args.out.mkdir(parents=True, exist_ok=True)
    manifest = start_manifest("grid", "grid", grid, spec, task.fingerprint)

    results = grid_search(grid, task.clients, task.eval_set, spec, base=base)
    series, summary = emit_report(results, args.out, args.timing)
    manifest = manifest.model_copy(
        update={"config": {**manifest.config, "base": base.model_dump()}}
    )
    manifest.finish(series=series, summary=summary).write(args.out / MANIFEST_JSON)
    failed = [r.run_id for r in results if r.status != "ok"]
    if failed:
        logger.warning(f"{len(failed)} of {len(results)} grid cells failed: {failed}")
    logger.info(f"Grid search done: {len(results) - len(failed)}/{len(results)} cells ok")
    return 0


def run_report(args: argparse.Namespace) -> int:
    merge_reports(args.run_dirs, args.out)
    return 0


def run_prob(args: argparse.Namespace) -> int:
    m = cohort_size(args.clients, args.C)
    if args.group_size is None:
        p = selection_probability(args.clients, args.C, args.rounds)
        print(
            f"P(a given client is selected at least once in {args.rounds} rounds, "
            f"{m} of {args.clients} per round) = {p:.6f}"
        )
    else:
        p = group_selection_probability(args.clients, args.C, args.rounds, args.group_size)
        print(
            f"P(any of {args.group_size} clients is selected at least once in "
            f"{args.rounds} rounds, {m} of {args.clients} per round) = {p:.6f}"
        )
    return 0


COMMANDS = {
    "partition": run_partition,
    "synth": run_synth,
    "features": run_features,
    "train-central": run_train_central,
    "train-fed": run_train_fed,
    "grid": run_grid,
    "report": run_report,
    "prob": run_prob,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the program."""
    args = parse_args(argv)
    setup_logging(args.verbose, args.log_file)
    logger.debug(f"Running fedsim {args.command}")

    try:
        return COMMANDS[args.command](args)
    except (InvalidInputError, ValidationError, json.JSONDecodeError) as e:
        logger.error(f"Invalid input: {e}")
        return 1
    except FileNotFoundError as e:
        logger.error(f"File not found: {e}")
        return 1
    except FedsimRuntimeError as e:
        logger.error(f"Run failed: {e}")
        if args.verbose:
            logger.opt(exception=True).debug("Error details:")
        return 2
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        if args.verbose:
            logger.opt(exception=True).debug("Error details:")
        else:
            logger.error("Run with --verbose for more details")
        return 2


if __name__ == "__main__":
    sys.exit(main())

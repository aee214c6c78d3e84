"""
Plot-ready report tables.
"""
import math
from pathlib import Path
from typing import List, Sequence, Tuple

import pandas as pd
from loguru import logger

from .errors import EmptyDatasetError, InvalidInputError
from .experiment import CellResult, EpochRecord

SERIES_COLUMNS = [
    "run_id", "C", "E", "B", "seed", "round", "pr_auc", "mu_t", "selected_count", "wall_time",
]
SUMMARY_COLUMNS = [
    "run_id", "C", "E", "B", "seed", "rounds", "status",
    "max_pr_auc", "mean_pr_auc", "final_pr_auc", "best_round", "error",
]
SERIES_FILE = "series.csv"
SUMMARY_FILE = "summary.csv"


def emit_report(
    results: Sequence[CellResult], out_dir: Path, timing: bool = False
) -> Tuple[Path, Path]:
    """
    Write the per-round series table and the per-run summary table.

    Args:
        results: federated runs (grid cells or a single run)
        out_dir: output directory
        timing: fill the wall_time column; left empty otherwise so that
            identical runs produce identical files

    Returns:
        (series path, summary path)
    """
    if not results:
        raise EmptyDatasetError("no runs to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    series: List[dict] = []
    summary: List[dict] = []
    for res in results:
        cfg = res.config
        ident = {"run_id": res.run_id, "C": cfg.C, "E": cfg.E, "B": cfg.B, "seed": cfg.seed}
        scores = [r.eval_metrics["pr_auc"] for r in res.records]
        for r in res.records:
            series.append(
                {
                    **ident,
                    "round": r.t,
                    "pr_auc": r.eval_metrics["pr_auc"],
                    "mu_t": r.mu_t,
                    "selected_count": len(r.selected),
                    "wall_time": r.wall_time if timing else None,
                }
            )
        best = max(range(len(scores)), key=lambda i: scores[i]) if scores else None
        summary.append(
            {
                **ident,
                "rounds": len(res.records),
                "status": res.status,
                "max_pr_auc": scores[best] if best is not None else None,
                "mean_pr_auc": math.fsum(scores) / len(scores) if scores else None,
                "final_pr_auc": scores[-1] if scores else None,
                "best_round": res.records[best].t if best is not None else None,
                "error": res.error or "",
            }
        )

    series_path = out_dir / SERIES_FILE
    summary_path = out_dir / SUMMARY_FILE
    pd.DataFrame(series, columns=SERIES_COLUMNS).to_csv(series_path, index=False)
    summary_df = pd.DataFrame(summary, columns=SUMMARY_COLUMNS)
    summary_df = summary_df.astype({"rounds": "Int64", "best_round": "Int64"})
    summary_df.to_csv(summary_path, index=False)
    logger.info(f"Wrote {len(series)} series rows and {len(summary)} summary rows to {out_dir}")
    return series_path, summary_path


def emit_epoch_report(epochs: Sequence[EpochRecord], path: Path, timing: bool = False) -> Path:
    """Per-epoch table of a centralized run."""
    rows = [
        {
            "epoch": e.epoch,
            "train_loss": e.train_loss,
            "pr_auc": e.pr_auc,
            "wall_time": e.wall_time if timing else None,
        }
        for e in epochs
    ]
    pd.DataFrame(rows, columns=["epoch", "train_loss", "pr_auc", "wall_time"]).to_csv(
        path, index=False
    )
    return Path(path)


def merge_reports(run_dirs: Sequence[Path], out_dir: Path) -> Tuple[Path, Path]:
    """
    Combine the series and summary tables of several output directories.

    Rows are ordered by run_id (and round), so the merged files do not depend
    on the order in which the runs finished or were listed.
    """
    if not run_dirs:
        raise EmptyDatasetError("no report directories to merge")
    series = pd.concat(
        [pd.read_csv(Path(d) / SERIES_FILE, dtype={"run_id": str}) for d in run_dirs],
        ignore_index=True,
    )
    summary = pd.concat(
        [
            pd.read_csv(Path(d) / SUMMARY_FILE, dtype={"run_id": str}, keep_default_na=False)
            for d in run_dirs
        ],
        ignore_index=True,
    )
    duplicated = summary["run_id"][summary["run_id"].duplicated()].tolist()
    if duplicated:
        raise InvalidInputError(f"run ids appear in more than one directory: {duplicated}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series_path = out_dir / SERIES_FILE
    summary_path = out_dir / SUMMARY_FILE
    series.sort_values(["run_id", "round"], kind="mergesort").to_csv(series_path, index=False)
    summary.sort_values("run_id", kind="mergesort").to_csv(summary_path, index=False)
    logger.info(f"Merged {len(run_dirs)} reports ({len(summary)} runs) into {out_dir}")
    return series_path, summary_path

"""
Experiment harness: centralized baseline, federated runs and the C x E grid.
"""
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from loguru import logger
from pydantic import BaseModel, Field

from .config import CentralConfig, FederationConfig, GridSpec, ModelSpec, resolve_threads
from .data import ClientDataset
from .errors import EmptyDatasetError
from .federation import RoundRecord, evaluate, run_federation, train_epochs
from .model import LabeledBatch, ParameterVector, init_params
from .optim import make_optimizer
from .seeding import client_rng


class RunManifest(BaseModel):
    """Everything needed to rerun an invocation bit-exactly."""

    run_id: str
    command: str
    config: Dict[str, Any]
    model: Dict[str, Any]
    data_fingerprint: str
    started_at: str
    finished_at: Optional[str] = None
    artifacts: Dict[str, str] = Field(default_factory=dict)

    def finish(self, **artifacts: Path) -> "RunManifest":
        return self.model_copy(
            update={
                "finished_at": _now(),
                "artifacts": {**self.artifacts, **{k: str(v) for k, v in artifacts.items()}},
            }
        )

    def write(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.model_dump(), indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def start_manifest(
    run_id: str,
    command: str,
    config: BaseModel,
    spec: ModelSpec,
    fingerprint: str,
) -> RunManifest:
    return RunManifest(
        run_id=run_id,
        command=command,
        config=config.model_dump(),
        model=spec.model_dump(),
        data_fingerprint=fingerprint,
        started_at=_now(),
    )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    pr_auc: float
    wall_time: float


@dataclass(frozen=True)
class CentralResult:
    epochs: List[EpochRecord]
    best_params: ParameterVector
    best_epoch: int
    stopped_early: bool


@dataclass(frozen=True)
class CellResult:
    run_id: str
    config: FederationConfig
    records: List[RoundRecord]
    status: str = "ok"
    error: Optional[str] = None


def pool_clients(clients: Sequence[ClientDataset]) -> LabeledBatch:
    """All client rows in one batch, clients in id order."""
    batches = [c.batch for c in sorted(clients, key=lambda c: c.client_id) if c.batch]
    if not batches:
        raise EmptyDatasetError("no client data to pool")
    return LabeledBatch.concat(batches)


def train_central(
    config: CentralConfig,
    clients: Sequence[ClientDataset],
    eval_set: LabeledBatch,
    spec: ModelSpec,
) -> CentralResult:
    """
    Train on the pooled client data with early stopping.

    Training stops once validation PR-AUC has not improved for
    `config.patience` consecutive epochs.

    Args:
        config: epochs, batch size, optimizer, patience, seed
        clients: data sources, pooled in client-id order
        eval_set: validation data
        spec: model shape

    Returns:
        CentralResult with the per-epoch log and the best epoch's parameters
    """
    pooled = pool_clients(clients)
    params = init_params(spec, config.seed)
    optimizer = make_optimizer(config.optimizer, len(params))
    # the stream a lone client sees in round 1, shared across all epochs
    rng = client_rng(config.seed, 1, 0)
    logger.info(
        f"Starting centralized training on {len(pooled)} rows for up to "
        f"{config.epochs} epochs (patience {config.patience})"
    )

    log: List[EpochRecord] = []
    best_params, best_metric, best_epoch = params, float("-inf"), 0
    waited = 0
    stopped_early = False
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        params, loss = train_epochs(
            spec, params, pooled, 1, config.batch_size, optimizer, rng
        )
        metric = evaluate(spec, params, eval_set)["pr_auc"]
        log.append(EpochRecord(epoch, loss, metric, time.perf_counter() - started))
        logger.info(f"Epoch {epoch}: loss={loss:.4f}, PR-AUC={metric:.4f}")
        if metric > best_metric:
            best_params, best_metric, best_epoch = params, metric, epoch
            waited = 0
        else:
            waited += 1
            if waited >= config.patience:
                stopped_early = True
                logger.info(f"Early stopping after epoch {epoch}; best epoch {best_epoch}")
                break
    return CentralResult(
        epochs=log, best_params=best_params, best_epoch=best_epoch, stopped_early=stopped_early
    )


def cell_run_id(config: FederationConfig) -> str:
    return f"C{config.C:g}_E{config.E}_B{config.B}_seed{config.seed}"


def grid_cells(grid: GridSpec, base: Optional[FederationConfig] = None) -> List[FederationConfig]:
    """One FederationConfig per (seed, C, E) cell."""
    base = base or FederationConfig()
    return [
        base.model_copy(update={"C": c, "E": e, "B": grid.B, "rounds": grid.rounds, "seed": s})
        for s in grid.seeds
        for c in grid.C_values
        for e in grid.E_values
    ]


def run_cell(
    config: FederationConfig,
    clients: Sequence[ClientDataset],
    eval_set: LabeledBatch,
    spec: ModelSpec,
) -> CellResult:
    """Run one grid cell; failures are recorded rather than raised."""
    run_id = cell_run_id(config)
    try:
        result = run_federation(config, clients, eval_set, spec)
    except Exception as e:
        logger.warning(f"Grid cell {run_id} failed: {e}")
        return CellResult(run_id, config, [], status="failed", error=str(e))
    return CellResult(run_id, config, result.records)


def grid_search(
    grid: GridSpec,
    clients: Sequence[ClientDataset],
    eval_set: LabeledBatch,
    spec: ModelSpec,
    base: Optional[FederationConfig] = None,
) -> List[CellResult]:
    """
    Run every (C, E, seed) cell of the grid.

    Cells are independent and each owns its random streams, so they may run in
    parallel (FSIM_THREADS workers) without changing any cell's output.

    Returns:
        Cell results in (seed, C, E) order
    """
    cells = grid_cells(grid, base)
    threads = resolve_threads(base.threads if base else None)
    if threads > 1:
        cells = [c.model_copy(update={"threads": 1}) for c in cells]
    logger.info(f"Running grid of {len(cells)} cells with {threads} worker(s)")
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda c: run_cell(c, clients, eval_set, spec), cells))

"""
Federated averaging engine.

Each round samples a cohort of clients, trains a copy of the global model on
every selected client, and replaces the global model with the data-weighted
mean of the returned parameters. Client sampling and local shuffles draw from
counter-derived random streams, so a run is fully determined by its seed.
"""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from .config import FederationConfig, ModelSpec, OptimizerConfig, resolve_threads
from .data import ClientDataset
from .errors import (
    EmptyDatasetError,
    InvalidInputError,
    NonFiniteError,
    UnknownClientError,
)
from .features import grouped_clip_scores
from .metrics import cohort_size, macro_pr_auc
from .model import LabeledBatch, ParameterVector, bce_loss, forward, init_params, loss_and_grad
from .optim import Optimizer, make_optimizer
from .seeding import client_rng, round_rng

StaleCache = Dict[str, Tuple[ParameterVector, int]]


@dataclass(frozen=True)
class ClientUpdate:
    client_id: str
    params: ParameterVector
    n_k: int

    def __post_init__(self) -> None:
        if self.n_k < 1:
            raise InvalidInputError(f"client {self.client_id}: n_k must be >= 1")


@dataclass(frozen=True)
class RoundRecord:
    t: int
    selected: Tuple[str, ...]
    mu_t: int
    eval_metrics: Dict[str, float]
    wall_time: float = field(default=0.0, compare=False)


@dataclass(frozen=True)
class FederationResult:
    records: List[RoundRecord]
    params: ParameterVector


def select_clients_uniform(
    num_clients: int, C: float, rng: np.random.Generator
) -> List[int]:
    """
    Uniform cohort without replacement.

    Args:
        num_clients: N >= 1
        C: fraction of clients per round
        rng: the round's generator

    Returns:
        max(1, round(C * N)) sorted client indices
    """
    if num_clients < 1:
        raise InvalidInputError("need at least one client")
    m = cohort_size(num_clients, C)
    return sorted(int(i) for i in rng.choice(num_clients, size=m, replace=False))


def select_clients_proportional(
    sizes: Sequence[int], C: float, rng: np.random.Generator
) -> List[int]:
    """
    Cohort drawn by successive size-weighted draws without replacement.

    Uses exponential keys log(u) / n_k and keeps the m largest, which has the
    same distribution as drawing one client at a time with probability
    proportional to n_k among those not yet drawn.
    """
    weights = np.asarray(sizes, dtype=np.float64)
    if weights.size < 1 or np.any(weights < 1):
        raise InvalidInputError("every client size must be >= 1")
    m = cohort_size(weights.size, C)
    u = 1.0 - rng.random(weights.size)
    keys = np.log(u) / weights
    return sorted(int(i) for i in np.argsort(-keys, kind="stable")[:m])


def select_clients_hybrid(
    sizes: Sequence[int], C: float, guaranteed: int, rng: np.random.Generator
) -> List[int]:
    """
    The `guaranteed` largest clients every round, the rest of the cohort uniform.
    """
    n = len(sizes)
    if n < 1:
        raise InvalidInputError("need at least one client")
    m = cohort_size(n, C)
    by_size = sorted(range(n), key=lambda i: (-sizes[i], i))
    fixed = by_size[: min(guaranteed, m)]
    rest = np.array(sorted(by_size[len(fixed) :]), dtype=np.int64)
    extra = rng.choice(rest, size=m - len(fixed), replace=False) if m > len(fixed) else []
    return sorted(int(i) for i in [*fixed, *extra])


def train_epochs(
    spec: ModelSpec,
    params: ParameterVector,
    batch: LabeledBatch,
    epochs: int,
    batch_size: int,
    optimizer: Optimizer,
    rng: np.random.Generator,
) -> Tuple[ParameterVector, float]:
    """
    Mini-batch training, reshuffling every epoch; the short last batch is kept.

    Returns:
        (parameters, mean training loss of the last epoch; nan if epochs == 0)
    """
    n = len(batch)
    if n == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    last_loss = float("nan")
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            rows = order[start : start + batch_size]
            try:
                loss, grad = loss_and_grad(spec, params, batch.take(rows))
                params = optimizer.step(params, grad)
            except NonFiniteError as e:
                raise NonFiniteError(
                    f"{e} (epoch {epoch + 1}, batch starting at row {start})"
                ) from e
            losses.append(loss * len(rows))
        last_loss = float(np.sum(losses) / n)
    return params, last_loss


def local_update(
    global_params: ParameterVector,
    client: ClientDataset,
    E: int,
    B: int,
    optimizer: OptimizerConfig,
    rng: np.random.Generator,
    spec: ModelSpec,
) -> ClientUpdate:
    """
    Train a copy of the global model on one client.

    Args:
        global_params: w_t
        client: client with features attached
        E: local epochs (0 returns w_t unchanged)
        B: local mini-batch size
        optimizer: optimizer settings; state starts fresh
        rng: the client's generator for this round
        spec: model shape

    Returns:
        ClientUpdate carrying w^k_{t+1} and n_k
    """
    if client.batch is None or len(client.batch) == 0:
        raise EmptyDatasetError(f"client {client.client_id} has no training rows")
    params, loss = train_epochs(
        spec,
        global_params,
        client.batch,
        E,
        B,
        make_optimizer(optimizer, len(global_params)),
        rng,
    )
    logger.debug(f"Client {client.client_id}: n_k={client.n_k}, last epoch loss {loss:.4f}")
    return ClientUpdate(client_id=client.client_id, params=params, n_k=client.n_k)


def fedavg_aggregate(updates: Sequence[ClientUpdate]) -> ParameterVector:
    """
    Data-weighted mean of client parameters.

    w = sum_k (n_k / mu) w^k with mu = sum_k n_k, accumulated in float64 in
    ascending client-id order.
    """
    if not updates:
        raise EmptyDatasetError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    reference = ordered[0].params
    for u in ordered[1:]:
        reference.check_compatible(u.params)
    mu = sum(u.n_k for u in ordered)
    acc = np.zeros(len(reference))
    for u in ordered:
        acc += (u.n_k / mu) * u.params.values
    return reference.with_values(acc)


def init_stale_cache(
    clients: Sequence[ClientDataset], init: ParameterVector
) -> StaleCache:
    """Every client starts out holding the initial global parameters."""
    return {c.client_id: (init, c.n_k) for c in clients}


def stale_aggregate(
    cache: Mapping[str, Tuple[ParameterVector, int]],
    fresh: Sequence[ClientUpdate],
    init: ParameterVector,
) -> Tuple[ParameterVector, StaleCache]:
    """
    Refresh the per-client parameter cache and average all of it.

    Args:
        cache: latest parameters and n_k of every client
        fresh: updates from this round's cohort
        init: initial global parameters (returned when the cache is empty)

    Returns:
        (weighted mean over all cache entries, updated cache)
    """
    updated: StaleCache = dict(cache)
    for u in fresh:
        if u.client_id not in updated:
            raise UnknownClientError(f"update from unknown client {u.client_id!r}")
        init.check_compatible(u.params)
        updated[u.client_id] = (u.params, u.n_k)
    if not updated:
        return init, updated
    entries = [
        ClientUpdate(client_id=cid, params=p, n_k=n) for cid, (p, n) in updated.items()
    ]
    return fedavg_aggregate(entries), updated


def evaluate(
    spec: ModelSpec, params: ParameterVector, eval_set: LabeledBatch
) -> Dict[str, float]:
    """
    Macro PR-AUC and mean BCE on the evaluation set.

    Rows sharing a group id are patches of one clip; their scores are averaged
    before PR-AUC is computed.
    """
    if len(eval_set) == 0:
        raise EmptyDatasetError("evaluation set is empty")
    scores = forward(spec, params, eval_set.inputs)
    loss = bce_loss(scores, eval_set.targets)
    targets = eval_set.targets
    if eval_set.groups is not None:
        scores, targets = grouped_clip_scores(scores, targets, eval_set.groups)
    return {"pr_auc": macro_pr_auc(scores, targets), "loss": loss}


def _select(
    config: FederationConfig, sizes: Sequence[int], rng: np.random.Generator
) -> List[int]:
    if config.sampler == "proportional":
        return select_clients_proportional(sizes, config.C, rng)
    if config.sampler == "hybrid":
        return select_clients_hybrid(sizes, config.C, config.guaranteed_clients, rng)
    return select_clients_uniform(len(sizes), config.C, rng)


def run_federation(
    config: FederationConfig,
    clients: Sequence[ClientDataset],
    eval_set: LabeledBatch,
    spec: ModelSpec,
    init: Optional[ParameterVector] = None,
    on_round: Optional[Callable[[RoundRecord, ParameterVector], None]] = None,
) -> FederationResult:
    """
    Run config.rounds communication rounds.

    Args:
        config: C, E, B, rounds, seed and strategy choices
        clients: clients with features attached (ids must be unique)
        eval_set: central evaluation data
        spec: model shape
        init: starting global parameters (default: init_params(spec, config.seed))
        on_round: called after every round with the record and new global params

    Returns:
        FederationResult with one RoundRecord per round and the final parameters
    """
    if not clients:
        raise EmptyDatasetError("federation needs at least one client")
    if len(eval_set) == 0:
        raise EmptyDatasetError("evaluation set is empty")
    clients = sorted(clients, key=lambda c: c.client_id)
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("client ids must be unique")
    sizes = [c.n_k for c in clients]
    threads = resolve_threads(config.threads)

    init_global = init if init is not None else init_params(spec, config.seed)
    params = init_global
    cache = init_stale_cache(clients, init_global) if config.aggregator == "stale" else {}
    records: List[RoundRecord] = []
    logger.info(
        f"Starting federation: {len(clients)} clients, C={config.C}, E={config.E}, "
        f"B={config.B}, rounds={config.rounds}, sampler={config.sampler}, "
        f"aggregator={config.aggregator}, threads={threads}"
    )

    def train_client(t: int, k: int, global_params: ParameterVector) -> ClientUpdate:
        return local_update(
            global_params,
            clients[k],
            config.E,
            config.B,
            config.optimizer,
            client_rng(config.seed, t, k),
            spec,
        )

    with ThreadPoolExecutor(max_workers=threads) as pool:
        for t in range(1, config.rounds + 1):
            started = time.perf_counter()
            selected = _select(config, sizes, round_rng(config.seed, t))
            current = params
            updates = list(pool.map(lambda k: train_client(t, k, current), selected))
            if config.aggregator == "stale":
                params, cache = stale_aggregate(cache, updates, init_global)
            else:
                params = fedavg_aggregate(updates)
            metrics = evaluate(spec, params, eval_set)
            record = RoundRecord(
                t=t,
                selected=tuple(ids[k] for k in selected),
                mu_t=sum(sizes[k] for k in selected),
                eval_metrics=metrics,
                wall_time=time.perf_counter() - started,
            )
            records.append(record)
            logger.info(
                f"Round {t}/{config.rounds}: {len(selected)} clients, "
                f"mu_t={record.mu_t}, PR-AUC={metrics['pr_auc']:.4f}"
            )
            if on_round is not None:
                on_round(record, params)
    return FederationResult(records=records, params=params)

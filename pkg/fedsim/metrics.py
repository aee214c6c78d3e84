"""
Precision-recall metrics and client selection probabilities.

PR-AUC follows the average-precision convention: a step sum of precision
weighted by recall increments over distinct score thresholds, no trapezoids.
"""
import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from loguru import logger
from scipy.special import gammaln

from .errors import DimensionMismatchError, EmptyDatasetError, InvalidInputError


@dataclass(frozen=True)
class PRCurve:
    """(recall, precision) points, starting at recall 0, one per threshold group."""

    points: Tuple[Tuple[float, float], ...]
    thresholds: Tuple[float, ...]
    positives: int
    negatives: int


@dataclass(frozen=True)
class MacroPRAUC:
    value: float
    per_class: Dict[int, float]
    skipped: int


def _validate(scores: np.ndarray, labels: np.ndarray) -> None:
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionMismatchError(
            f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors"
        )
    if not np.any(labels == 1):
        raise InvalidInputError("precision-recall needs at least one positive label")


def _group_counts(scores: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, ...]:
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    # last index of each run of tied scores
    ends = np.flatnonzero(np.diff(s) != 0.0)
    ends = np.append(ends, s.size - 1)
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    return s[ends], tp, fp


def pr_curve(scores: List[float], labels: List[int]) -> PRCurve:
    """
    Precision-recall curve with tied scores handled as one threshold.

    Args:
        scores: real-valued scores
        labels: 0/1 labels of the same length, at least one 1

    Returns:
        PRCurve whose first point is (0, 1)
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    _validate(s, y)
    thresholds, tp, fp = _group_counts(s, y)
    positives = int(y.sum())
    recall = tp / positives
    precision = tp / (tp + fp)
    points = [(0.0, 1.0)] + [(float(r), float(p)) for r, p in zip(recall, precision)]
    return PRCurve(
        points=tuple(points),
        thresholds=tuple(float(t) for t in thresholds),
        positives=positives,
        negatives=int(y.size - positives),
    )


def pr_auc(scores: List[float], labels: List[int]) -> float:
    """
    Area under the precision-recall curve as average precision.

    Sum over threshold groups of (R_i - R_{i-1}) * P_i with R_0 = 0.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    _validate(s, y)
    _, tp, fp = _group_counts(s, y)
    positives = int(y.sum())
    recall = tp / positives
    precision = tp / (tp + fp)
    increments = np.diff(recall, prepend=0.0)
    return math.fsum((increments * precision).tolist())


def macro_pr_auc_report(scores: np.ndarray, labels: np.ndarray) -> MacroPRAUC:
    """
    Per-class PR-AUC and their unweighted mean.

    Classes without a positive label are skipped and counted.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise DimensionMismatchError(
            f"score matrix {scores.shape} and label matrix {labels.shape} differ"
        )
    per_class: Dict[int, float] = {}
    skipped = 0
    for k in range(scores.shape[1]):
        if not np.any(labels[:, k] == 1):
            skipped += 1
            continue
        per_class[k] = pr_auc(scores[:, k], labels[:, k])
    if not per_class:
        raise EmptyDatasetError("no class has a positive label")
    if skipped:
        logger.debug(f"Skipped {skipped} classes without positives")
    value = math.fsum(per_class.values()) / len(per_class)
    return MacroPRAUC(value=value, per_class=per_class, skipped=skipped)


def macro_pr_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    return macro_pr_auc_report(scores, labels).value


def cohort_size(num_clients: int, C: float) -> int:
    """m = max(1, round_half_up(C * N))."""
    if not 0 < C <= 1:
        raise InvalidInputError(f"C must be in (0, 1], got {C}")
    return max(1, min(num_clients, math.floor(C * num_clients + 0.5)))


def selection_probability(num_clients: int, C: float, rounds: int) -> float:
    """
    Chance that one fixed client is selected at least once.

    Args:
        num_clients: N >= 1
        C: fraction of clients per round
        rounds: R >= 1

    Returns:
        1 - (1 - m/N)^R with m the cohort size
    """
    if num_clients < 1 or rounds < 1:
        raise InvalidInputError("num_clients and rounds must be >= 1")
    m = cohort_size(num_clients, C)
    return 1.0 - (1.0 - m / num_clients) ** rounds


def group_selection_probability(
    num_clients: int, C: float, rounds: int, group_size: int
) -> float:
    """
    Chance that at least one member of a fixed group is ever selected.

    Per round, no member is drawn with probability C(N-g, m) / C(N, m)
    under uniform sampling without replacement.
    """
    if num_clients < 1 or rounds < 1:
        raise InvalidInputError("num_clients and rounds must be >= 1")
    if not 0 <= group_size <= num_clients:
        raise InvalidInputError(f"group_size must be in [0, {num_clients}]")
    m = cohort_size(num_clients, C)
    if group_size == 0:
        return 0.0
    if num_clients - group_size < m:
        return 1.0
    log_miss = (
        gammaln(num_clients - group_size + 1)
        - gammaln(num_clients - group_size - m + 1)
        - gammaln(num_clients + 1)
        + gammaln(num_clients - m + 1)
    )
    return float(-np.expm1(rounds * log_miss))

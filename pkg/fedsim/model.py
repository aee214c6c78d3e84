"""
Reference multi-label classifiers with analytic gradients.

Two model kinds are trainable: a linear layer and a one-hidden-layer ReLU MLP,
both with sigmoid outputs and mean binary cross-entropy loss. Parameters travel
as a flat float64 ParameterVector with a tensor manifest, which is what the
federation layer averages and what checkpoints store.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .config import ModelSpec
from .errors import (
    DimensionMismatchError,
    EmptyDatasetError,
    InvalidInputError,
    ManifestMismatchError,
    NonFiniteError,
)

Manifest = Tuple[Tuple[str, Tuple[int, ...]], ...]

PROB_CLAMP = 1e-12

# Six-conv VGG-like tagger the reference models stand in for. Kept as data only.
VGG_LIKE_ARCHITECTURE: Dict[str, object] = {
    "input": (101, 96),
    "conv_blocks": [
        {"filters": 32, "layers": 3, "kernel": (3, 3), "pool": (2, 2)},
        {"filters": 64, "layers": 2, "kernel": (3, 3), "pool": (2, 2)},
        {"filters": 128, "layers": 1, "kernel": (3, 3), "pool": (2, 2)},
    ],
    "per_layer": ["batch_norm", "relu"],
    "summary": ["global_max_pool", "global_avg_pool", "concat"],
    "dense": [256, "num_classes"],
    "output": "sigmoid",
}


@dataclass(frozen=True)
class ParameterVector:
    """Flat float64 parameters plus an ordered (name, shape) manifest."""

    values: np.ndarray
    manifest: Manifest

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise DimensionMismatchError("parameter values must be one-dimensional")
        expected = manifest_size(self.manifest)
        if values.size != expected:
            raise DimensionMismatchError(
                f"manifest describes {expected} values, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("parameter vector contains non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    def tensors(self) -> Dict[str, np.ndarray]:
        """Read-only views of the individual tensors, keyed by name."""
        out: Dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self.manifest:
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = self.values[offset : offset + size].reshape(shape)
            offset += size
        return out

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(values=values, manifest=self.manifest)

    def check_compatible(self, other: "ParameterVector") -> None:
        if self.manifest != other.manifest:
            raise ManifestMismatchError(
                f"manifest mismatch: {list(self.manifest)} vs {list(other.manifest)}"
            )

    @classmethod
    def from_tensors(cls, tensors: Sequence[Tuple[str, np.ndarray]]) -> "ParameterVector":
        manifest = tuple((name, tuple(int(d) for d in arr.shape)) for name, arr in tensors)
        flat = [np.asarray(arr, dtype=np.float64).ravel() for _, arr in tensors]
        values = np.concatenate(flat) if flat else np.zeros(0)
        return cls(values=values, manifest=manifest)


@dataclass(frozen=True)
class LabeledBatch:
    """
    Inputs with binary multi-label targets.

    `groups` optionally maps each row to a source clip index; evaluation then
    averages row scores per clip before scoring.
    """

    inputs: np.ndarray
    targets: np.ndarray
    groups: Optional[np.ndarray] = field(default=None)

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64)
        if inputs.ndim != 2 or targets.ndim != 2:
            raise DimensionMismatchError("inputs and targets must be matrices")
        if inputs.shape[0] != targets.shape[0]:
            raise DimensionMismatchError(
                f"{inputs.shape[0]} input rows but {targets.shape[0]} target rows"
            )
        if not np.all((targets == 0.0) | (targets == 1.0)):
            raise DimensionMismatchError("targets must be 0/1")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)
        if self.groups is not None:
            groups = np.asarray(self.groups, dtype=np.int64)
            if groups.shape != (inputs.shape[0],):
                raise DimensionMismatchError("groups must have one entry per row")
            object.__setattr__(self, "groups", groups)

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def take(self, rows: np.ndarray) -> "LabeledBatch":
        groups = None if self.groups is None else self.groups[rows]
        return LabeledBatch(self.inputs[rows], self.targets[rows], groups)

    @staticmethod
    def concat(batches: Sequence["LabeledBatch"]) -> "LabeledBatch":
        """
        Stack batches row-wise.

        Group ids are kept as they are, so grouped batches must index one shared
        clip space. Mixing grouped and ungrouped batches is an error.
        """
        if not batches:
            raise EmptyDatasetError("no batches to concatenate")
        grouped = [b.groups is not None for b in batches]
        if any(grouped) and not all(grouped):
            raise InvalidInputError("cannot concatenate grouped and ungrouped batches")
        groups = np.concatenate([b.groups for b in batches]) if all(grouped) else None
        return LabeledBatch(
            np.concatenate([b.inputs for b in batches]),
            np.concatenate([b.targets for b in batches]),
            groups,
        )


def manifest_size(manifest: Manifest) -> int:
    return int(sum(int(np.prod(shape, dtype=np.int64)) for _, shape in manifest))


def param_manifest(spec: ModelSpec) -> Manifest:
    """Tensor names and shapes for a model spec."""
    if spec.kind == "linear":
        return (
            ("W", (spec.input_dim, spec.num_classes)),
            ("b", (spec.num_classes,)),
        )
    hidden = int(spec.hidden_dim or 0)
    return (
        ("W1", (spec.input_dim, hidden)),
        ("b1", (hidden,)),
        ("W2", (hidden, spec.num_classes)),
        ("b2", (spec.num_classes,)),
    )


def init_params(spec: ModelSpec, seed: int) -> ParameterVector:
    """
    Draw initial parameters.

    Weights are uniform in +-sqrt(6 / fan_in); biases start at zero.

    Args:
        spec: model shape
        seed: generator seed

    Returns:
        ParameterVector for the spec
    """
    rng = np.random.default_rng(seed)
    tensors: List[Tuple[str, np.ndarray]] = []
    for name, shape in param_manifest(spec):
        if len(shape) == 2:
            bound = np.sqrt(6.0 / shape[0])
            tensors.append((name, rng.uniform(-bound, bound, size=shape)))
        else:
            tensors.append((name, np.zeros(shape)))
    return ParameterVector.from_tensors(tensors)


def _check_inputs(spec: ModelSpec, params: ParameterVector, inputs: np.ndarray) -> None:
    if params.manifest != param_manifest(spec):
        raise ManifestMismatchError("parameters do not match the model spec")
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim:
        raise DimensionMismatchError(
            f"expected inputs of width {spec.input_dim}, got shape {inputs.shape}"
        )


def _logits(
    spec: ModelSpec, params: ParameterVector, inputs: np.ndarray
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    t = params.tensors()
    if spec.kind == "linear":
        return inputs @ t["W"] + t["b"], None
    pre = inputs @ t["W1"] + t["b1"]
    hidden = np.maximum(pre, 0.0)
    return hidden @ t["W2"] + t["b2"], pre


def forward(spec: ModelSpec, params: ParameterVector, inputs: np.ndarray) -> np.ndarray:
    """
    Per-class probability scores.

    Args:
        spec: model shape
        params: parameters matching the spec
        inputs: [batch x input_dim]

    Returns:
        [batch x num_classes] scores clamped to [1e-12, 1 - 1e-12]
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    _check_inputs(spec, params, inputs)
    logits, _ = _logits(spec, params, inputs)
    return np.clip(expit(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)


def bce_loss(scores: np.ndarray, targets: np.ndarray) -> float:
    p = np.clip(scores, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(targets * np.log(p) + (1.0 - targets) * np.log1p(-p)))


def loss_and_grad(
    spec: ModelSpec, params: ParameterVector, batch: LabeledBatch
) -> Tuple[float, ParameterVector]:
    """
    Mean binary cross-entropy and its exact gradient.

    Args:
        spec: model shape
        params: parameters matching the spec
        batch: nonempty labeled batch

    Returns:
        (loss, gradient with the same manifest as params)
    """
    if len(batch) == 0:
        raise EmptyDatasetError("loss_and_grad needs at least one example")
    _check_inputs(spec, params, batch.inputs)
    logits, pre = _logits(spec, params, batch.inputs)
    probs = expit(logits)
    loss = bce_loss(probs, batch.targets)

    # d(mean BCE)/d(logit) for sigmoid outputs
    d_logits = (probs - batch.targets) / batch.targets.size

    if spec.kind == "linear":
        grads = [
            ("W", batch.inputs.T @ d_logits),
            ("b", d_logits.sum(axis=0)),
        ]
    else:
        t = params.tensors()
        hidden = np.maximum(pre, 0.0)
        d_hidden = (d_logits @ t["W2"].T) * (pre > 0.0)
        grads = [
            ("W1", batch.inputs.T @ d_hidden),
            ("b1", d_hidden.sum(axis=0)),
            ("W2", hidden.T @ d_logits),
            ("b2", d_logits.sum(axis=0)),
        ]
    if not np.isfinite(loss):
        raise NonFiniteError(f"loss is {loss}")
    return loss, ParameterVector.from_tensors(grads)

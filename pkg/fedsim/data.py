"""
Clip metadata, uploader-based client partitioning and synthetic federated tasks.

The canonical manifest is a comma-delimited file with header
`clip_id,uploader,labels,split,duration_s`; labels are '|'-separated class
names. A task directory pairs that manifest with an FSIM1 feature blob whose
rows point back at manifest rows.
"""
import hashlib
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .blob import read_blob, write_blob
from .config import SynthTaskSpec
from .errors import EmptyDatasetError, InvalidInputError, MetadataError
from .model import LabeledBatch
from .seeding import STREAM_SYNTH, derive_rng

MANIFEST_COLUMNS = ["clip_id", "uploader", "labels", "split", "duration_s"]
REQUIRED_COLUMNS = ["clip_id", "uploader", "labels", "split"]
LABEL_SEPARATOR = "|"
MANIFEST_FILE = "manifest.csv"
FEATURES_FILE = "features.fsim"
HISTOGRAM_BUCKETS = ("1", "2-10", "11-99", ">=100")


class ClipRecord(BaseModel):
    """One row of the clip manifest."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    clip_id: str = Field(min_length=1)
    uploader: str = Field(min_length=1)
    labels: FrozenSet[str]
    split: Literal["train", "val", "test"]
    duration_s: Optional[float] = Field(default=None, gt=0)

    @field_validator("labels")
    @classmethod
    def _labels_nonempty(cls, value: FrozenSet[str]) -> FrozenSet[str]:
        if not value or any(not name for name in value):
            raise ValueError("labels must be a nonempty set of class names")
        return value


@dataclass(frozen=True)
class ClientDataset:
    """
    One simulated device.

    Before features are attached the client only knows its clip ids and n_k is
    the clip count; afterwards n_k is the number of training rows.
    """

    client_id: str
    clip_ids: Tuple[str, ...]
    batch: Optional[LabeledBatch] = None

    def __post_init__(self) -> None:
        if self.n_k < 1:
            raise EmptyDatasetError(f"client {self.client_id} holds no examples")

    @property
    def n_k(self) -> int:
        if self.batch is not None:
            return len(self.batch)
        return len(self.clip_ids)


@dataclass(frozen=True)
class SyntheticTask:
    clients: List[ClientDataset]
    eval_set: LabeledBatch
    prototypes: np.ndarray
    class_distribution: np.ndarray
    client_proportions: np.ndarray
    vocabulary: Tuple[str, ...]


@dataclass(frozen=True)
class FederatedTask:
    clients: List[ClientDataset]
    eval_set: LabeledBatch
    vocabulary: Tuple[str, ...]
    fingerprint: str


def ingest_metadata(path: Path) -> List[ClipRecord]:
    """
    Read a clip manifest.

    Row numbers in errors are file line numbers (the header is line 1).

    Args:
        path: manifest file

    Returns:
        One ClipRecord per data row, in file order
    """
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise MetadataError(f"{path}: missing column(s) {missing}")
    has_duration = "duration_s" in df.columns

    records: List[ClipRecord] = []
    seen: Dict[str, int] = {}
    for index, row in enumerate(df.itertuples(index=False)):
        line = index + 2
        labels = [name.strip() for name in row.labels.split(LABEL_SEPARATOR)]
        if not row.labels.strip() or not all(labels):
            raise MetadataError("empty label field", row=line)
        duration = getattr(row, "duration_s", "") if has_duration else ""
        try:
            record = ClipRecord(
                clip_id=row.clip_id.strip(),
                uploader=row.uploader.strip(),
                labels=frozenset(labels),
                split=row.split.strip(),
                duration_s=float(duration) if duration.strip() else None,
            )
        except (ValidationError, ValueError) as e:
            raise MetadataError(str(e).splitlines()[0], row=line) from e
        if record.clip_id in seen:
            raise MetadataError(
                f"duplicate clip_id {record.clip_id!r} (first seen on row {seen[record.clip_id]})",
                row=line,
            )
        seen[record.clip_id] = line
        records.append(record)
    logger.info(f"Ingested {len(records)} clips from {path}")
    return records


def write_manifest(records: Sequence[ClipRecord], path: Path) -> None:
    """Write records in the canonical manifest format."""
    rows = [
        {
            "clip_id": r.clip_id,
            "uploader": r.uploader,
            "labels": LABEL_SEPARATOR.join(sorted(r.labels)),
            "split": r.split,
            "duration_s": "" if r.duration_s is None else repr(r.duration_s),
        }
        for r in records
    ]
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(path, index=False)


def vocabulary_of(records: Sequence[ClipRecord]) -> Tuple[str, ...]:
    return tuple(sorted({name for r in records for name in r.labels}))


def _train_groups(clips: Sequence[ClipRecord]) -> Dict[str, List[str]]:
    groups: Dict[str, List[str]] = defaultdict(list)
    for clip in clips:
        if clip.split == "train":
            groups[clip.uploader].append(clip.clip_id)
    return groups


def partition_by_uploader(clips: Sequence[ClipRecord], min_clips: int) -> List[ClientDataset]:
    """
    Group training clips into one client per uploader.

    Args:
        clips: manifest records (non-train splits are ignored)
        min_clips: uploaders with fewer training clips are dropped

    Returns:
        Clients sorted by uploader name
    """
    if not clips:
        raise EmptyDatasetError("no clips to partition")
    groups = _train_groups(clips)
    clients = [
        ClientDataset(client_id=uploader, clip_ids=tuple(ids))
        for uploader, ids in sorted(groups.items())
        if len(ids) >= min_clips
    ]
    dropped = len(groups) - len(clients)
    logger.info(
        f"Partitioned {sum(len(v) for v in groups.values())} train clips from "
        f"{len(groups)} uploaders into {len(clients)} clients (min_clips={min_clips}, "
        f"{dropped} dropped)"
    )
    return clients


def uploader_histogram(clips: Sequence[ClipRecord]) -> Dict[str, int]:
    """
    Count uploaders by how many clips they contributed.

    Buckets are "1", "2-10", "11-99" and ">=100"; every bucket is present.
    """
    if not clips:
        raise EmptyDatasetError("no clips to count")
    per_uploader = Counter(clip.uploader for clip in clips)
    histogram = {bucket: 0 for bucket in HISTOGRAM_BUCKETS}
    for count in per_uploader.values():
        if count == 1:
            histogram["1"] += 1
        elif count <= 10:
            histogram["2-10"] += 1
        elif count < 100:
            histogram["11-99"] += 1
        else:
            histogram[">=100"] += 1
    return histogram


def _truncated_power_law(
    rng: np.random.Generator, count: int, exponent: float, lo: int, hi: int
) -> np.ndarray:
    u = rng.random(count)
    if lo == hi:
        return np.full(count, lo, dtype=np.int64)
    if math.isclose(exponent, 1.0):
        x = lo * (hi / lo) ** u
    else:
        a = 1.0 - exponent
        x = (lo**a + u * (hi**a - lo**a)) ** (1.0 / a)
    return np.clip(np.floor(x).astype(np.int64), lo, hi)


def _dirichlet(rng: np.random.Generator, alpha: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    props = rng.dirichlet(alpha)
    if not np.all(np.isfinite(props)) or props.sum() <= 0:
        # every gamma draw underflowed: all mass on one class
        props = np.zeros_like(alpha)
        props[rng.choice(alpha.size, p=fallback)] = 1.0
    return props


def _draw_examples(
    rng: np.random.Generator,
    primary: np.ndarray,
    prototypes: np.ndarray,
    spec: SynthTaskSpec,
) -> LabeledBatch:
    n = primary.size
    targets = np.zeros((n, spec.num_classes))
    targets[np.arange(n), primary] = 1.0
    extra = rng.random(n) < spec.extra_label_prob
    secondary = rng.integers(0, spec.num_classes, size=n)
    targets[np.flatnonzero(extra), secondary[extra]] = 1.0
    noise = rng.standard_normal((n, spec.input_dim))
    inputs = targets @ prototypes + spec.noise_scale * noise
    return LabeledBatch(inputs, targets)


def synth_federated_task(spec: SynthTaskSpec) -> SyntheticTask:
    """
    Generate an unbalanced, label-skewed federated task.

    Client sizes follow a power law truncated to [min_size, max_size]; each
    client's class mix is Dirichlet(concentration * global distribution);
    inputs are the sum of the active labels' prototypes plus Gaussian noise.
    The evaluation set follows the global distribution and contains every class.

    Args:
        spec: generator settings

    Returns:
        SyntheticTask with clients sorted by id
    """
    if spec.min_size > spec.max_size:
        raise InvalidInputError(
            f"min_size {spec.min_size} exceeds max_size {spec.max_size}"
        )
    rng = derive_rng(spec.seed, STREAM_SYNTH)
    k = spec.num_classes
    ranks = np.arange(1, k + 1, dtype=np.float64)
    class_distribution = ranks**-0.5 / np.sum(ranks**-0.5)
    prototypes = rng.standard_normal((k, spec.input_dim))
    sizes = _truncated_power_law(
        rng, spec.num_clients, spec.size_exponent, spec.min_size, spec.max_size
    )

    width = max(4, len(str(spec.num_clients - 1)))
    clients: List[ClientDataset] = []
    proportions = np.zeros((spec.num_clients, k))
    for i, size in enumerate(sizes):
        proportions[i] = _dirichlet(rng, spec.concentration * class_distribution, class_distribution)
        primary = rng.choice(k, size=int(size), p=proportions[i])
        batch = _draw_examples(rng, primary, prototypes, spec)
        client_id = f"client-{i:0{width}d}"
        clip_ids = tuple(f"{client_id}-{j:06d}" for j in range(int(size)))
        clients.append(ClientDataset(client_id=client_id, clip_ids=clip_ids, batch=batch))

    total = int(sizes.sum())
    n_eval = max(k, math.ceil(spec.eval_fraction / (1.0 - spec.eval_fraction) * total))
    primary = np.concatenate([np.arange(k), rng.choice(k, size=n_eval - k, p=class_distribution)])
    primary = rng.permutation(primary)
    eval_set = _draw_examples(rng, primary, prototypes, spec)

    logger.info(
        f"Generated synthetic task: {spec.num_clients} clients, {total} train rows, "
        f"{n_eval} eval rows, {k} classes"
    )
    return SyntheticTask(
        clients=clients,
        eval_set=eval_set,
        prototypes=prototypes,
        class_distribution=class_distribution,
        client_proportions=proportions,
        vocabulary=tuple(f"class_{c:03d}" for c in range(k)),
    )


def _labels_of(row: np.ndarray, vocabulary: Sequence[str]) -> FrozenSet[str]:
    return frozenset(vocabulary[c] for c in np.flatnonzero(row))


def export_synthetic_task(task: SyntheticTask, out_dir: Path) -> Path:
    """
    Write a synthetic task as a task directory (manifest + feature blob).

    Returns:
        The task directory
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records: List[ClipRecord] = []
    inputs: List[np.ndarray] = []
    targets: List[np.ndarray] = []
    for client in task.clients:
        assert client.batch is not None
        for clip_id, row in zip(client.clip_ids, client.batch.targets):
            records.append(
                ClipRecord(
                    clip_id=clip_id,
                    uploader=client.client_id,
                    labels=_labels_of(row, task.vocabulary),
                    split="train",
                )
            )
        inputs.append(client.batch.inputs)
        targets.append(client.batch.targets)
    for j, row in enumerate(task.eval_set.targets):
        records.append(
            ClipRecord(
                clip_id=f"eval-{j:06d}",
                uploader="eval",
                labels=_labels_of(row, task.vocabulary),
                split="val",
            )
        )
    inputs.append(task.eval_set.inputs)
    targets.append(task.eval_set.targets)
    write_task(
        out_dir,
        records,
        np.concatenate(inputs),
        np.concatenate(targets),
        np.arange(len(records)),
        task.vocabulary,
    )
    return out_dir


def write_task(
    out_dir: Path,
    records: Sequence[ClipRecord],
    inputs: np.ndarray,
    targets: np.ndarray,
    row_clip: np.ndarray,
    vocabulary: Sequence[str],
) -> None:
    """Write manifest.csv and features.fsim into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(records, out_dir / MANIFEST_FILE)
    write_blob(
        out_dir / FEATURES_FILE,
        [
            ("inputs", inputs),
            ("targets", targets),
            ("row_clip", np.asarray(row_clip, dtype=np.float64)),
        ],
        kind="features",
        meta={"vocabulary": list(vocabulary)},
    )


def task_fingerprint(task_dir: Path) -> str:
    digest = hashlib.sha256()
    for name in (MANIFEST_FILE, FEATURES_FILE):
        digest.update((Path(task_dir) / name).read_bytes())
    return digest.hexdigest()


def load_task(task_dir: Path, min_clips: int = 1) -> FederatedTask:
    """
    Load a task directory as federated clients plus a central evaluation set.

    Args:
        task_dir: directory with manifest.csv and features.fsim
        min_clips: uploader threshold passed to partition_by_uploader

    Returns:
        FederatedTask; evaluation rows keep their clip index as group
    """
    task_dir = Path(task_dir)
    records = ingest_metadata(task_dir / MANIFEST_FILE)
    blob = read_blob(task_dir / FEATURES_FILE)
    try:
        inputs = blob.arrays["inputs"]
        targets = blob.arrays["targets"]
        row_clip = blob.arrays["row_clip"].astype(np.int64)
        vocabulary = tuple(blob.meta["vocabulary"])
    except KeyError as e:
        raise InvalidInputError(f"{task_dir}: feature blob lacks {e}") from e
    if row_clip.size and (row_clip.min() < 0 or row_clip.max() >= len(records)):
        raise InvalidInputError(f"{task_dir}: feature rows point outside the manifest")

    position = {r.clip_id: i for i, r in enumerate(records)}
    clients: List[ClientDataset] = []
    for client in partition_by_uploader(records, min_clips):
        rows = np.flatnonzero(np.isin(row_clip, [position[c] for c in client.clip_ids]))
        if rows.size == 0:
            logger.warning(f"Client {client.client_id} has no feature rows; dropped")
            continue
        clients.append(
            ClientDataset(
                client_id=client.client_id,
                clip_ids=client.clip_ids,
                batch=LabeledBatch(inputs[rows], targets[rows]),
            )
        )
    val_positions = [i for i, r in enumerate(records) if r.split == "val"]
    eval_rows = np.flatnonzero(np.isin(row_clip, val_positions))
    if eval_rows.size == 0:
        raise EmptyDatasetError(f"{task_dir}: no validation rows")
    eval_set = LabeledBatch(inputs[eval_rows], targets[eval_rows], row_clip[eval_rows])
    return FederatedTask(
        clients=clients,
        eval_set=eval_set,
        vocabulary=vocabulary,
        fingerprint=task_fingerprint(task_dir),
    )

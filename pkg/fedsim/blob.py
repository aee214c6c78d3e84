"""
FSIM1 binary container.

Layout (little-endian):
    5 bytes   magic "FSIM1"
    uint16    format version
    uint32    header length in bytes
    header    UTF-8 JSON: {"kind", "tensors": [[name, shape], ...], "meta"}
    payload   float64 values of every tensor, in manifest order

Checkpoints store one ParameterVector; feature blobs store the arrays of a task.
"""
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import BlobFormatError, BlobTruncatedError, ManifestMismatchError
from .model import Manifest, ParameterVector, manifest_size

MAGIC = b"FSIM1"
VERSION = 1
_PREFIX = struct.Struct("<5sHI")


@dataclass(frozen=True)
class Blob:
    kind: str
    manifest: Manifest
    arrays: Dict[str, np.ndarray]
    meta: Dict[str, Any]


def write_blob(
    path: Path,
    arrays: Sequence[Tuple[str, np.ndarray]],
    kind: str,
    meta: Optional[Dict[str, Any]] = None,
) -> None:
    """
    Write named arrays as an FSIM1 blob.

    Args:
        path: output file
        arrays: (name, array) pairs in payload order
        kind: content tag, e.g. "params" or "features"
        meta: extra JSON-serialisable header fields
    """
    tensors = [[name, [int(d) for d in np.shape(arr)]] for name, arr in arrays]
    header = json.dumps(
        {"kind": kind, "tensors": tensors, "meta": meta or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_blob(path: Path) -> Blob:
    """
    Read and validate an FSIM1 blob.

    Raises:
        BlobFormatError: wrong magic, unknown version, bad header, trailing bytes
        BlobTruncatedError: file shorter than its header or payload says
    """
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        if MAGIC.startswith(data[: len(MAGIC)]) and data:
            raise BlobTruncatedError(f"{path}: file ends inside the FSIM1 prefix")
        raise BlobFormatError(f"{path}: not an FSIM1 file")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise BlobFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise BlobFormatError(f"{path}: unsupported FSIM1 version {version}")
    body = _PREFIX.size + header_len
    if len(data) < body:
        raise BlobTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(data[_PREFIX.size : body].decode("utf-8"))
        manifest: Manifest = tuple(
            (str(name), tuple(int(d) for d in shape)) for name, shape in header["tensors"]
        )
        kind = str(header["kind"])
        meta = dict(header.get("meta", {}))
    except (ValueError, KeyError, TypeError) as e:
        raise BlobFormatError(f"{path}: malformed header ({e})") from e

    count = manifest_size(manifest)
    expected = body + 8 * count
    if len(data) < expected:
        raise BlobTruncatedError(
            f"{path}: payload has {len(data) - body} bytes, header declares {8 * count}"
        )
    if len(data) > expected:
        raise BlobFormatError(f"{path}: {len(data) - expected} trailing bytes")

    values = np.frombuffer(data, dtype="<f8", count=count, offset=body).astype(np.float64)
    arrays: Dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in manifest:
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = values[offset : offset + size].reshape(shape)
        offset += size
    return Blob(kind=kind, manifest=manifest, arrays=arrays, meta=meta)


def save_checkpoint(params: ParameterVector, path: Path) -> None:
    """Write parameters so that load_checkpoint returns them bit-exactly."""
    write_blob(path, list(params.tensors().items()), kind="params")


def load_checkpoint(path: Path, expected: Optional[Manifest] = None) -> ParameterVector:
    """
    Load a parameter checkpoint.

    Args:
        path: FSIM1 file written by save_checkpoint
        expected: manifest the caller needs; checked when given

    Returns:
        ParameterVector
    """
    blob = read_blob(path)
    if blob.kind != "params":
        raise BlobFormatError(f"{path}: holds {blob.kind!r}, not parameters")
    if expected is not None and tuple(expected) != blob.manifest:
        raise ManifestMismatchError(
            f"{path}: checkpoint manifest {list(blob.manifest)} != {list(expected)}"
        )
    values = (
        np.concatenate([arr.ravel() for arr in blob.arrays.values()])
        if blob.arrays
        else np.zeros(0)
    )
    return ParameterVector(values=values, manifest=blob.manifest)

"""
Log-mel patch extraction.

Clips at 22,050 Hz are cut into one-second windows with 50% overlap, each
window becomes a 101 x 96 log-mel array, and every patch carries its clip's
labels. Patch scores are averaged back to clip scores for evaluation.
"""
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy.io import wavfile
from scipy.signal import get_window

from .data import ClipRecord, vocabulary_of, write_task
from .errors import DimensionMismatchError, EmptyDatasetError, InvalidInputError

SAMPLE_RATE = 22050
N_FFT = 1024
WIN_LENGTH = 661  # 30 ms
HOP_LENGTH = 220  # 10 ms
N_MELS = 96
N_FRAMES = SAMPLE_RATE // HOP_LENGTH + 1
F_MIN = 0.0
F_MAX = SAMPLE_RATE / 2
LOG_FLOOR = 1e-10
PATCH_SHAPE = (N_FRAMES, N_MELS)


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise InvalidInputError("audio clip needs a nonempty mono sample vector")
        if self.sample_rate <= 0:
            raise InvalidInputError("sample rate must be positive")
        object.__setattr__(self, "samples", samples)


@dataclass(frozen=True)
class MelPatch:
    values: np.ndarray
    source_clip: str
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.values.shape != PATCH_SHAPE:
            raise DimensionMismatchError(
                f"patch must be {PATCH_SHAPE}, got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError(f"patch of {self.source_clip} has non-finite values")


def hz_to_mel(freq: Union[float, np.ndarray]) -> np.ndarray:
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hz(mel: Union[float, np.ndarray]) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges() -> np.ndarray:
    """N_MELS + 2 edge frequencies in Hz; band j peaks at edges[j + 1]."""
    mels = np.linspace(hz_to_mel(F_MIN), hz_to_mel(F_MAX), N_MELS + 2)
    return mel_to_hz(mels)


def mel_band_centers() -> np.ndarray:
    return mel_band_edges()[1:-1]


@lru_cache(maxsize=1)
def mel_filterbank() -> np.ndarray:
    """
    Triangular filters over the rfft bins, each scaled so its largest tap is 1.

    Returns:
        [N_MELS x (N_FFT // 2 + 1)] read-only matrix
    """
    edges = mel_band_edges()
    bins = np.fft.rfftfreq(N_FFT, d=1.0 / SAMPLE_RATE)
    lower = edges[:-2, None]
    center = edges[1:-1, None]
    upper = edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    peaks = weights.max(axis=1, keepdims=True)
    # the lowest bands can fall between two bins and catch none
    weights = np.divide(weights, peaks, out=np.zeros_like(weights), where=peaks > 0)
    weights.setflags(write=False)
    return weights


@lru_cache(maxsize=1)
def _analysis_window() -> np.ndarray:
    window = get_window("hann", WIN_LENGTH, fftbins=True)
    pad = (N_FFT - WIN_LENGTH) // 2
    window = np.pad(window, (pad, N_FFT - WIN_LENGTH - pad))
    window.setflags(write=False)
    return window


def segment_patches(num_samples: int, sample_rate: int) -> List[Tuple[int, int]]:
    """
    One-second windows with a half-second hop.

    Clips up to one second give a single (0, sample_rate) window, to be filled
    by tiling. A trailing remainder gets one extra window aligned to the clip end.

    Args:
        num_samples: clip length in samples (>= 1)
        sample_rate: samples per second

    Returns:
        (start, end) sample ranges, end exclusive
    """
    if num_samples < 1:
        raise InvalidInputError("clip must contain at least one sample")
    length = sample_rate
    hop = sample_rate // 2
    if num_samples <= length:
        return [(0, length)]
    starts = list(range(0, num_samples - length + 1, hop))
    if starts[-1] + length < num_samples:
        starts.append(num_samples - length)
    return [(s, s + length) for s in starts]


def extract_window(samples: np.ndarray, start: int, end: int) -> np.ndarray:
    """Slice a window, tile-repeating clips shorter than the window."""
    length = end - start
    if samples.size < length:
        return np.resize(samples, length)
    return samples[start:end]


def mel_patch(window: np.ndarray) -> np.ndarray:
    """
    Log-mel array of a one-second window.

    Centered STFT with reflection padding, 661-sample Hann window in a
    1024-point transform, 220-sample hop; 96 HTK mel bands over 0-11,025 Hz;
    log(power + 1e-10).

    Args:
        window: exactly 22,050 samples

    Returns:
        [101 x 96] array (frames x mel bands)
    """
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (SAMPLE_RATE,):
        raise DimensionMismatchError(
            f"mel_patch expects {SAMPLE_RATE} samples, got {window.shape}"
        )
    padded = np.pad(window, N_FFT // 2, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, N_FFT)[::HOP_LENGTH]
    frames = frames[:N_FRAMES] * _analysis_window()
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    mel_power = power @ mel_filterbank().T
    return np.log(mel_power + LOG_FLOOR)


def inherit_labels(
    clip: ClipRecord,
    patches: Sequence[np.ndarray],
    vocabulary: Sequence[str],
) -> List[MelPatch]:
    """
    Attach the clip's label vector and id to every patch.

    Args:
        clip: source clip record (id and label set)
        patches: log-mel arrays of the clip
        vocabulary: ordered class names defining the label vector layout

    Returns:
        One MelPatch per input patch
    """
    index = {name: i for i, name in enumerate(vocabulary)}
    missing = sorted(name for name in clip.labels if name not in index)
    if missing:
        raise InvalidInputError(
            f"clip {clip.clip_id}: labels {missing} not in vocabulary"
        )
    vector = np.zeros(len(vocabulary))
    vector[[index[name] for name in clip.labels]] = 1.0
    return [
        MelPatch(values=p, source_clip=clip.clip_id, labels=vector.copy())
        for p in patches
    ]


def clip_patches(clip: AudioClip) -> List[np.ndarray]:
    """All log-mel patches of a clip."""
    if clip.sample_rate != SAMPLE_RATE:
        raise InvalidInputError(
            f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate} Hz (resample first)"
        )
    return [
        mel_patch(extract_window(clip.samples, start, end))
        for start, end in segment_patches(clip.samples.size, clip.sample_rate)
    ]


def clip_scores(patch_scores: np.ndarray) -> np.ndarray:
    """Unweighted per-class mean over a clip's patch scores."""
    patch_scores = np.asarray(patch_scores, dtype=np.float64)
    if patch_scores.ndim != 2 or patch_scores.shape[0] == 0:
        raise EmptyDatasetError("clip_scores needs at least one patch row")
    return patch_scores.mean(axis=0)


def grouped_clip_scores(
    row_scores: np.ndarray, row_targets: np.ndarray, groups: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Collapse patch rows to clip rows.

    Returns:
        (clip scores, clip targets), clips ordered by group id
    """
    ids = np.unique(groups)
    scores = np.stack([clip_scores(row_scores[groups == g]) for g in ids])
    targets = np.stack([row_targets[np.flatnonzero(groups == g)[0]] for g in ids])
    return scores, targets


def write_patch_text(patch: np.ndarray, path: Path) -> None:
    """Plain-text dump of one patch, for golden files."""
    np.savetxt(path, patch, fmt="%.10e")


def read_wav(path: Path) -> AudioClip:
    """Read a PCM wav file as mono float samples in [-1, 1]."""
    rate, data = wavfile.read(path)
    samples = np.asarray(data)
    if np.issubdtype(samples.dtype, np.integer):
        info = np.iinfo(samples.dtype)
        samples = (samples.astype(np.float64) - (info.max + info.min + 1) / 2) / (
            (info.max - info.min + 1) / 2
        )
    samples = samples.astype(np.float64)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioClip(samples=samples, sample_rate=int(rate))


def build_feature_task(
    records: Sequence[ClipRecord], audio_dir: Path, out_dir: Path
) -> Tuple[int, int]:
    """
    Turn `<clip_id>.wav` files into a task directory of labeled patches.

    Clips of the train and val splits are processed; clips without audio are
    skipped with a warning.

    Returns:
        (clips processed, patches written)
    """
    vocabulary = vocabulary_of(records)
    kept: List[ClipRecord] = []
    rows: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    row_clip: List[int] = []
    for record in records:
        if record.split not in ("train", "val"):
            continue
        path = Path(audio_dir) / f"{record.clip_id}.wav"
        if not path.exists():
            logger.warning(f"No audio for clip {record.clip_id}; skipped")
            continue
        patches = inherit_labels(record, clip_patches(read_wav(path)), vocabulary)
        for patch in patches:
            rows.append(patch.values.ravel())
            labels.append(patch.labels)
            row_clip.append(len(kept))
        kept.append(record)
    if not rows:
        raise EmptyDatasetError(f"no audio found under {audio_dir}")
    write_task(out_dir, kept, np.stack(rows), np.stack(labels), np.array(row_clip), vocabulary)
    logger.info(f"Extracted {len(rows)} patches from {len(kept)} clips into {out_dir}")
    return len(kept), len(rows)

"""
Tests for log-mel patch extraction.
"""
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from fedsim.data import ClipRecord, load_task
from fedsim.errors import DimensionMismatchError, EmptyDatasetError, InvalidInputError
from fedsim.features import (
    LOG_FLOOR,
    N_MELS,
    PATCH_SHAPE,
    SAMPLE_RATE,
    AudioClip,
    MelPatch,
    build_feature_task,
    clip_patches,
    clip_scores,
    extract_window,
    grouped_clip_scores,
    hz_to_mel,
    inherit_labels,
    mel_band_centers,
    mel_filterbank,
    mel_patch,
    mel_to_hz,
    read_wav,
    segment_patches,
    write_patch_text,
)


def _tone(freq: float, seconds: float, amplitude: float = 1.0) -> np.ndarray:
    t = np.arange(int(round(seconds * SAMPLE_RATE))) / SAMPLE_RATE
    return amplitude * np.sin(2 * np.pi * freq * t)


def _clip(clip_id: str, labels, split: str = "train") -> ClipRecord:
    return ClipRecord(clip_id=clip_id, uploader="u1", labels=frozenset(labels), split=split)


class TestSegmentation(unittest.TestCase):
    """Test patch boundaries."""

    def test_three_second_clip(self):
        """Test that 3 s gives five patches on a half-second grid."""
        patches = segment_patches(3 * SAMPLE_RATE, SAMPLE_RATE)
        starts = [start / SAMPLE_RATE for start, _ in patches]
        self.assertEqual([0.0, 0.5, 1.0, 1.5, 2.0], starts)
        self.assertTrue(all(end - start == SAMPLE_RATE for start, end in patches))

    def test_one_second_clip(self):
        """Test that exactly 1 s is a single patch."""
        self.assertEqual([(0, SAMPLE_RATE)], segment_patches(SAMPLE_RATE, SAMPLE_RATE))

    def test_short_clip_is_tiled(self):
        """Test that a 0.4 s clip is tile-repeated to 1 s."""
        samples = np.arange(int(0.4 * SAMPLE_RATE), dtype=float)
        (start, end), = segment_patches(samples.size, SAMPLE_RATE)
        window = extract_window(samples, start, end)
        self.assertEqual((SAMPLE_RATE,), window.shape)
        np.testing.assert_array_equal(samples, window[: samples.size])
        np.testing.assert_array_equal(samples[:100], window[samples.size : samples.size + 100])

    def test_final_patch_right_aligned(self):
        """Test that a trailing remainder ends at the final sample."""
        num_samples = int(2.2 * SAMPLE_RATE)
        patches = segment_patches(num_samples, SAMPLE_RATE)
        self.assertEqual(4, len(patches))
        self.assertEqual(num_samples, patches[-1][1])

    def test_patch_count(self):
        """Test ceil((d - 1) / 0.5) + 1 patches over a sweep of durations."""
        hop = SAMPLE_RATE // 2
        for num_samples in range(SAMPLE_RATE, 6 * SAMPLE_RATE, 1733):
            expected = math.ceil((num_samples - SAMPLE_RATE) / hop) + 1
            self.assertEqual(
                expected, len(segment_patches(num_samples, SAMPLE_RATE)), num_samples
            )
        for seconds in (1.0, 1.5, 2.0, 4.5, 10.0):
            expected = math.ceil((seconds - 1.0) / 0.5) + 1
            patches = segment_patches(int(seconds * SAMPLE_RATE), SAMPLE_RATE)
            self.assertEqual(expected, len(patches), seconds)

    def test_patches_cover_clip(self):
        """Test that the patch ranges together touch every sample."""
        for num_samples in (SAMPLE_RATE, SAMPLE_RATE + 1, 33_333, 3 * SAMPLE_RATE - 7, 100_000):
            covered = np.zeros(num_samples, dtype=bool)
            for start, end in segment_patches(num_samples, SAMPLE_RATE):
                self.assertGreaterEqual(start, 0)
                self.assertLessEqual(end, num_samples)
                covered[start:end] = True
            self.assertTrue(covered.all(), num_samples)

    def test_empty_clip(self):
        """Test that an empty clip is rejected."""
        with self.assertRaises(InvalidInputError):
            segment_patches(0, SAMPLE_RATE)


class TestMelPatch(unittest.TestCase):
    """Test the log-mel transform."""

    def test_shape(self):
        """Test that every one-second window becomes 101 x 96."""
        rng = np.random.default_rng(0)
        for _ in range(3):
            self.assertEqual(PATCH_SHAPE, mel_patch(rng.normal(size=SAMPLE_RATE)).shape)
        self.assertEqual((101, 96), PATCH_SHAPE)

    def test_wrong_length(self):
        """Test that a window of the wrong length is rejected."""
        with self.assertRaises(DimensionMismatchError):
            mel_patch(np.zeros(SAMPLE_RATE - 1))

    def test_silence_is_constant(self):
        """Test that silence gives log(floor) everywhere."""
        patch = mel_patch(np.zeros(SAMPLE_RATE))
        self.assertTrue(np.all(patch == patch[0, 0]))
        self.assertAlmostEqual(math.log(LOG_FLOOR), patch[0, 0], places=12)

    def test_tone_peaks_in_nearest_band(self):
        """Test that a 1 kHz tone peaks in the band centred nearest 1 kHz."""
        expected = int(np.argmin(np.abs(mel_band_centers() - 1000.0)))
        patch = mel_patch(_tone(1000.0, 1.0))
        peaks = patch[5:-5].argmax(axis=1)
        self.assertTrue(np.all(peaks == expected), f"peaks {set(peaks)} != {expected}")

    def test_louder_tone_has_more_energy(self):
        """Test that doubling the amplitude raises the log energy."""
        quiet = mel_patch(_tone(440.0, 1.0, 0.25))
        loud = mel_patch(_tone(440.0, 1.0, 0.5))
        self.assertGreater(loud.mean(), quiet.mean())

    def test_scaling_never_lowers_energy(self):
        """Test that amplifying a window never lowers any log-mel entry."""
        rng = np.random.default_rng(4)
        windows = [rng.normal(size=SAMPLE_RATE), _tone(3000.0, 1.0, 0.3)]
        for window in windows:
            base = mel_patch(window)
            for alpha in (1.5, 2.0, 4.0):
                scaled = mel_patch(alpha * window)
                self.assertTrue(np.all(scaled >= base - 1e-12), alpha)

    def test_filterbank(self):
        """Test the mel filterbank layout."""
        weights = mel_filterbank()
        self.assertEqual((N_MELS, 513), weights.shape)
        self.assertLessEqual(weights.max(), 1.0)
        centers = mel_band_centers()
        self.assertTrue(np.all(np.diff(centers) > 0))
        self.assertAlmostEqual(1000.0, float(mel_to_hz(hz_to_mel(1000.0))), places=9)

    def test_patch_text_export(self):
        """Test the plain-text dump of a patch."""
        patch = mel_patch(_tone(440.0, 1.0))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "patch.txt"
            write_patch_text(patch, path)
            loaded = np.loadtxt(path)
        self.assertEqual(PATCH_SHAPE, loaded.shape)
        np.testing.assert_allclose(patch, loaded, rtol=1e-9)


class TestLabels(unittest.TestCase):
    """Test label inheritance and clip scores."""

    def test_inherit_labels(self):
        """Test that every patch copies the clip's label vector."""
        patches = [np.zeros(PATCH_SHAPE)] * 5
        labeled = inherit_labels(_clip("c1", {"a", "c"}), patches, ("a", "b", "c"))
        self.assertEqual(5, len(labeled))
        for patch in labeled:
            np.testing.assert_array_equal(np.array([1.0, 0.0, 1.0]), patch.labels)
            self.assertEqual("c1", patch.source_clip)

    def test_vocabulary_order(self):
        """Test that a permuted vocabulary permutes the label vector."""
        labeled = inherit_labels(_clip("c1", {"a", "c"}), [np.zeros(PATCH_SHAPE)], ("b", "a", "c"))
        self.assertEqual(1, len(labeled))
        np.testing.assert_array_equal(np.array([0.0, 1.0, 1.0]), labeled[0].labels)

    def test_unknown_label(self):
        """Test that a label outside the vocabulary is rejected."""
        with self.assertRaises(InvalidInputError):
            inherit_labels(_clip("c1", {"z"}), [np.zeros(PATCH_SHAPE)], ("a",))

    def test_patch_validation(self):
        """Test that MelPatch enforces its shape."""
        with self.assertRaises(DimensionMismatchError):
            MelPatch(values=np.zeros((100, 96)), source_clip="c", labels=np.ones(1))

    def test_clip_scores(self):
        """Test the per-class mean over patches."""
        np.testing.assert_allclose(
            np.array([0.3, 0.4]), clip_scores(np.array([[0.2, 0.8], [0.4, 0.0]]))
        )
        row = np.array([[0.1, 0.7, 0.3]])
        np.testing.assert_array_equal(row[0], clip_scores(row))
        np.testing.assert_allclose(row[0], clip_scores(np.repeat(row, 4, axis=0)))
        with self.assertRaises(EmptyDatasetError):
            clip_scores(np.zeros((0, 3)))

    def test_clip_scores_within_patch_range(self):
        """Test that each clip score lies between its patches' extremes."""
        rng = np.random.default_rng(6)
        for rows in (1, 2, 7, 30):
            patch_scores = rng.random((rows, 5))
            scores = clip_scores(patch_scores)
            self.assertTrue(np.all(scores >= patch_scores.min(axis=0) - 1e-15))
            self.assertTrue(np.all(scores <= patch_scores.max(axis=0) + 1e-15))

    def test_grouped_clip_scores(self):
        """Test that rows are collapsed per group."""
        scores = np.array([[0.2], [0.4], [0.9]])
        targets = np.array([[1.0], [1.0], [0.0]])
        clip_level, clip_targets = grouped_clip_scores(scores, targets, np.array([3, 3, 7]))
        np.testing.assert_allclose(np.array([[0.3], [0.9]]), clip_level)
        np.testing.assert_array_equal(np.array([[1.0], [0.0]]), clip_targets)


class TestAudio(unittest.TestCase):
    """Test wav reading and task building."""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_read_wav(self):
        """Test integer scaling and stereo downmix."""
        stereo = np.array([[16384, 0], [-32768, -32768], [0, 16384]], dtype=np.int16)
        wavfile.write(self.root / "s.wav", SAMPLE_RATE, stereo)
        clip = read_wav(self.root / "s.wav")
        self.assertEqual(SAMPLE_RATE, clip.sample_rate)
        np.testing.assert_allclose(np.array([0.25, -1.0, 0.25]), clip.samples)

    def test_wrong_sample_rate(self):
        """Test that audio at another rate is rejected."""
        with self.assertRaises(InvalidInputError):
            clip_patches(AudioClip(samples=np.zeros(16000), sample_rate=16000))

    def test_build_feature_task(self):
        """Test building and loading a task directory from wav files."""
        audio = self.root / "audio"
        audio.mkdir()
        wavfile.write(audio / "a.wav", SAMPLE_RATE, _tone(500.0, 2.0).astype(np.float32))
        wavfile.write(audio / "b.wav", SAMPLE_RATE, _tone(2000.0, 1.0).astype(np.float32))
        records = [
            _clip("a", {"low"}),
            _clip("b", {"high"}, split="val"),
            _clip("missing", {"low"}),
        ]
        clips, rows = build_feature_task(records, audio, self.root / "task")
        self.assertEqual((2, 4), (clips, rows))

        task = load_task(self.root / "task", min_clips=1)
        self.assertEqual(("high", "low"), task.vocabulary)
        self.assertEqual(1, len(task.clients))
        self.assertEqual(3, task.clients[0].n_k)
        self.assertEqual((1, 101 * 96), task.eval_set.inputs.shape)
        np.testing.assert_array_equal(np.array([[1.0, 0.0]]), task.eval_set.targets)

    def test_build_without_audio(self):
        """Test that a manifest with no audio at all is rejected."""
        with self.assertRaises(EmptyDatasetError):
            build_feature_task([_clip("a", {"x"})], self.root, self.root / "task")


if __name__ == "__main__":
    unittest.main()

import numpy as np
import pytest

from waverefine import data, dsp, evaluation
from waverefine.data import DatasetError, UtteranceRecord
from waverefine.network import ConditionFeatures


@pytest.fixture(scope="module")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    data.make_toy_dataset(3, root, seed=7)
    return root


class TestConditionFile:
    def test_round_trip(self, tmp_path):
        c = ConditionFeatures.from_phonemes(
            [3, 5, 2], [4, 6, 2], [220.0] * 4 + [0.0] * 6 + [440.0] * 2,
            speaker_id=0)
        path = tmp_path / "c.tsv"
        data.write_condition_file(path, c)
        back = data.read_condition_file(path)
        np.testing.assert_array_equal(back.phoneme_ids, c.phoneme_ids)
        np.testing.assert_array_equal(back.durations, c.durations)
        np.testing.assert_allclose(back.pitch, c.pitch, atol=1e-6)
        assert back.speaker_id == 0

    def test_header_written(self, tmp_path):
        c = ConditionFeatures.from_phonemes([1], [2], [100.0, 100.0])
        path = tmp_path / "c.tsv"
        data.write_condition_file(path, c)
        lines = path.read_text().splitlines()
        assert lines[0] == "# phoneme_id\tf0_hz\tduration_frames"
        assert lines[1].startswith("# speaker_id")
        assert len(lines) == 4


class TestManifest:
    def test_round_trip_relative_paths(self, tmp_path):
        recs = [UtteranceRecord("target/a.wav", "reference/a.wav", "condition/a.tsv")]
        path = tmp_path / "manifest.tsv"
        data.write_manifest(path, recs)
        back = data.read_manifest(path)
        assert back[0].target_path == str(tmp_path / "target/a.wav")

    def test_empty_rejected(self, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("")
        with pytest.raises(DatasetError, match="empty"):
            data.read_manifest(path)

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("only\ttwo\n")
        with pytest.raises(DatasetError, match="fields"):
            data.read_manifest(path)


class TestSynthesis:
    def test_utterance_shape_and_range(self):
        rng = np.random.default_rng(0)
        target, cond = data.synthesize_utterance(400, rng)
        assert len(target) == 400 * 128
        assert cond.n_frames == 400
        assert np.max(np.abs(target.samples)) <= 1.0

    def test_pitch_on_pentatonic_grid(self):
        rng = np.random.default_rng(1)
        _, cond = data.synthesize_utterance(400, rng)
        voiced = cond.pitch[cond.pitch > 0]
        allowed = {round(220.0 * 2 ** (s / 12.0), 6)
                   for s in data.PENTATONIC_SEMITONES}
        assert set(np.round(voiced, 6)) <= allowed

    def test_dominant_f0_matches_condition(self):
        # Oracle: the F0 estimator run on the clean target must agree with
        # the condition track on voiced frames.
        rng = np.random.default_rng(2)
        target, cond = data.synthesize_utterance(400, rng)
        est = evaluation.estimate_f0(target)
        frames_per_est = 256 // 128
        agree = total = 0
        for m, f_est in enumerate(est):
            cf = cond.pitch[min(m * frames_per_est + 2, cond.n_frames - 1)]
            if cf <= 0 or f_est <= 0:
                continue
            total += 1
            agree += abs(f_est - cf) / cf < 0.05
        assert total > 50
        assert agree / total > 0.9


class TestLossyReference:
    def test_reference_close_but_not_exact(self):
        rng = np.random.default_rng(3)
        target, _ = data.synthesize_utterance(400, rng)
        ref = data.lossy_reference(target)
        assert len(ref) == len(target)
        s = evaluation.snr(target, ref)
        assert 5.0 < s < 40.0

    def test_reference_time_aligned(self):
        rng = np.random.default_rng(4)
        target, _ = data.synthesize_utterance(400, rng)
        ref = data.lossy_reference(target)
        t = target.samples - target.samples.mean()
        r = ref.samples - ref.samples.mean()
        xcorr = float(np.dot(t, r) / (np.linalg.norm(t) * np.linalg.norm(r)))
        assert xcorr > 0.5


class TestToyDataset:
    def test_layout_and_loadability(self, toy_root):
        records = data.read_manifest(toy_root / "manifest.tsv")
        assert len(records) == 3
        for rec in records:
            target, reference, cond = data.load_utterance(rec)
            assert len(target) == len(reference)
            assert len(target) % 256 == 0
            assert cond.n_frames * 128 == len(target)
            assert 380 * 128 <= len(target) <= 420 * 128

    def test_deterministic_given_seed(self, toy_root, tmp_path):
        data.make_toy_dataset(3, tmp_path, seed=7)
        a = data.read_manifest(toy_root / "manifest.tsv")
        b = data.read_manifest(tmp_path / "manifest.tsv")
        for ra, rb in zip(a, b):
            xa = dsp.read_wav(ra.target_path)
            xb = dsp.read_wav(rb.target_path)
            np.testing.assert_array_equal(xa.samples, xb.samples)

    def test_inconsistent_condition_rejected(self, toy_root, tmp_path):
        records = data.read_manifest(toy_root / "manifest.tsv")
        bad = tmp_path / "bad.tsv"
        lines = open(records[0].condition_path).read().splitlines()
        bad.write_text("\n".join(lines[:-10]) + "\n")
        rec = UtteranceRecord(records[0].target_path, records[0].reference_path,
                              str(bad))
        with pytest.raises(DatasetError, match="inconsistent"):
            data.load_utterance(rec)

import json
import math

import numpy as np
import pytest
import torch

from waverefine import data, diffusion, evaluation
from waverefine.dsp import Waveform
from waverefine.evaluation import MetricError, MetricReport
from waverefine.network import DenoiserModel

from test_training import tiny_train_config, toy_capable_config


def tone(length=25600, freq=440.0, amp=0.5, sr=24000):
    n = np.arange(length)
    return Waveform(samples=amp * np.sin(2 * np.pi * freq / sr * n))


class TestSnr:
    def test_exact_equality_is_inf(self):
        x = tone()
        assert evaluation.snr(x, x) == math.inf

    def test_hand_value(self):
        # Error is half the reference amplitude everywhere:
        # 10 log10(1 / 0.25) = 6.0206 dB.
        ref = Waveform(samples=np.ones(1000))
        test = Waveform(samples=np.full(1000, 1.5))
        assert math.isclose(evaluation.snr(ref, test), 10 * math.log10(4),
                            rel_tol=1e-12)

    def test_zero_reference_rejected(self):
        with pytest.raises(MetricError, match="zero energy"):
            evaluation.snr(Waveform(samples=np.zeros(10) + 0.0),
                           Waveform(samples=np.ones(10)))

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            evaluation.snr(tone(1000), tone(2000))


class TestLsd:
    def test_identity_is_zero(self):
        x = tone()
        assert evaluation.log_spectral_distance(x, x) == 0.0

    def test_global_scale_hand_value(self):
        # Scaling by 2 shifts every log-mel bin by 20 log10 2 = 6.0206 dB,
        # so the RMS equals that constant (where above the floor).
        rng = np.random.default_rng(0)
        x = Waveform(samples=rng.standard_normal(25600) * 0.3)
        y = Waveform(samples=2 * x.samples)
        got = evaluation.log_spectral_distance(x, y)
        assert abs(got - 20 * math.log10(2)) < 0.1

    def test_symmetric_under_swap_sign(self):
        rng = np.random.default_rng(1)
        x = Waveform(samples=rng.standard_normal(25600) * 0.3)
        y = Waveform(samples=rng.standard_normal(25600) * 0.3)
        assert math.isclose(evaluation.log_spectral_distance(x, y),
                            evaluation.log_spectral_distance(y, x))


class TestF0:
    @pytest.mark.parametrize("freq", [110.0, 220.0, 329.63, 440.0, 880.0])
    def test_pure_tone(self, freq):
        x = tone(length=24000, freq=freq)
        est = evaluation.estimate_f0(x)
        voiced = est[est > 0]
        assert voiced.size > 0.9 * est.size
        np.testing.assert_allclose(voiced, freq, rtol=0.01)

    def test_harmonic_tone_no_octave_error(self):
        # Strong harmonics at 2f and 3f must not drag the estimate down an
        # octave: the smallest near-best lag wins.
        n = np.arange(24000)
        f = 220.0
        sig = sum(a * np.sin(2 * np.pi * h * f / 24000 * n)
                  for h, a in enumerate((1.0, 0.5, 0.25), start=1))
        est = evaluation.estimate_f0(Waveform(samples=0.25 * sig))
        voiced = est[est > 0]
        np.testing.assert_allclose(voiced, f, rtol=0.01)

    def test_silence_unvoiced(self):
        est = evaluation.estimate_f0(Waveform(samples=np.zeros(8192)))
        assert np.all(est == 0)

    def test_noise_mostly_unvoiced(self):
        rng = np.random.default_rng(2)
        est = evaluation.estimate_f0(Waveform(samples=rng.standard_normal(24000)))
        assert np.mean(est > 0) < 0.3


class TestStoi:
    def test_identity_near_one(self):
        rng = np.random.default_rng(3)
        target, _ = data.synthesize_utterance(400, rng)
        assert evaluation.stoi(target, target) > 0.99

    def test_noise_hurts_monotonically(self):
        rng = np.random.default_rng(4)
        target, _ = data.synthesize_utterance(400, rng)
        noise = np.random.default_rng(5).standard_normal(len(target))
        scores = []
        for sigma in (0.0, 0.05, 0.3, 1.0):
            noisy = Waveform(samples=target.samples + sigma * noise)
            scores.append(evaluation.stoi(target, noisy))
        assert all(a > b for a, b in zip(scores, scores[1:]))
        assert scores[-1] < 0.6

    def test_insensitive_to_global_gain(self):
        rng = np.random.default_rng(6)
        target, _ = data.synthesize_utterance(400, rng)
        scaled = Waveform(samples=0.5 * target.samples)
        assert evaluation.stoi(target, scaled) > 0.99

    def test_too_short_rejected(self):
        x = tone(length=1024)
        with pytest.raises(MetricError, match="384"):
            evaluation.stoi(x, x)


class TestMetricReport:
    def test_mean_and_ci(self):
        rep = MetricReport()
        for v in (1.0, 2.0, 3.0, 4.0):
            rep.add("snr", v)
        assert rep.mean("snr") == 2.5
        # Hand value: std(ddof=1) of 1..4 is sqrt(5/3).
        expected = 1.96 * math.sqrt(5.0 / 3.0) / 2.0
        assert math.isclose(rep.ci95("snr"), expected, rel_tol=1e-12)

    def test_single_value_no_ci(self):
        rep = MetricReport()
        rep.add("snr", 1.0)
        assert rep.ci95("snr") is None

    def test_text_and_json(self):
        rep = MetricReport()
        rep.add("snr", 10.0)
        rep.add("snr", 14.0)
        rep.extra["denoising_steps"] = 24
        text = rep.to_text()
        assert text.splitlines()[0] == "metric\tmean\tci95\tn"
        assert "snr\t12.000000" in text
        payload = json.loads(rep.to_json())
        assert payload["schema"] == "waverefine-metric-report-v1"
        assert payload["metrics"]["snr"]["mean"] == 12.0
        assert payload["extra"]["denoising_steps"] == 24

    def test_unknown_metric_rejected(self):
        with pytest.raises(MetricError, match="unknown metric"):
            evaluation.compute_metrics(tone(), tone(), ["nope"])


@pytest.fixture(scope="module")
def toy_eval_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("evaldata")
    data.make_toy_dataset(2, root, seed=1)
    torch.manual_seed(0)
    model = DenoiserModel(toy_capable_config())
    model.eval()
    return root, model


@pytest.mark.slow
class TestHarnesses:
    def test_evaluate_checkpoint_shapes(self, toy_eval_setup):
        root, model = toy_eval_setup
        rep = evaluation.evaluate_checkpoint(
            model, root, ("snr", "lsd"), diffusion.make_short_schedule(),
            seed=0, max_utterances=2)
        assert set(rep.values) == {"snr", "lsd"}
        assert len(rep.values["snr"]) == 2
        assert all(math.isfinite(v) for v in rep.values["lsd"])

    def test_step_ablation_reports(self, toy_eval_setup):
        root, model = toy_eval_setup
        reports = evaluation.step_ablation(model, root, [4, 8],
                                           metrics=("lsd",), seed=0,
                                           max_utterances=1)
        assert set(reports) == {4, 8}
        for n, rep in reports.items():
            assert rep.extra["denoising_steps"] == n
            assert len(rep.values["lsd"]) == 1

    def test_step_ablation_rejects_zero(self, toy_eval_setup):
        root, model = toy_eval_setup
        with pytest.raises(MetricError):
            evaluation.step_ablation(model, root, [0])

    def test_stride_ablation_validates_before_training(self, toy_eval_setup,
                                                       tmp_path):
        root, _ = toy_eval_setup
        cfg = tiny_train_config(total_steps=1, phase1_steps=1)
        # 16*16*8 = 2048 does not divide 25600: must fail before any training.
        with pytest.raises(MetricError, match="does not divide"):
            evaluation.stride_ablation([(8, 8, 4), (16, 16, 8)], root, cfg,
                                       tmp_path)

    def test_stride_ablation_trains_and_reports(self, toy_eval_setup, tmp_path):
        root, _ = toy_eval_setup
        cfg = tiny_train_config(total_steps=1, phase1_steps=1)
        reports = evaluation.stride_ablation(
            [(16, 16)], root, cfg, tmp_path, metrics=("lsd",), eval_steps=4,
            max_utterances=1)
        rep = reports[(16, 16)]
        assert rep.extra["strides"] == [16, 16]
        assert rep.extra["parameter_count"] > 0
        assert len(rep.values["lsd"]) == 1

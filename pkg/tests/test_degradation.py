import numpy as np
import pytest

from waverefine import dsp
from waverefine.dsp import DegradationSpec, Waveform


def tone(length=25600, freq=440.0, amp=0.5):
    n = np.arange(length)
    return Waveform(samples=amp * np.sin(2 * np.pi * freq / 24000 * n))


class TestSelectRegions:
    @pytest.mark.parametrize("seed", range(10))
    def test_regions_in_bounds(self, seed):
        rng = np.random.default_rng(seed)
        regions = dsp.select_regions(51200, rng)
        assert 3 <= len(regions) <= 10
        for start, rlen in regions:
            assert 0 <= start
            assert start + rlen <= 51200

    def test_lengths_in_range(self):
        rng = np.random.default_rng(42)
        lengths = [rlen for _ in range(50)
                   for _, rlen in dsp.select_regions(51200, rng)]
        assert min(lengths) >= 500
        assert max(lengths) <= 2000

    def test_short_signal_clamps(self):
        rng = np.random.default_rng(0)
        for start, rlen in dsp.select_regions(800, rng):
            assert start + rlen <= 800


class TestNoise:
    def test_variance_matches_alpha(self):
        # On a zero signal the degraded region is alpha * N(0, 1) draws.
        for seed in range(10):
            rng = np.random.default_rng(seed)
            out = dsp.degrade_add_noise(
                Waveform(samples=np.zeros(2000)), [(0, 2000)], alpha=1.0, rng=rng)
            assert 0.85 <= np.var(out.samples) <= 1.15

    def test_outside_regions_untouched(self):
        x = tone()
        rng = np.random.default_rng(1)
        out = dsp.degrade_add_noise(x, [(1000, 1000)], alpha=0.9, rng=rng)
        np.testing.assert_array_equal(out.samples[:1000], x.samples[:1000])
        np.testing.assert_array_equal(out.samples[2000:], x.samples[2000:])
        assert not np.array_equal(out.samples[1000:2000], x.samples[1000:2000])


class TestAmplitude:
    def test_direct_scale(self):
        x = tone()
        out = dsp.degrade_amplitude(x, [(0, 1000)], beta=0.8)
        np.testing.assert_allclose(out.samples[:1000], 0.8 * x.samples[:1000])
        np.testing.assert_array_equal(out.samples[1000:], x.samples[1000:])


class TestDistortion:
    def test_hand_value(self):
        # sign(-0.5) * 0.5^1.2 = -0.435275...
        x = Waveform(samples=np.full(2048, -0.5))
        out = dsp.degrade_distort(x, [(0, 2048)], gamma=1.2)
        np.testing.assert_allclose(out.samples, -(0.5 ** 1.2), rtol=1e-12)
        assert abs(out.samples[0] + 0.43527528) < 1e-7

    def test_gamma_one_identity(self):
        x = tone()
        out = dsp.degrade_distort(x, [(0, len(x))], gamma=1.0)
        np.testing.assert_allclose(out.samples, x.samples, atol=1e-12)

    def test_sign_preserved(self):
        x = tone()
        out = dsp.degrade_distort(x, [(0, len(x))], gamma=0.9)
        assert np.all(np.sign(out.samples) == np.sign(x.samples))


class TestFrequency:
    def test_unit_scale_is_round_trip(self):
        x = tone()
        scales = {f: 1.0 for f in range(257)}
        out = dsp.degrade_frequency(x, [(0, len(x))], scales)
        ref = dsp.istft(dsp.stft(x), len(x))
        np.testing.assert_allclose(out.samples, ref.samples, atol=1e-10)
        assert len(out) == len(x)

    def test_band_attenuation_scales_energy(self):
        # Scaling every band by 0.8 over the whole signal should multiply
        # energy by about 0.64.
        x = tone(freq=937.5)
        scales = {f: 0.8 for f in range(257)}
        out = dsp.degrade_frequency(x, [(0, len(x))], scales)
        base = dsp.istft(dsp.stft(x), len(x))
        ratio = np.sum(out.samples ** 2) / np.sum(base.samples ** 2)
        assert abs(ratio - 0.64) < 0.64 * 0.05

    def test_outside_region_near_identity(self):
        x = tone()
        scales = {f: 0.0 for f in range(257)}
        out = dsp.degrade_frequency(x, [(0, 4096)], scales)
        # Frames centered well past the region are untouched by scaling.
        tail = slice(8192, len(x))
        ref = dsp.istft(dsp.stft(x), len(x))
        np.testing.assert_allclose(out.samples[tail], ref.samples[tail], atol=1e-10)


class TestSpecReplay:
    def test_replay_is_bit_identical(self):
        x = tone(51200)
        rng = np.random.default_rng(11)
        out1, spec = dsp.degrade(x, rng)
        out2 = dsp.apply_degradation(x, spec)
        np.testing.assert_array_equal(out1.samples, out2.samples)

    def test_text_round_trip(self):
        x = tone(51200)
        out1, spec = dsp.degrade(x, np.random.default_rng(12))
        restored = DegradationSpec.from_text(spec.to_text())
        out2 = dsp.apply_degradation(x, restored)
        np.testing.assert_array_equal(out1.samples, out2.samples)

    def test_truncated_text_rejected(self):
        _, spec = dsp.degrade(tone(51200), np.random.default_rng(13))
        with pytest.raises((dsp.DspError, KeyError, ValueError)):
            DegradationSpec.from_text(spec.to_text()[:40])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_sampled_parameters_in_range(self, seed):
        rng = np.random.default_rng(seed)
        methods_seen = set()
        for _ in range(300):
            spec = dsp.sample_degradation_spec(51200, rng)
            assert len(spec.methods) >= 1
            methods_seen.update(spec.methods)
            assert 0.8 <= spec.alpha <= 1.05
            assert 0.8 <= spec.beta <= 1.05
            assert 0.9 <= spec.gamma <= 1.2
            assert 1 <= len(spec.band_scales) <= 32
            for f, sc in spec.band_scales.items():
                assert 0 <= f <= 256
                assert 0.8 <= sc <= 1.1
        assert methods_seen == {"noise", "amplitude", "distortion", "frequency"}

    def test_order_is_fixed(self):
        rng = np.random.default_rng(3)
        order = list(dsp.DEGRADATION_METHODS)
        for _ in range(50):
            spec = dsp.sample_degradation_spec(51200, rng)
            canonical = [m for m in order if m in spec.methods]
            assert list(spec.methods) == canonical

    def test_output_length_preserved(self):
        for L in (25600, 25856, 51200):
            x = tone(L)
            out, _ = dsp.degrade(x, np.random.default_rng(L))
            assert len(out) == L
            assert np.all(np.isfinite(out.samples))

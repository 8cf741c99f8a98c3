import numpy as np
import pytest

from waverefine import dsp
from waverefine.dsp import Spectrogram, Waveform


def rand_wave(length, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    return Waveform(samples=rng.standard_normal(length) * scale)


def snr_db(ref, test):
    return 10 * np.log10(np.sum(ref ** 2) / np.sum((ref - test) ** 2))


class TestWaveform:
    def test_rejects_nan(self):
        with pytest.raises(dsp.DspError):
            Waveform(samples=np.array([0.0, np.nan]))

    def test_rejects_empty(self):
        with pytest.raises(dsp.DspError):
            Waveform(samples=np.array([]))

    def test_rejects_bad_rate(self):
        with pytest.raises(dsp.DspError):
            Waveform(samples=np.zeros(4), sample_rate=0)


class TestStft:
    def test_zero_input_zero_output(self):
        s = dsp.stft(Waveform(samples=np.zeros(2048)))
        assert np.all(s.bins == 0)

    def test_pure_tone_hits_bin_20(self):
        # 937.5 Hz = 20 * 24000 / 512: exactly bin 20 of a 512-point frame.
        n = np.arange(25600)
        x = Waveform(samples=np.sin(2 * np.pi * 937.5 / 24000 * n))
        s = dsp.stft(x)
        mags = np.abs(s.bins)
        interior = mags[:, 5:-5]
        assert np.all(interior.argmax(axis=0) == 20)

    def test_frame_count_51200(self):
        s = dsp.stft(Waveform(samples=np.ones(51200)))
        assert s.bins.shape == (257, 401)

    def test_too_short_rejected(self):
        with pytest.raises(dsp.DspError, match="frame"):
            dsp.stft(Waveform(samples=np.zeros(100)))


class TestIstft:
    def test_round_trip_snr(self):
        x = rand_wave(25600, seed=1)
        y = dsp.istft(dsp.stft(x), len(x))
        assert snr_db(x.samples, y.samples) > 60

    def test_zero_spectrogram(self):
        s = dsp.stft(Waveform(samples=np.zeros(4096) + 1e-12))
        zero = Spectrogram(bins=np.zeros_like(s.bins))
        y = dsp.istft(zero, 4096)
        assert np.all(y.samples == 0)

    def test_exact_length(self):
        for L in (25600, 25600 + 128, 30000):
            x = rand_wave(L, seed=L)
            y = dsp.istft(dsp.stft(x), L)
            assert len(y) == L

    def test_inconsistent_parameters_rejected(self):
        s = dsp.stft(rand_wave(4096))
        s.hop = 64
        with pytest.raises(dsp.DspError, match="parameters"):
            dsp.istft(s, 4096)


class TestMel:
    def test_zero_input(self):
        m = dsp.mel_spectrogram(Waveform(samples=np.zeros(4096)))
        assert np.all(m.magnitudes == 0)

    def test_white_noise_all_bands_positive(self):
        x = rand_wave(51200, seed=7, scale=0.5)  # 401 frames
        m = dsp.mel_spectrogram(x)
        assert m.magnitudes.shape[1] >= 100
        assert np.all(m.magnitudes > 0)

    def test_homogeneity(self):
        x = rand_wave(8192, seed=3)
        m1 = dsp.mel_spectrogram(x)
        m2 = dsp.mel_spectrogram(Waveform(samples=2 * x.samples))
        np.testing.assert_allclose(m2.magnitudes, 2 * m1.magnitudes, rtol=1e-10)

    def test_filterbank_shape(self):
        fb = dsp.mel_filterbank()
        assert fb.shape == (80, 257)
        assert np.all(fb >= 0)


class TestWavIO:
    def test_float32_round_trip(self, tmp_path):
        x = rand_wave(4096, seed=5)
        path = tmp_path / "a.wav"
        dsp.write_wav(path, x)
        y = dsp.read_wav(path)
        assert y.sample_rate == 24000
        np.testing.assert_allclose(y.samples, x.samples, atol=1e-7)

    def test_pcm16_round_trip(self, tmp_path):
        x = Waveform(samples=np.clip(rand_wave(4096, seed=6).samples, -0.9, 0.9))
        path = tmp_path / "b.wav"
        dsp.write_wav(path, x, encoding="pcm16")
        y = dsp.read_wav(path)
        np.testing.assert_allclose(y.samples, x.samples, atol=1e-4)

    def test_stereo_rejected(self, tmp_path):
        import scipy.io.wavfile

        path = tmp_path / "stereo.wav"
        scipy.io.wavfile.write(path, 24000, np.zeros((100, 2), dtype=np.float32))
        with pytest.raises(dsp.DspError, match="mono"):
            dsp.read_wav(path)

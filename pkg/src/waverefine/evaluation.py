"""Objective metrics (SNR, log-spectral distance, STOI, F0) and the
step-count / stride ablation harnesses.

STOI follows the standard short-time objective intelligibility algorithm:
polyphase resampling to 10 kHz, silent-frame removal, 1/3-octave band
decomposition, and clipped correlations over 384 ms segments.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.signal
import torch

from . import diffusion, dsp
from .data import load_utterance, read_manifest
from .dsp import Waveform
from .network import DenoiserModel, ModelConfig

STOI_FS = 10000
STOI_FRAME = 256
STOI_HOP = 128
STOI_NFFT = 512
STOI_N_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEG_FRAMES = 30          # 30 frames * 128 hop / 10 kHz = 384 ms
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    """Per-utterance metric values with mean and 95% confidence interval."""

    values: dict = field(default_factory=dict)   # metric -> list of floats
    extra: dict = field(default_factory=dict)    # free-form scalars (param counts etc.)

    def add(self, metric: str, value: float):
        self.values.setdefault(metric, []).append(float(value))

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values[metric]))

    def ci95(self, metric: str):
        vals = self.values[metric]
        if len(vals) < 2:
            return None
        stderr = np.std(vals, ddof=1) / math.sqrt(len(vals))
        return 1.96 * float(stderr)

    def to_rows(self):
        rows = []
        for metric in sorted(self.values):
            ci = self.ci95(metric)
            rows.append((metric, self.mean(metric),
                         ci if ci is not None else float("nan"),
                         len(self.values[metric])))
        return rows

    def to_text(self) -> str:
        lines = ["metric\tmean\tci95\tn"]
        for metric, mean, ci, n in self.to_rows():
            lines.append(f"{metric}\t{mean:.6f}\t{ci:.6f}\t{n}")
        for key in sorted(self.extra):
            lines.append(f"# {key}\t{self.extra[key]}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {
            "schema": "waverefine-metric-report-v1",
            "metrics": {m: {"values": v, "mean": self.mean(m), "ci95": self.ci95(m)}
                        for m, v in self.values.items()},
            "extra": self.extra,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def snr(reference: Waveform, test: Waveform) -> float:
    """10 log10(||ref||^2 / ||ref - test||^2); +inf on exact equality."""
    if len(reference) != len(test):
        raise MetricError(f"length mismatch {len(reference)} vs {len(test)}")
    ref = reference.samples
    num = float(np.sum(ref ** 2))
    if num == 0.0:
        raise MetricError("reference signal has zero energy")
    den = float(np.sum((ref - test.samples) ** 2))
    if den == 0.0:
        return math.inf
    return 10.0 * math.log10(num / den)


def log_spectral_distance(x: Waveform, y: Waveform) -> float:
    """RMS difference of log-mel magnitudes in dB (floor 1e-5)."""
    if len(x) != len(y):
        raise MetricError(f"length mismatch {len(x)} vs {len(y)}")
    mx = np.maximum(dsp.mel_spectrogram(x).magnitudes, 1e-5)
    my = np.maximum(dsp.mel_spectrogram(y).magnitudes, 1e-5)
    diff = 20.0 * (np.log10(mx) - np.log10(my))
    return float(np.sqrt(np.mean(diff ** 2)))


def estimate_f0(x: Waveform, frame: int = 1024, hop: int = 256,
                fmin: float = 80.0, fmax: float = 1000.0,
                threshold: float = 0.3) -> np.ndarray:
    """Per-frame autocorrelation F0 estimate; 0 marks unvoiced frames.

    Among autocorrelation peaks within 5% of the strongest, the smallest lag
    wins, which keeps pure tones from locking an octave down.
    """
    sr = x.sample_rate
    lag_min = max(2, int(sr / fmax))
    lag_max = int(sr / fmin)
    if frame < 2 * lag_max:
        raise MetricError(f"frame {frame} shorter than two periods of {fmin} Hz ({2 * lag_max})")
    sig = x.samples
    n_frames = max(0, 1 + (sig.size - frame) // hop)
    out = np.zeros(n_frames)
    for m in range(n_frames):
        seg = sig[m * hop:m * hop + frame]
        seg = seg - seg.mean()
        r0 = float(np.dot(seg, seg))
        if r0 < 1e-10:
            continue
        # Autocorrelation via FFT.
        nfft = 1
        while nfft < 2 * frame:
            nfft *= 2
        spec = np.fft.rfft(seg, nfft)
        ac = np.fft.irfft(spec * np.conj(spec))[:lag_max + 2] / r0
        band = ac[lag_min:lag_max + 1]
        # Local maxima inside the search band.
        peaks = np.flatnonzero((band[1:-1] >= band[:-2]) & (band[1:-1] >= band[2:])) + 1
        if peaks.size == 0:
            continue
        best = float(band[peaks].max())
        if best < threshold:
            continue
        lag_idx = peaks[band[peaks] >= 0.95 * best][0]
        lag = lag_idx + lag_min
        # Parabolic interpolation around the integer lag.
        ym, y0, yp = ac[lag - 1], ac[lag], ac[lag + 1]
        denom = ym - 2 * y0 + yp
        shift = 0.5 * (ym - yp) / denom if abs(denom) > 1e-12 else 0.0
        out[m] = sr / (lag + shift)
    return out


def _third_octave_bands(nfft: int = STOI_NFFT, fs: int = STOI_FS,
                        n_bands: int = STOI_N_BANDS,
                        min_freq: float = STOI_MIN_FREQ) -> np.ndarray:
    freqs = np.arange(nfft // 2 + 1) * fs / nfft
    obm = np.zeros((n_bands, freqs.size))
    for j in range(n_bands):
        cf = min_freq * 2.0 ** (j / 3.0)
        lo = cf / 2.0 ** (1.0 / 6.0)
        hi = cf * 2.0 ** (1.0 / 6.0)
        obm[j] = (freqs >= lo) & (freqs < hi)
    return obm


def _stoi_frames(sig: np.ndarray) -> np.ndarray:
    n = 1 + (sig.size - STOI_FRAME) // STOI_HOP
    idx = np.arange(STOI_FRAME)[None, :] + STOI_HOP * np.arange(n)[:, None]
    return sig[idx] * dsp.hann_window(STOI_FRAME)


def stoi(clean: Waveform, processed: Waveform) -> float:
    """Short-time objective intelligibility of ``processed`` given ``clean``."""
    if len(clean) != len(processed):
        raise MetricError(f"length mismatch {len(clean)} vs {len(processed)}")
    x = scipy.signal.resample_poly(clean.samples, STOI_FS, clean.sample_rate)
    y = scipy.signal.resample_poly(processed.samples, STOI_FS, processed.sample_rate)

    min_len = STOI_FRAME + STOI_HOP * (STOI_SEG_FRAMES - 1)
    if x.size < min_len:
        raise MetricError(
            f"need at least {min_len} samples at {STOI_FS} Hz (384 ms), got {x.size}")

    # Remove frames more than 40 dB below the loudest clean frame.
    xf = _stoi_frames(x)
    yf = _stoi_frames(y)
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + 1e-12)
    mask = energy > energy.max() - STOI_DYN_RANGE_DB
    xf, yf = xf[mask], yf[mask]
    if xf.shape[0] < STOI_SEG_FRAMES:
        raise MetricError(
            f"only {xf.shape[0]} frames above the silence threshold; "
            f"need {STOI_SEG_FRAMES} (384 ms of voiced content)")

    obm = _third_octave_bands()
    X = np.sqrt(np.maximum((np.abs(np.fft.rfft(xf, STOI_NFFT, axis=1)) ** 2) @ obm.T, 1e-20)).T
    Y = np.sqrt(np.maximum((np.abs(np.fft.rfft(yf, STOI_NFFT, axis=1)) ** 2) @ obm.T, 1e-20)).T

    N = STOI_SEG_FRAMES
    clip = 10.0 ** (-STOI_BETA_DB / 20.0)
    corrs = []
    for m in range(N, X.shape[1] + 1):
        xs = X[:, m - N:m]
        ys = Y[:, m - N:m]
        alpha = np.linalg.norm(xs, axis=1, keepdims=True) / (
            np.linalg.norm(ys, axis=1, keepdims=True) + 1e-20)
        ys = np.minimum(ys * alpha, xs * (1.0 + clip))
        xs = xs - xs.mean(axis=1, keepdims=True)
        ys = ys - ys.mean(axis=1, keepdims=True)
        num = np.sum(xs * ys, axis=1)
        den = np.linalg.norm(xs, axis=1) * np.linalg.norm(ys, axis=1) + 1e-20
        corrs.append(num / den)
    return float(np.mean(corrs))


SUPPORTED_METRICS = ("snr", "lsd", "stoi")


def compute_metrics(clean: Waveform, processed: Waveform, metrics) -> dict:
    out = {}
    for m in metrics:
        if m == "snr":
            out[m] = snr(clean, processed)
        elif m == "lsd":
            out[m] = log_spectral_distance(clean, processed)
        elif m == "stoi":
            out[m] = stoi(clean, processed)
        else:
            raise MetricError(f"unknown metric {m!r}; supported: {', '.join(SUPPORTED_METRICS)}")
    return out


def _schedule_for_steps(steps: int):
    return diffusion.schedule_for_steps(steps)


def _eval_length(length: int, stride_product: int) -> int:
    grid = 256 * stride_product // math.gcd(256, stride_product)
    return (length // grid) * grid


def evaluate_checkpoint(model: DenoiserModel, dataset_dir, metrics,
                        schedule, seed: int = 0,
                        max_utterances: int | None = None) -> MetricReport:
    """Sample every held-out utterance under one schedule and score it."""
    records = read_manifest(os.path.join(dataset_dir, "manifest.tsv"))
    if max_utterances is not None:
        records = records[:max_utterances]
    report = MetricReport()
    rng = np.random.default_rng(seed)
    for rec in records:
        target, reference, cond = load_utterance(rec)
        L = _eval_length(len(target), model.config.stride_product)
        t = Waveform(samples=target.samples[:L])
        r = torch.from_numpy(reference.samples[:L]).float()
        c = cond.crop(0, L // dsp.HOP)
        out = diffusion.sample(model, c, r, schedule, rng)
        synth = Waveform(samples=out.numpy().astype(np.float64))
        for name, val in compute_metrics(t, synth, metrics).items():
            report.add(name, val)
    return report


def step_ablation(model: DenoiserModel, dataset_dir, steps,
                  metrics=SUPPORTED_METRICS, seed: int = 0,
                  max_utterances: int | None = None) -> dict:
    """Metric report per denoising-step count (same held-out set, same seed)."""
    reports = {}
    for n in steps:
        if n < 1:
            raise MetricError(f"step count must be >= 1, got {n}")
        schedule = _schedule_for_steps(n)
        rep = evaluate_checkpoint(model, dataset_dir, metrics, schedule,
                                  seed=seed, max_utterances=max_utterances)
        rep.extra["denoising_steps"] = n
        reports[n] = rep
    return reports


def stride_ablation(stride_sets, dataset_dir, train_config, out_dir,
                    metrics=SUPPORTED_METRICS, eval_steps: int = 24,
                    max_utterances: int | None = None) -> dict:
    """Train one model per stride set with identical budgets and compare.

    Validates every stride set against the crop grid before any training
    starts.
    """
    from . import training as training_mod

    configs = []
    for strides in stride_sets:
        channels = tuple(min(32 * 2 ** i, 128) for i in range(len(strides)))
        cfg = ModelConfig(strides=tuple(strides), channels=channels)
        if train_config.crop_min % cfg.stride_product or \
                train_config.crop_max % cfg.stride_product:
            raise MetricError(
                f"stride product {cfg.stride_product} does not divide the crop grid "
                f"[{train_config.crop_min}, {train_config.crop_max}]")
        configs.append(cfg)

    reports = {}
    for cfg in configs:
        torch.manual_seed(train_config.seed)
        model = DenoiserModel(cfg)
        run_dir = os.path.join(out_dir, "strides_" + "x".join(map(str, cfg.strides)))
        training_mod.train(model, train_config, dataset_dir, run_dir)
        rep = evaluate_checkpoint(model, dataset_dir, metrics,
                                  _schedule_for_steps(eval_steps),
                                  seed=train_config.seed,
                                  max_utterances=max_utterances)
        rep.extra["strides"] = list(cfg.strides)
        rep.extra["parameter_count"] = model.count_parameters()
        reports[tuple(cfg.strides)] = rep
    return reports

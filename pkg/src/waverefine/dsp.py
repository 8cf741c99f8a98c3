"""Signal processing: STFT/ISTFT, mel analysis, degradation pipeline, WAV I/O.

All analysis uses hop 128 / frame 512 / periodic Hann at 24 kHz unless
stated otherwise. Degradation operates on selected time regions and is fully
replayable from a :class:`DegradationSpec`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.io.wavfile

log = logging.getLogger(__name__)

SAMPLE_RATE = 24000
HOP = 128
FRAME = 512
N_MELS = 80
MEL_FMIN = 0.0
MEL_FMAX = 12000.0

DEGRADATION_METHODS = ("noise", "amplitude", "distortion", "frequency")

# Parameter ranges of the degradation methods (closed intervals).
ALPHA_RANGE = (0.8, 1.05)
BETA_RANGE = (0.8, 1.05)
GAMMA_RANGE = (0.9, 1.2)
BAND_SCALE_RANGE = (0.8, 1.1)
REGION_COUNT_RANGE = (3, 10)
REGION_LENGTH_RANGE = (500, 2000)
MAX_BANDS = 32


class DspError(ValueError):
    pass


@dataclass
class Waveform:
    """Mono audio samples with nominal amplitude range [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise DspError(f"waveform must be 1-D and non-empty, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise DspError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise DspError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.size


@dataclass
class Spectrogram:
    """Complex STFT bins [F, T] with the analysis parameters that produced them."""

    bins: np.ndarray
    hop: int = HOP
    frame: int = FRAME

    def __post_init__(self):
        self.bins = np.asarray(self.bins)
        if self.bins.ndim != 2:
            raise DspError(f"spectrogram must be 2-D, got shape {self.bins.shape}")
        if self.bins.shape[0] != self.frame // 2 + 1:
            raise DspError(
                f"bin count {self.bins.shape[0]} inconsistent with frame {self.frame} "
                f"(expected {self.frame // 2 + 1})"
            )


@dataclass
class MelSpectrogram:
    """Non-negative mel magnitudes [n_mels, T]."""

    magnitudes: np.ndarray
    n_mels: int = N_MELS
    fmin: float = MEL_FMIN
    fmax: float = MEL_FMAX

    def __post_init__(self):
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64)
        if self.magnitudes.ndim != 2 or self.magnitudes.shape[0] != self.n_mels:
            raise DspError(f"mel magnitudes must be [{self.n_mels}, T], got {self.magnitudes.shape}")
        if np.any(self.magnitudes < 0):
            raise DspError("mel magnitudes must be non-negative")


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(x: Waveform, hop: int = HOP, frame: int = FRAME) -> Spectrogram:
    """Centered STFT (reflection padding of frame/2 at each end)."""
    sig = x.samples
    if sig.size < frame:
        raise DspError(f"signal length {sig.size} shorter than one frame ({frame})")
    pad = frame // 2
    sig = np.pad(sig, pad, mode="reflect")
    n_frames = 1 + (sig.size - frame) // hop
    win = hann_window(frame)
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = sig[idx] * win
    bins = np.fft.rfft(frames, axis=1).T
    return Spectrogram(bins=bins, hop=hop, frame=frame)


def istft(s: Spectrogram, target_length: int) -> Waveform:
    """Overlap-add inverse STFT with squared-window-sum normalization."""
    if s.hop != HOP or s.frame != FRAME:
        raise DspError(f"inconsistent analysis parameters hop={s.hop} frame={s.frame} "
                       f"(expected hop={HOP} frame={FRAME})")
    hop, frame = s.hop, s.frame
    win = hann_window(frame)
    frames = np.fft.irfft(s.bins.T, n=frame, axis=1) * win
    n_frames = frames.shape[0]
    total = frame + hop * (n_frames - 1)
    out = np.zeros(total)
    wsum = np.zeros(total)
    for i in range(n_frames):
        out[i * hop:i * hop + frame] += frames[i]
        wsum[i * hop:i * hop + frame] += win ** 2
    out = out / np.maximum(wsum, 1e-12)
    pad = frame // 2
    out = out[pad:]
    if out.size >= target_length:
        out = out[:target_length]
    else:
        out = np.pad(out, (0, target_length - out.size))
    return Waveform(samples=out, sample_rate=SAMPLE_RATE)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, frame: int = FRAME,
                   sample_rate: int = SAMPLE_RATE,
                   fmin: float = MEL_FMIN, fmax: float = MEL_FMAX) -> np.ndarray:
    """Triangular mel filterbank [n_mels, frame/2+1]."""
    n_bins = frame // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, ctr, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-9)
        down = (hi - freqs) / max(hi - ctr, 1e-9)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_spectrogram(x: Waveform) -> MelSpectrogram:
    """Magnitude STFT mapped through the 80-band triangular filterbank."""
    s = stft(x)
    mag = np.abs(s.bins)
    fb = mel_filterbank()
    return MelSpectrogram(magnitudes=fb @ mag)


# ---------------------------------------------------------------------------
# Degradation pipeline
# ---------------------------------------------------------------------------

@dataclass
class DegradationSpec:
    """Everything needed to replay one degradation pass bit-exactly.

    Regions are (start, length) in samples.  ``band_scales`` maps frequency
    bin index -> scale factor for the frequency method.  ``noise_seed``
    seeds the Gaussian draw of the noise method.
    """

    regions: list = field(default_factory=list)
    methods: tuple = ()
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    band_scales: dict = field(default_factory=dict)
    noise_seed: int = 0

    def validate(self, signal_length: int | None = None):
        if not (REGION_COUNT_RANGE[0] <= len(self.regions) <= REGION_COUNT_RANGE[1]):
            raise DspError(f"region count {len(self.regions)} outside "
                           f"[{REGION_COUNT_RANGE[0]}, {REGION_COUNT_RANGE[1]}]")
        for start, length in self.regions:
            if start < 0:
                raise DspError(f"region start {start} negative")
            if signal_length is not None and start + length > signal_length:
                raise DspError(f"region ({start}, {length}) exceeds signal length {signal_length}")
        for m in self.methods:
            if m not in DEGRADATION_METHODS:
                raise DspError(f"unknown degradation method {m!r}")
        if not (ALPHA_RANGE[0] <= self.alpha <= ALPHA_RANGE[1]):
            raise DspError(f"alpha {self.alpha} outside {ALPHA_RANGE}")
        if not (BETA_RANGE[0] <= self.beta <= BETA_RANGE[1]):
            raise DspError(f"beta {self.beta} outside {BETA_RANGE}")
        if not (GAMMA_RANGE[0] <= self.gamma <= GAMMA_RANGE[1]):
            raise DspError(f"gamma {self.gamma} outside {GAMMA_RANGE}")
        for f, sc in self.band_scales.items():
            if not (0 <= f <= FRAME // 2):
                raise DspError(f"band index {f} out of range")
            if not (BAND_SCALE_RANGE[0] <= sc <= BAND_SCALE_RANGE[1]):
                raise DspError(f"band scale {sc} outside {BAND_SCALE_RANGE}")

    def to_text(self) -> str:
        lines = ["degradation_spec_version = 1"]
        lines.append("regions = " + ";".join(f"{s},{l}" for s, l in self.regions))
        lines.append("methods = " + ",".join(self.methods))
        lines.append(f"alpha = {self.alpha!r}")
        lines.append(f"beta = {self.beta!r}")
        lines.append(f"gamma = {self.gamma!r}")
        lines.append("band_scales = " + ";".join(f"{f},{sc!r}" for f, sc in sorted(self.band_scales.items())))
        lines.append(f"noise_seed = {self.noise_seed}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DegradationSpec":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        if kv.get("degradation_spec_version") != "1":
            raise DspError("unsupported degradation spec version "
                           f"{kv.get('degradation_spec_version')!r}")
        regions = []
        if kv.get("regions"):
            for item in kv["regions"].split(";"):
                s, l = item.split(",")
                regions.append((int(s), int(l)))
        band_scales = {}
        if kv.get("band_scales"):
            for item in kv["band_scales"].split(";"):
                f, sc = item.split(",")
                band_scales[int(f)] = float(sc)
        methods = tuple(m for m in kv.get("methods", "").split(",") if m)
        return cls(regions=regions, methods=methods,
                   alpha=float(kv["alpha"]), beta=float(kv["beta"]),
                   gamma=float(kv["gamma"]), band_scales=band_scales,
                   noise_seed=int(kv["noise_seed"]))


def select_regions(length: int, rng: np.random.Generator) -> list:
    """Sample degradation regions: count uniform on {3..10}, lengths on [500, 2000].

    Signals shorter than 2000 samples get region lengths clamped to length/2
    (with a recorded warning); training crops never trigger this.
    """
    lo, hi = REGION_LENGTH_RANGE
    if length < hi:
        clamped = max(1, length // 2)
        log.warning("signal length %d < %d: clamping region lengths to %d",
                    length, hi, clamped)
        lo, hi = min(lo, clamped), clamped
    count = int(rng.integers(REGION_COUNT_RANGE[0], REGION_COUNT_RANGE[1] + 1))
    regions = []
    for _ in range(count):
        rlen = int(rng.integers(lo, hi + 1))
        rlen = min(rlen, length)
        start = int(rng.integers(0, length - rlen + 1))
        regions.append((start, rlen))
    return regions


def _region_mask(length: int, regions) -> np.ndarray:
    mask = np.zeros(length, dtype=bool)
    for start, rlen in regions:
        mask[start:start + rlen] = True
    return mask


def degrade_add_noise(x: Waveform, regions, alpha: float,
                      rng: np.random.Generator) -> Waveform:
    """Add alpha-scaled unit-variance Gaussian noise inside the regions."""
    if alpha < 0:
        raise DspError(f"alpha must be >= 0, got {alpha}")
    out = x.samples.copy()
    for start, rlen in regions:
        out[start:start + rlen] += alpha * rng.standard_normal(rlen)
    return Waveform(samples=out, sample_rate=x.sample_rate)


def degrade_amplitude(x: Waveform, regions, beta: float) -> Waveform:
    """Scale in-region samples by beta; leave the rest untouched."""
    if beta <= 0:
        raise DspError(f"beta must be > 0, got {beta}")
    out = x.samples.copy()
    for start, rlen in regions:
        out[start:start + rlen] *= beta
    return Waveform(samples=out, sample_rate=x.sample_rate)


def degrade_distort(x: Waveform, regions, gamma: float) -> Waveform:
    """Apply the signed power law sign(x) * |x|^gamma inside the regions."""
    if gamma <= 0:
        raise DspError(f"gamma must be > 0, got {gamma}")
    out = x.samples.copy()
    for start, rlen in regions:
        seg = out[start:start + rlen]
        out[start:start + rlen] = np.sign(seg) * np.abs(seg) ** gamma
    return Waveform(samples=out, sample_rate=x.sample_rate)


def degrade_frequency(x: Waveform, regions, band_scales: dict) -> Waveform:
    """Scale selected STFT bands inside frame-aligned regions, then ISTFT.

    Region boundaries are rounded outward to hop multiples so the inverse
    transform reproduces the original length exactly.  The whole signal is
    passed through the STFT/ISTFT round trip, so out-of-region samples carry
    only round-trip numerical error.
    """
    s = stft(x)
    n_frames = s.bins.shape[1]
    frame_mask = np.zeros(n_frames, dtype=bool)
    for start, rlen in regions:
        if rlen < FRAME:
            log.warning("frequency method: region (%d, %d) shorter than one frame, skipped",
                        start, rlen)
            continue
        lo = (start // HOP) * HOP
        hi = -(-(start + rlen) // HOP) * HOP
        # Frame centers sit at multiples of HOP in original coordinates.
        f_lo = lo // HOP
        f_hi = min(hi // HOP, n_frames - 1)
        frame_mask[f_lo:f_hi + 1] = True
    bins = s.bins.copy()
    if frame_mask.any():
        for f, scale in band_scales.items():
            bins[f, frame_mask] *= scale
    return istft(Spectrogram(bins=bins, hop=s.hop, frame=s.frame), len(x))


def sample_degradation_spec(length: int, rng: np.random.Generator) -> DegradationSpec:
    """Draw regions, a non-empty method subset, and all method parameters."""
    regions = select_regions(length, rng)
    # Uniform over the 15 non-empty subsets of the four methods.
    subset = int(rng.integers(1, 2 ** len(DEGRADATION_METHODS)))
    methods = tuple(m for i, m in enumerate(DEGRADATION_METHODS) if subset >> i & 1)
    n_bands = int(rng.integers(1, MAX_BANDS + 1))
    band_idx = rng.choice(FRAME // 2 + 1, size=n_bands, replace=False)
    band_scales = {int(f): float(rng.uniform(*BAND_SCALE_RANGE)) for f in sorted(band_idx)}
    return DegradationSpec(
        regions=regions,
        methods=methods,
        alpha=float(rng.uniform(*ALPHA_RANGE)),
        beta=float(rng.uniform(*BETA_RANGE)),
        gamma=float(rng.uniform(*GAMMA_RANGE)),
        band_scales=band_scales,
        noise_seed=int(rng.integers(0, 2 ** 63)),
    )


def apply_degradation(x: Waveform, spec: DegradationSpec) -> Waveform:
    """Replay a degradation spec (fixed order: noise, amplitude, distortion, frequency)."""
    spec.validate(len(x))
    out = x
    if "noise" in spec.methods:
        noise_rng = np.random.Generator(np.random.PCG64(spec.noise_seed))
        out = degrade_add_noise(out, spec.regions, spec.alpha, noise_rng)
    if "amplitude" in spec.methods:
        out = degrade_amplitude(out, spec.regions, spec.beta)
    if "distortion" in spec.methods:
        out = degrade_distort(out, spec.regions, spec.gamma)
    if "frequency" in spec.methods:
        out = degrade_frequency(out, spec.regions, spec.band_scales)
    return out


def degrade(x: Waveform, rng: np.random.Generator):
    """Sample a degradation spec and apply it; returns (degraded, spec)."""
    spec = sample_degradation_spec(len(x), rng)
    return apply_degradation(x, spec), spec


# ---------------------------------------------------------------------------
# WAV I/O (mono, PCM-16 or float-32)
# ---------------------------------------------------------------------------

def read_wav(path) -> Waveform:
    rate, data = scipy.io.wavfile.read(path)
    if data.ndim != 1:
        raise DspError(f"{path}: only mono WAV supported, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise DspError(f"{path}: unsupported WAV encoding {data.dtype}")
    return Waveform(samples=samples, sample_rate=int(rate))


def write_wav(path, x: Waveform, encoding: str = "float32"):
    if encoding == "float32":
        data = x.samples.astype(np.float32)
    elif encoding == "pcm16":
        data = np.clip(np.round(x.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise DspError(f"unsupported WAV encoding {encoding!r}")
    scipy.io.wavfile.write(path, x.sample_rate, data)

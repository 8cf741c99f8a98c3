"""Synthetic toy corpus, dataset manifests, and condition-track files.

Each toy utterance is a harmonic "singing" tone: piecewise-constant F0 on a
pentatonic grid, three harmonics with decaying amplitudes, and a per-phoneme
amplitude envelope.  The matching reference audio is produced by squeezing
the target through the mel filterbank and an 8-iteration phase
reconstruction, emulating a lossy two-stage baseline while staying
time-aligned with the target.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import dsp
from .dsp import HOP, SAMPLE_RATE, Waveform
from .network import ConditionFeatures

PENTATONIC_SEMITONES = (0, 2, 4, 7, 9, 12, 14, 16)
BASE_F0 = 220.0
HARMONIC_AMPS = (1.0, 0.5, 0.25)
CONDITION_HEADER = "# phoneme_id\tf0_hz\tduration_frames"


class DatasetError(ValueError):
    pass


@dataclass
class UtteranceRecord:
    target_path: str
    reference_path: str
    condition_path: str


def write_condition_file(path, c: ConditionFeatures):
    """One row per frame; duration_frames repeats the current phoneme's total."""
    per_frame_dur = np.repeat(c.durations, c.durations)
    lines = [CONDITION_HEADER, f"# speaker_id\t{c.speaker_id}"]
    for pid, f0, dur in zip(c.phoneme_ids, c.pitch, per_frame_dur):
        lines.append(f"{pid}\t{f0:.6f}\t{dur}")
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_condition_file(path) -> ConditionFeatures:
    ids, pitch = [], []
    speaker_id = 0
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# speaker_id"):
                    speaker_id = int(line.split("\t")[1])
                continue
            pid, f0, _dur = line.split("\t")
            ids.append(int(pid))
            pitch.append(float(f0))
    ids = np.asarray(ids, dtype=np.int64)
    change = np.flatnonzero(np.diff(ids)) + 1
    bounds = np.concatenate(([0], change, [ids.size]))
    durations = np.diff(bounds)
    return ConditionFeatures(phoneme_ids=ids, pitch=np.asarray(pitch),
                             durations=durations, speaker_id=speaker_id)


def write_manifest(path, records):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        for r in records:
            fh.write(f"{r.target_path}\t{r.reference_path}\t{r.condition_path}\n")
    os.replace(tmp, path)


def read_manifest(path):
    records = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(f"manifest line has {len(parts)} fields, expected 3: {line!r}")
            paths = [p if os.path.isabs(p) else os.path.join(base, p) for p in parts]
            records.append(UtteranceRecord(*paths))
    if not records:
        raise DatasetError(f"manifest {path} is empty")
    return records


def _phoneme_plan(n_frames: int, rng: np.random.Generator):
    """Random phoneme ids, durations, and per-phoneme F0 on the pentatonic grid."""
    ids, durations, f0s = [], [], []
    remaining = n_frames
    prev_pid = 0
    while remaining > 0:
        dur = int(rng.integers(20, 61))  # 20..60 frames ~ 0.1..0.32 s
        dur = min(dur, remaining)
        if remaining - dur < 10:
            dur = remaining
        pid = int(rng.integers(1, 40))
        if pid == prev_pid:  # keep id runs unambiguous for round-tripping
            pid = pid % 39 + 1
        prev_pid = pid
        voiced = rng.random() < 0.85
        if voiced:
            semi = PENTATONIC_SEMITONES[int(rng.integers(len(PENTATONIC_SEMITONES)))]
            f0 = BASE_F0 * 2.0 ** (semi / 12.0)
        else:
            f0 = 0.0
        ids.append(pid)
        durations.append(dur)
        f0s.append(f0)
        remaining -= dur
    return ids, durations, f0s


def synthesize_utterance(n_frames: int, rng: np.random.Generator):
    """Render one toy utterance; returns (target, condition)."""
    ids, durations, f0s = _phoneme_plan(n_frames, rng)
    length = n_frames * HOP
    samples = np.zeros(length)
    f0_track = np.zeros(n_frames)
    pos_frames = 0
    phase = 0.0
    for pid, dur, f0 in zip(ids, durations, f0s):
        start = pos_frames * HOP
        n = dur * HOP
        if f0 > 0:
            f0_track[pos_frames:pos_frames + dur] = f0
            ph = phase + 2.0 * np.pi * f0 / SAMPLE_RATE * np.arange(n)
            seg = np.zeros(n)
            for h, amp in enumerate(HARMONIC_AMPS, start=1):
                seg += amp * np.sin(h * ph)
            phase = (ph[-1] + 2.0 * np.pi * f0 / SAMPLE_RATE) % (2.0 * np.pi)
            # 10 ms raised-cosine attack/release envelope.
            env = np.ones(n)
            ramp = min(int(0.010 * SAMPLE_RATE), n // 2)
            if ramp > 0:
                fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
                env[:ramp] = fade
                env[-ramp:] = fade[::-1]
            samples[start:start + n] = 0.25 * seg * env
        pos_frames += dur
    target = Waveform(samples=samples)
    cond = ConditionFeatures.from_phonemes(ids, durations, f0_track)
    return target, cond


def lossy_reference(target: Waveform, n_iters: int = 8) -> Waveform:
    """Mel-compressed, phase-reconstructed copy of the target.

    Phase is initialized from the target's own STFT so the reference stays
    time-aligned; the 80-band mel bottleneck is what degrades it.
    """
    s = dsp.stft(target)
    fb = dsp.mel_filterbank()
    mel = fb @ np.abs(s.bins)
    # Approximate inverse of the filterbank (normalized transpose).
    col_norm = np.maximum(fb.sum(axis=0), 1e-8)
    mag = (fb.T @ mel) / col_norm[:, None]
    phase = np.angle(s.bins)
    x = None
    for _ in range(n_iters):
        spec = dsp.Spectrogram(bins=mag * np.exp(1j * phase), hop=s.hop, frame=s.frame)
        x = dsp.istft(spec, len(target))
        phase = np.angle(dsp.stft(x).bins)
    return x


def make_toy_dataset(n_utterances: int, out_dir, seed: int):
    """Generate the toy corpus; returns the manifest path."""
    if n_utterances < 1:
        raise DatasetError(f"need at least one utterance, got {n_utterances}")
    out_dir = os.path.abspath(out_dir)
    for sub in ("target", "reference", "condition"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_utterances):
        # 380..420 frames (even, so lengths are multiples of 256) ~ 2.0-2.2 s.
        n_frames = 2 * int(rng.integers(190, 211))
        target, cond = synthesize_utterance(n_frames, rng)
        reference = lossy_reference(target)
        tpath = os.path.join("target", f"utt{i:05d}.wav")
        rpath = os.path.join("reference", f"utt{i:05d}.wav")
        cpath = os.path.join("condition", f"utt{i:05d}.tsv")
        dsp.write_wav(os.path.join(out_dir, tpath), target)
        dsp.write_wav(os.path.join(out_dir, rpath), reference)
        write_condition_file(os.path.join(out_dir, cpath), cond)
        records.append(UtteranceRecord(tpath, rpath, cpath))
    manifest = os.path.join(out_dir, "manifest.tsv")
    write_manifest(manifest, records)
    return manifest


def load_utterance(record: UtteranceRecord):
    target = dsp.read_wav(record.target_path)
    reference = dsp.read_wav(record.reference_path)
    if target.sample_rate != reference.sample_rate:
        raise DatasetError(
            f"sample-rate mismatch: {record.target_path} vs {record.reference_path}")
    cond = read_condition_file(record.condition_path)
    if cond.n_frames * HOP != len(target):
        raise DatasetError(
            f"{record.condition_path}: {cond.n_frames} frames inconsistent with "
            f"{len(target)} samples")
    return target, reference, cond

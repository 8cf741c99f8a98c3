"""Two-phase training loop: crops, reference choice, optimizer schedule,
checkpoints, and loss logging.

Phase 1 always trains against the external reference audio; phase 2 swaps
in a degraded copy of the ground truth with a configurable probability.
Per-step randomness is derived from (seed, step), so resuming from a
checkpoint reproduces the loss sequence of an uninterrupted run.
"""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from . import diffusion, dsp
from .data import load_utterance, read_manifest
from .dsp import HOP, Waveform
from .network import ConditionFeatures, DenoiserModel, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"WRCK"
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 5000
    phase1_steps: int = 3750           # preserves the 3:1 phase ratio
    degraded_probability: float = 0.5
    crop_min: int = 25600
    crop_max: int = 51200
    batch_size: int = 1
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    weight_decay: float = 0.01
    diffusion_steps: int = 100
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 10

    def __post_init__(self):
        if self.crop_min % 256 or self.crop_max % 256:
            raise TrainingError("crop bounds must be multiples of 256")
        if self.crop_min > self.crop_max:
            raise TrainingError("crop_min must be <= crop_max")
        if not (0 <= self.phase1_steps <= self.total_steps):
            raise TrainingError("need 0 <= phase1_steps <= total_steps")
        if not (0.0 <= self.degraded_probability <= 1.0):
            raise TrainingError("degraded_probability must lie in [0, 1]")
        if self.batch_size < 1 or self.total_steps < 1:
            raise TrainingError("batch_size and total_steps must be >= 1")


def learning_rate(config: TrainConfig, step: int) -> float:
    """Log-linear anneal from lr_start (step 0) to lr_end (final step)."""
    if config.total_steps == 1:
        return config.lr_start
    frac = step / (config.total_steps - 1)
    return config.lr_start * (config.lr_end / config.lr_start) ** frac


def step_rng(seed: int, step: int, lane: int = 0) -> np.random.Generator:
    """Independent random stream for one training step."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(step, lane))))


def sample_crop(target: Waveform, reference: Waveform, cond: ConditionFeatures,
                config: TrainConfig, rng: np.random.Generator):
    """Aligned (target, reference, condition) crop with length a multiple of 256."""
    L = len(target)
    if L < config.crop_min:
        log.warning("utterance of %d samples shorter than crop_min %d: skipped",
                    L, config.crop_min)
        return None
    hi = min(config.crop_max, (L // 256) * 256)
    n_choices = (hi - config.crop_min) // 256 + 1
    crop_len = config.crop_min + 256 * int(rng.integers(0, n_choices))
    start = 256 * int(rng.integers(0, (L - crop_len) // 256 + 1))
    t = Waveform(samples=target.samples[start:start + crop_len],
                 sample_rate=target.sample_rate)
    r = Waveform(samples=reference.samples[start:start + crop_len],
                 sample_rate=reference.sample_rate)
    c = cond.crop(start // HOP, crop_len // HOP)
    return t, r, c


def choose_reference(target: Waveform, external_reference: Waveform, phase: int,
                     rng: np.random.Generator,
                     degraded_probability: float = 0.5) -> Waveform:
    """Phase 1: external reference.  Phase 2: degraded ground truth with prob p."""
    if phase not in (1, 2):
        raise TrainingError(f"phase must be 1 or 2, got {phase}")
    if phase == 2 and rng.random() < degraded_probability:
        degraded, _spec = dsp.degrade(target, rng)
        return degraded
    return external_reference


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def _collect_arrays(model: DenoiserModel, optimizer=None, step: int = 0) -> dict:
    arrays = {}
    for name, p in model.named_parameters():
        arrays["param." + name] = p.detach().cpu().numpy()
    if optimizer is not None:
        params = list(model.parameters())
        names = [n for n, _ in model.named_parameters()]
        for p, name in zip(params, names):
            state = optimizer.state.get(p, {})
            if state:
                arrays["opt." + name + ".exp_avg"] = state["exp_avg"].cpu().numpy()
                arrays["opt." + name + ".exp_avg_sq"] = state["exp_avg_sq"].cpu().numpy()
                arrays["opt." + name + ".step"] = np.array(
                    [int(state["step"])], dtype=np.int64)
    arrays["meta.step"] = np.array([step], dtype=np.int64)
    return arrays


def save_checkpoint(path, model: DenoiserModel, optimizer=None, step: int = 0,
                    config_text: str = ""):
    """Versioned binary container: config echo + named little-endian tensors."""
    arrays = _collect_arrays(model, optimizer, step)
    cfg = config_text.encode()
    buf = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
           struct.pack("<Q", len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        buf.append(struct.pack("<H", len(nb)))
        buf.append(nb)
        buf.append(struct.pack("<BB", code, arr.ndim))
        buf.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(buf))
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple:
    """Returns (config_text, {name: array})."""
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        if data[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
        off = 4
        (version,) = struct.unpack_from("<I", data, off)
        off += 4
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (cfg_len,) = struct.unpack_from("<Q", data, off)
        off += 8
        config_text = data[off:off + cfg_len].decode()
        off += cfg_len
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + name_len].decode()
            off += name_len
            code, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if off + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            arrays[name] = np.frombuffer(
                data[off:off + nbytes], dtype=dtype).reshape(shape).astype(
                    _DTYPES[code])
            off += nbytes
        if off != len(data):
            raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    except (struct.error, IndexError, KeyError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    return config_text, arrays


def load_checkpoint(path, model: DenoiserModel, optimizer=None) -> int:
    """Restore parameters (and optimizer moments) in place; returns the step.

    Validates every shape against the model before touching any parameter,
    so a rejected file leaves the model unmodified.
    """
    _config_text, arrays = read_checkpoint(path)
    named = dict(model.named_parameters())
    staged = {}
    for name, p in named.items():
        key = "param." + name
        if key not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(
                f"{path}: {name!r} has shape {tuple(arr.shape)}, model expects {tuple(p.shape)}")
        staged[name] = arr
    extra = [k for k in arrays if k.startswith("param.") and k[6:] not in named]
    if extra:
        raise CheckpointError(f"{path}: unknown parameters {extra}")
    with torch.no_grad():
        for name, p in named.items():
            p.copy_(torch.from_numpy(staged[name]).to(p.dtype))
    if optimizer is not None:
        for name, p in named.items():
            avg_key = "opt." + name + ".exp_avg"
            if avg_key in arrays:
                state = optimizer.state.setdefault(p, {})
                state["step"] = torch.tensor(
                    float(arrays["opt." + name + ".step"][0]))
                state["exp_avg"] = torch.from_numpy(
                    arrays[avg_key].copy()).to(p.dtype)
                state["exp_avg_sq"] = torch.from_numpy(
                    arrays["opt." + name + ".exp_avg_sq"].copy()).to(p.dtype)
    return int(arrays["meta.step"][0])


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint_path: str
    loss_log_path: str
    losses: list = field(default_factory=list)


def make_optimizer(model: DenoiserModel, config: TrainConfig):
    return torch.optim.AdamW(
        model.parameters(), lr=config.lr_start,
        betas=(config.adam_beta1, config.adam_beta2),
        weight_decay=config.weight_decay)


def train(model: DenoiserModel, config: TrainConfig, dataset_dir, out_dir,
          config_text: str = "", resume_from=None) -> TrainResult:
    """Run the two-phase loop; writes loss log and periodic checkpoints."""
    records = read_manifest(os.path.join(dataset_dir, "manifest.tsv"))
    os.makedirs(out_dir, exist_ok=True)
    schedule = diffusion.make_linear_schedule(config.diffusion_steps)
    optimizer = make_optimizer(model, config)

    start_step = 0
    if resume_from is not None:
        start_step = load_checkpoint(resume_from, model, optimizer)
        log.info("resumed from %s at step %d", resume_from, start_step)

    loss_log_path = os.path.join(out_dir, "loss_log.tsv")
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    mode = "a" if start_step else "w"
    losses = []
    cache = {}

    with open(loss_log_path, mode) as log_fh:
        if not start_step:
            log_fh.write("step\tloss\tlr\n")
        for step in range(start_step, config.total_steps):
            lr = learning_rate(config, step)
            for group in optimizer.param_groups:
                group["lr"] = lr
            phase = 1 if step < config.phase1_steps else 2
            optimizer.zero_grad()
            batch_loss = 0.0
            for b in range(config.batch_size):
                rng = step_rng(config.seed, step, lane=b)
                rec_idx = int(rng.integers(0, len(records)))
                if rec_idx not in cache:
                    cache[rec_idx] = load_utterance(records[rec_idx])
                target, reference, cond = cache[rec_idx]
                crop = sample_crop(target, reference, cond, config, rng)
                if crop is None:
                    continue
                t_crop, r_crop, c_crop = crop
                ref = choose_reference(t_crop, r_crop, phase, rng,
                                       config.degraded_probability)
                x0 = torch.from_numpy(t_crop.samples).float()
                ref_t = torch.from_numpy(ref.samples).float()
                loss = diffusion.training_loss(model, x0, ref_t, c_crop,
                                               schedule, rng)
                (loss / config.batch_size).backward()
                batch_loss += loss.item() / config.batch_size
            if not math.isfinite(batch_loss):
                save_checkpoint(ckpt_path, model, optimizer, step, config_text)
                raise TrainingError(f"non-finite loss at step {step}; "
                                    f"last checkpoint kept at {ckpt_path}")
            optimizer.step()
            losses.append(batch_loss)
            log_fh.write(f"{step}\t{batch_loss:.10e}\t{lr:.10e}\n")
            if config.log_every and step % config.log_every == 0:
                log_fh.flush()
            if ((step + 1) % config.checkpoint_every == 0
                    or step + 1 == config.total_steps):
                save_checkpoint(ckpt_path, model, optimizer, step + 1, config_text)
    return TrainResult(checkpoint_path=ckpt_path, loss_log_path=loss_log_path,
                       losses=losses)

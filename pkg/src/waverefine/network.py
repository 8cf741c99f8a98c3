"""Dual-branch waveform denoiser with LVC upsampling and a parallel
multi-resolution low-frequency path.

The trunk downsamples the noisy waveform through strided blocks; a
weight-cloned reference branch runs the same structure over the reference
audio.  At each resolution the two feature maps are fused by a 1x1
convolution initialized to pass the main features through unchanged and
ignore the reference, so a freshly built model is reference-neutral.  A
chain of location-variable-convolution upsampling blocks inverts the
pyramid, while independent low-frequency blocks map every fused resolution
straight to full length; their zero-initialized output heads make the whole
model start from the zero function.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import numerics
from .dsp import HOP


class ConditionError(ValueError):
    pass


class NetworkConfigError(ValueError):
    pass


@dataclass
class ConditionFeatures:
    """Frame-aligned symbolic condition: phoneme / pitch / duration / speaker.

    All per-frame tracks share one frame rate (one frame per STFT hop).
    ``durations`` holds per-phoneme frame counts whose run-length expansion
    must reproduce ``phoneme_ids`` exactly.
    """

    phoneme_ids: np.ndarray
    pitch: np.ndarray
    durations: np.ndarray
    speaker_id: int = 0

    def __post_init__(self):
        self.phoneme_ids = np.asarray(self.phoneme_ids, dtype=np.int64)
        self.pitch = np.asarray(self.pitch, dtype=np.float64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        if self.phoneme_ids.shape != self.pitch.shape:
            raise ConditionError(
                f"phoneme track length {self.phoneme_ids.size} != pitch track length {self.pitch.size}")
        if np.any(self.pitch < 0):
            raise ConditionError("pitch must be >= 0 (0 marks unvoiced frames)")
        if self.durations.sum() != self.phoneme_ids.size:
            raise ConditionError(
                f"durations sum to {self.durations.sum()} but track has {self.phoneme_ids.size} frames")
        pos = 0
        for pi, dur in enumerate(self.durations):
            if dur < 1:
                raise ConditionError(f"phoneme {pi}: duration {dur} must be >= 1")
            seg = self.phoneme_ids[pos:pos + dur]
            if np.any(seg != seg[0]):
                raise ConditionError(
                    f"phoneme {pi}: frames {pos}..{pos + dur - 1} are not a single id run")
            pos += dur

    @property
    def n_frames(self) -> int:
        return self.phoneme_ids.size

    @classmethod
    def from_phonemes(cls, ids, durations, pitch, speaker_id: int = 0):
        """Build per-frame tracks by repeating each phoneme id for its duration."""
        ids = np.asarray(ids, dtype=np.int64)
        durations = np.asarray(durations, dtype=np.int64)
        if ids.shape != durations.shape:
            raise ConditionError("ids and durations must align")
        track = np.repeat(ids, durations)
        pitch = np.asarray(pitch, dtype=np.float64)
        if pitch.size != track.size:
            raise ConditionError(f"pitch track length {pitch.size} != {track.size} frames")
        return cls(phoneme_ids=track, pitch=pitch, durations=durations,
                   speaker_id=speaker_id)

    def crop(self, start_frame: int, n_frames: int) -> "ConditionFeatures":
        ids = self.phoneme_ids[start_frame:start_frame + n_frames]
        pitch = self.pitch[start_frame:start_frame + n_frames]
        # Recompute durations as run lengths of the cropped id track.
        change = np.flatnonzero(np.diff(ids)) + 1
        bounds = np.concatenate(([0], change, [ids.size]))
        durations = np.diff(bounds)
        return ConditionFeatures(phoneme_ids=ids, pitch=pitch,
                                 durations=durations, speaker_id=self.speaker_id)


@dataclass
class ConditionEmbedding:
    """Per-stage condition feature maps (step embedding already added).

    ``step`` keeps the raw sinusoidal step embedding around separately so
    blocks can apply noise-level-dependent gains without the symbolic
    tracks mixed in; ``level`` is the cumulative signal-retention value
    (alpha_bar) the embedding was built from.
    """

    stage_maps: list  # stage i -> [cond_dim, L_i]
    step: torch.Tensor = None
    level: float = None

    def at_stage(self, i: int) -> torch.Tensor:
        return self.stage_maps[i]


@dataclass
class ModelConfig:
    strides: tuple = (8, 8, 4)
    channels: tuple = (32, 64, 128)
    cond_dim: int = 64
    phoneme_vocab: int = 64
    pitch_bins: int = 128
    speaker_count: int = 1
    attention_window: int = 32
    attention_heads: int = 2
    lowf_channels: int = 16
    lvc_kernel: int = 9
    step_embed_dim: int = 32

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.strides) != len(self.channels):
            raise NetworkConfigError(
                f"{len(self.strides)} strides but {len(self.channels)} channel widths")
        if any(s < 2 for s in self.strides):
            raise NetworkConfigError(f"all strides must be >= 2, got {self.strides}")
        if any(s % 2 for s in self.strides):
            raise NetworkConfigError(f"strides must be even, got {self.strides}")
        if self.lowf_channels % self.attention_heads:
            raise NetworkConfigError("lowf_channels must be divisible by attention_heads")
        if self.lvc_kernel % 2 == 0:
            raise NetworkConfigError("lvc_kernel must be odd")

    @property
    def stride_product(self) -> int:
        return int(np.prod(self.strides))

    @property
    def n_stages(self) -> int:
        return len(self.strides)

    def stage_lengths(self, length: int) -> list:
        lengths = []
        cur = length
        for s in self.strides:
            if cur % s:
                raise NetworkConfigError(f"length {cur} not divisible by stride {s}")
            cur //= s
            lengths.append(cur)
        return lengths


def sinusoidal_embedding(value: float, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sinusoidal embedding of a scalar in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=dtype) * (math.log(2000.0) / max(half - 1, 1)))
    angles = value * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)])


class ConditionEncoder(nn.Module):
    """Embeds symbolic tracks, length-regulates to each stage, adds the step embedding.

    The diffusion step enters as the schedule's cumulative signal-retention
    level, so inference grids with different step counts line up with the
    training schedule.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.cond_dim
        self.phoneme_embed = nn.Embedding(config.phoneme_vocab, d)
        self.pitch_embed = nn.Embedding(config.pitch_bins, d)
        self.speaker_embed = nn.Embedding(config.speaker_count, d)
        self.step_proj = nn.ModuleList(
            nn.Linear(config.step_embed_dim, d) for _ in config.strides)

    def pitch_to_bins(self, pitch: np.ndarray) -> np.ndarray:
        """Semitone quantization above 55 Hz; bin 0 is reserved for unvoiced."""
        bins = np.zeros(pitch.shape, dtype=np.int64)
        voiced = pitch > 0
        semis = np.round(12.0 * np.log2(np.maximum(pitch[voiced], 1e-6) / 55.0))
        bins[voiced] = np.clip(semis + 1, 1, self.config.pitch_bins - 1).astype(np.int64)
        return bins

    def forward(self, c: ConditionFeatures, t: int, schedule,
                target_length: int) -> ConditionEmbedding:
        cfg = self.config
        if target_length % 256:
            raise ConditionError(f"target length {target_length} not a multiple of 256")
        if c.n_frames * HOP != target_length:
            raise ConditionError(
                f"{c.n_frames} frames cover {c.n_frames * HOP} samples, "
                f"but target length is {target_length}")
        dtype = self.phoneme_embed.weight.dtype
        if np.any(c.phoneme_ids < 0) or np.any(c.phoneme_ids >= cfg.phoneme_vocab):
            raise ConditionError("phoneme id outside vocabulary")
        phon = self.phoneme_embed(torch.from_numpy(c.phoneme_ids))
        pitch = self.pitch_embed(torch.from_numpy(self.pitch_to_bins(c.pitch)))
        spk = self.speaker_embed(torch.tensor(c.speaker_id))
        frame_feat = (phon + pitch + spk).to(dtype)          # [n_frames, d]
        full = frame_feat.repeat_interleave(HOP, dim=0).T    # [d, L]

        level = schedule.alpha_bar(t) if schedule is not None else float(t)
        step = sinusoidal_embedding(level, cfg.step_embed_dim, dtype=dtype)

        maps = []
        cur = full.unsqueeze(0)
        for i, stride in enumerate(cfg.strides):
            cur = F.avg_pool1d(cur, kernel_size=stride, stride=stride)
            stage = cur.squeeze(0) + self.step_proj[i](step).unsqueeze(-1)
            maps.append(stage)
        return ConditionEmbedding(stage_maps=maps, step=step, level=level)


class DownBlock(nn.Module):
    """Strided convolution block of the downsampling trunk."""

    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        k = 2 * stride + 1
        pad = numerics.same_coverage_padding(k, stride)
        self.stride = stride
        self.down = nn.Conv1d(in_ch, out_ch, k, stride=stride, padding=pad)
        self.refine = nn.Conv1d(out_ch, out_ch, 3, padding=1)
        # Linear shortcut that packs the `stride` sub-samples of each segment
        # into channels, so fine time structure stays linearly readable after
        # downsampling instead of having to survive two nonlinearities.
        self.skip = nn.Conv1d(in_ch, out_ch, stride, stride=stride, bias=False)
        with torch.no_grad():
            self.skip.weight.zero_()
            for o in range(min(out_ch, in_ch * stride)):
                self.skip.weight[o, o % in_ch, o // in_ch] = 1.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % self.stride:
            raise NetworkConfigError(
                f"length {x.shape[-1]} not divisible by stride {self.stride}")
        h = F.silu(self.down(x))
        return F.silu(self.refine(h)) + self.skip(x)


class FusionConv(nn.Module):
    """1x1 fusion of (main, reference) features.

    Initialized as [identity | zero] over the channel concat: the main half
    passes through exactly and the reference half contributes nothing until
    training moves the weights.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv1d(2 * channels, channels, 1)
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.weight[:, :channels, 0] = torch.eye(channels)
            self.conv.bias.zero_()

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if x.shape != y.shape:
            raise NetworkConfigError(
                f"fusion shape mismatch: main {tuple(x.shape)} vs reference {tuple(y.shape)}")
        return self.conv(torch.cat([x, y], dim=-2))


class KernelPredictor(nn.Module):
    """Maps (fused features, condition) to per-segment depthwise kernel pairs."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, hidden: int = 32):
        super().__init__()
        self.out_ch = out_ch
        self.kernel_size = kernel_size
        self.net = nn.Sequential(
            nn.Conv1d(in_ch, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv1d(hidden, 2 * out_ch * kernel_size, 3, padding=1),
        )

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        k = self.net(feat)
        L = k.shape[-1]
        return k.reshape(2, self.out_ch, self.kernel_size, L)


class LVCUpBlock(nn.Module):
    """Time-aware location-variable-convolution upsampling block.

    Nearest-neighbor upsampling by the stage stride, followed by a gated
    depthwise convolution whose kernels are predicted per input segment from
    the fused features and the embedded condition.
    """

    def __init__(self, stride: int, in_ch: int, out_ch: int, fused_ch: int,
                 cond_dim: int, kernel_size: int):
        super().__init__()
        self.stride = stride
        self.kernel_size = kernel_size
        self.pre = nn.Conv1d(in_ch, out_ch, 1)
        self.predictor = KernelPredictor(fused_ch + cond_dim, out_ch, kernel_size)

    def forward(self, z_next: torch.Tensor, fused: torch.Tensor,
                cond: torch.Tensor) -> torch.Tensor:
        if z_next.shape[-1] != fused.shape[-1] or fused.shape[-1] != cond.shape[-1]:
            raise NetworkConfigError(
                f"LVC length mismatch: z {z_next.shape[-1]}, fused {fused.shape[-1]}, "
                f"cond {cond.shape[-1]}")
        K = self.kernel_size
        s = self.stride
        z = self.pre(z_next)
        z_up = z.repeat_interleave(s, dim=-1)
        kernels = self.predictor(torch.cat([fused, cond], dim=-2))
        C, L_in = z.shape
        patches = F.pad(z_up, (K // 2, K // 2)).unfold(-1, K, 1)  # [C, L_out, K]
        patches = patches.reshape(C, L_in, s, K)
        # One predicted kernel per input segment of `stride` output samples.
        kernels = kernels.permute(0, 1, 3, 2).unsqueeze(3)        # [2, C, L_in, 1, K]
        a = (patches * kernels[0]).sum(dim=-1).reshape(C, L_in * s)
        b = (patches * kernels[1]).sum(dim=-1).reshape(C, L_in * s)
        return torch.tanh(a) * torch.sigmoid(b) + z_up


class LocalAttention(nn.Module):
    """Sliding-window self-attention over a [C, T] feature map."""

    def __init__(self, dim: int, window: int, heads: int):
        super().__init__()
        self.window = window
        self.heads = heads
        self.wq = nn.Parameter(torch.empty(dim, dim))
        self.wk = nn.Parameter(torch.empty(dim, dim))
        self.wv = nn.Parameter(torch.empty(dim, dim))
        self.wo = nn.Parameter(torch.empty(dim, dim))
        for w in (self.wq, self.wk, self.wv, self.wo):
            nn.init.xavier_uniform_(w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = numerics.local_self_attention(
            x.T, self.wq, self.wk, self.wv, self.wo, self.window, self.heads)
        return out.T


class LowFBlock(nn.Module):
    """Low-frequency path block: maps one fused resolution straight to length L.

    Per upscale factor: 1-D convolution, local self-attention, channel
    upscale by the factor, and a reshape that trades channels for time.  The
    output head is zero-initialized so every block starts silent.
    """

    def __init__(self, factors, in_ch: int, cond_dim: int, hidden: int,
                 window: int, heads: int, step_dim: int = 0):
        super().__init__()
        self.factors = tuple(factors)
        self.entry = nn.Conv1d(in_ch + cond_dim, hidden, 1)
        # Route the leading fused channels (which carry the packed
        # sub-samples from the trunk shortcut) one-to-one into the leading
        # hidden channels, so the zero-initialized output head sees them
        # from the first optimizer step.
        with torch.no_grad():
            h0 = min(hidden, in_ch)
            self.entry.weight[:h0, :h0, 0] = torch.eye(h0)
        # Per-channel log-gain from the raw step embedding: the required
        # feature scaling grows like 1/sqrt(1 - alpha_bar), so the gate works
        # in log space to keep those gains reachable.  Zero-initialized, so
        # the gate starts as identity.
        self.film = nn.Linear(step_dim, hidden) if step_dim else None
        if self.film is not None:
            with torch.no_grad():
                self.film.weight.zero_()
                self.film.bias.zero_()
        self.convs = nn.ModuleList()
        self.attns = nn.ModuleList()
        self.upscales = nn.ModuleList()
        for f in self.factors:
            self.convs.append(nn.Conv1d(hidden, hidden, 3, padding=1))
            self.attns.append(LocalAttention(hidden, window, heads))
            self.upscales.append(nn.Conv1d(hidden, hidden * f, 1))
        self.out = nn.Conv1d(hidden, 1, 1)
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.zero_()
        self.hidden = hidden

    def forward(self, fused: torch.Tensor, cond: torch.Tensor,
                step: torch.Tensor = None, gain: float = 1.0) -> torch.Tensor:
        # The entry projection is linear and the inner convolution is
        # residual, so a straight linear path runs from the fused features to
        # the reshaped output; the nonlinear branches refine it.
        h = self.entry(torch.cat([fused, cond], dim=-2))
        if self.film is not None and step is not None:
            h = h * torch.exp(self.film(step)).unsqueeze(-1)
        for f, conv, attn, up in zip(self.factors, self.convs, self.attns, self.upscales):
            h = h + F.silu(conv(h))
            h = h + attn(h)
            h = up(h)
            c, T = h.shape
            if c != self.hidden * f:
                raise NetworkConfigError(
                    f"upscale produced {c} channels, expected {self.hidden * f}")
            # [hidden*f, T] -> [hidden, T*f]: each position expands to f samples.
            h = h.reshape(self.hidden, f, T).permute(0, 2, 1).reshape(self.hidden, T * f)
        # Noise-prediction preconditioning: the ideal epsilon estimate
        # carries a 1/sqrt(1 - alpha_bar) factor, which is applied here
        # deterministically so the learned part stays well-scaled across
        # noise levels.  Purely linear, so the zero-initialized head still
        # makes the block silent at initialization.
        return self.out(h * gain)


class DenoiserModel(nn.Module):
    """Full reference-guided denoiser; predicts the injected noise."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        cfg = config
        self.cond_encoder = ConditionEncoder(cfg)

        chans = [1] + list(cfg.channels)
        self.main_blocks = nn.ModuleList(
            DownBlock(chans[i], chans[i + 1], cfg.strides[i])
            for i in range(cfg.n_stages))
        self.fusions = nn.ModuleList(FusionConv(c) for c in cfg.channels)
        self.bottleneck = nn.Conv1d(cfg.channels[-1], cfg.channels[-1], 3, padding=1)

        # LVC chain, deepest first; up_ch[i] is the output width of stage-i block.
        up_ch = [cfg.channels[0]] + list(cfg.channels[:-1])
        self.lvc_blocks = nn.ModuleList()
        for i in range(cfg.n_stages, 0, -1):
            in_ch = cfg.channels[-1] if i == cfg.n_stages else up_ch[i]
            self.lvc_blocks.append(LVCUpBlock(
                stride=cfg.strides[i - 1], in_ch=in_ch, out_ch=up_ch[i - 1],
                fused_ch=cfg.channels[i - 1], cond_dim=cfg.cond_dim,
                kernel_size=cfg.lvc_kernel))

        self.lowf_blocks = nn.ModuleList(
            LowFBlock(factors=cfg.strides[:i + 1], in_ch=cfg.channels[i],
                      cond_dim=cfg.cond_dim, hidden=cfg.lowf_channels,
                      window=cfg.attention_window, heads=cfg.attention_heads,
                      step_dim=cfg.step_embed_dim)
            for i in range(cfg.n_stages))

        self.out_proj = nn.Conv1d(up_ch[0], 1, 1)
        with torch.no_grad():
            self.out_proj.weight.zero_()
            self.out_proj.bias.zero_()

        self.ref_blocks = None
        self.clone_reference_branch()

    def clone_reference_branch(self):
        """Deep-copy the downsampling trunk into an untied reference branch."""
        self.ref_blocks = copy.deepcopy(self.main_blocks)

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x_t: torch.Tensor, reference: torch.Tensor,
                c: ConditionFeatures, t: int, schedule=None) -> torch.Tensor:
        cfg = self.config
        if x_t.ndim != 1 or reference.ndim != 1:
            raise NetworkConfigError("model inputs must be 1-D waveforms")
        L = x_t.shape[0]
        if reference.shape[0] != L:
            raise NetworkConfigError(
                f"reference length {reference.shape[0]} != input length {L}")
        if L % 256:
            raise NetworkConfigError(f"input length {L} not a multiple of 256")
        cfg.stage_lengths(L)

        cond = self.cond_encoder(c, t, schedule, L)

        y = reference.unsqueeze(0)
        Ys = []
        for block in self.ref_blocks:
            y = block(y)
            Ys.append(y)

        x = x_t.unsqueeze(0)
        fused_list = []
        for i, block in enumerate(self.main_blocks):
            try:
                x = block(x)
                x = self.fusions[i](x, Ys[i])
            except NetworkConfigError as exc:
                raise NetworkConfigError(f"stage {i + 1}: {exc}") from exc
            fused_list.append(x)

        z = F.silu(self.bottleneck(fused_list[-1]))
        for j, lvc in enumerate(self.lvc_blocks):
            i = cfg.n_stages - j  # stage index of this block
            z = lvc(z, fused_list[i - 1], cond.at_stage(i - 1))

        out = self.out_proj(z)
        # Capped so the near-clean noise levels cannot dominate training
        # gradients; the cap only bites where the per-step noise removal is
        # already small.
        gain = 1.0
        if cond.level is not None and cond.level < 1.0:
            gain = min(1.0 / math.sqrt(1.0 - cond.level), 8.0)
        for i, lowf in enumerate(self.lowf_blocks):
            out = out + lowf(fused_list[i], cond.at_stage(i), cond.step, gain)
        return out.squeeze(0)


def clone_reference_branch(model: DenoiserModel) -> nn.ModuleList:
    model.clone_reference_branch()
    return model.ref_blocks

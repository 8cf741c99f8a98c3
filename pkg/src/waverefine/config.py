"""Line-oriented run configuration: ``section.key = value`` with a schema
version header.  Unknown keys are rejected; every run logs the fully
resolved configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .network import ModelConfig
from .training import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def _parse_int_tuple(text: str):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _parse_float_tuple(text: str):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _parse_str_tuple(text: str):
    return tuple(v.strip() for v in text.split(",") if v.strip())


# key -> (parser, default)
_SCHEMA = {
    "seed": (int, 0),
    "model.strides": (_parse_int_tuple, (8, 8, 4)),
    "model.channels": (_parse_int_tuple, (32, 64, 128)),
    "model.cond_dim": (int, 64),
    "model.phoneme_vocab": (int, 64),
    "model.pitch_bins": (int, 128),
    "model.speaker_count": (int, 1),
    "model.attention_window": (int, 32),
    "model.attention_heads": (int, 2),
    "model.lowf_channels": (int, 8),
    "model.lvc_kernel": (int, 9),
    "model.step_embed_dim": (int, 32),
    "schedule.train_steps": (int, 100),
    "schedule.beta_min": (float, 1e-4),
    "schedule.beta_max": (float, 0.05),
    "schedule.short_betas": (_parse_float_tuple, ()),
    "training.total_steps": (int, 5000),
    "training.phase1_steps": (int, 3750),
    "training.degraded_probability": (float, 0.5),
    "training.crop_min": (int, 25600),
    "training.crop_max": (int, 51200),
    "training.batch_size": (int, 1),
    "training.lr_start": (float, 1e-4),
    "training.lr_end": (float, 1e-6),
    "training.adam_beta1": (float, 0.9),
    "training.adam_beta2": (float, 0.98),
    "training.weight_decay": (float, 0.01),
    "training.checkpoint_every": (int, 1000),
    "eval.metrics": (_parse_str_tuple, ("snr", "lsd", "stoi")),
    "eval.max_utterances": (int, 8),
    "eval.steps": (_parse_int_tuple, (4, 24, 100)),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: default for k, (_p, default) in _SCHEMA.items()}
        for k, v in self.values.items():
            if k not in _SCHEMA:
                raise ConfigError(f"unknown configuration key {k!r}")
            merged[k] = v
        self.values = merged

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = {}
        version_seen = False
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "schema_version":
                if value != str(SCHEMA_VERSION):
                    raise ConfigError(f"unsupported schema_version {value!r}")
                version_seen = True
                continue
            if key not in _SCHEMA:
                raise ConfigError(f"line {lineno}: unknown configuration key {key!r}")
            parser = _SCHEMA[key][0]
            try:
                values[key] = parser(value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
        if not version_seen:
            raise ConfigError("missing schema_version header")
        return cls(values=values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def to_text(self) -> str:
        lines = [f"schema_version = {SCHEMA_VERSION}"]
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, tuple):
                v = ",".join(str(item) for item in v)
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            strides=self["model.strides"],
            channels=self["model.channels"],
            cond_dim=self["model.cond_dim"],
            phoneme_vocab=self["model.phoneme_vocab"],
            pitch_bins=self["model.pitch_bins"],
            speaker_count=self["model.speaker_count"],
            attention_window=self["model.attention_window"],
            attention_heads=self["model.attention_heads"],
            lowf_channels=self["model.lowf_channels"],
            lvc_kernel=self["model.lvc_kernel"],
            step_embed_dim=self["model.step_embed_dim"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            total_steps=self["training.total_steps"],
            phase1_steps=self["training.phase1_steps"],
            degraded_probability=self["training.degraded_probability"],
            crop_min=self["training.crop_min"],
            crop_max=self["training.crop_max"],
            batch_size=self["training.batch_size"],
            lr_start=self["training.lr_start"],
            lr_end=self["training.lr_end"],
            adam_beta1=self["training.adam_beta1"],
            adam_beta2=self["training.adam_beta2"],
            weight_decay=self["training.weight_decay"],
            diffusion_steps=self["schedule.train_steps"],
            seed=self["seed"],
            checkpoint_every=self["training.checkpoint_every"],
        )

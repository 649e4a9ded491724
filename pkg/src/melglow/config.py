"""Configuration dataclasses, named presets and the JSON config-file format.

A config file is a single JSON object with the sections ``flow``, ``train``
and ``paths`` (plus an optional ``baseline`` section describing a
WaveGlow-style model used only for parameter accounting). Keys are written
sorted so that serialisation is canonical; unknown keys are rejected on load.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from .errors import ConfigError


@dataclass(frozen=True)
class STFTConfig:
    sample_rate: int = 22050
    fft_size: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    fmin: float = 60.0
    fmax: float = 7600.0

    def __post_init__(self):
        if self.win_length > self.fft_size:
            raise ConfigError(f"stft.win_length ({self.win_length}) exceeds stft.fft_size ({self.fft_size})")
        for name in ("sample_rate", "fft_size", "win_length", "hop_length", "n_mels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"stft.{name} must be positive")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError("stft.fmin/fmax must satisfy 0 <= fmin < fmax <= sample_rate/2")


@dataclass(frozen=True)
class KernelPredictorConfig:
    hidden_ch: int = 64
    residual_blocks: int = 3
    kp_kernel_size: int = 7

    def __post_init__(self):
        if self.hidden_ch <= 0 or self.residual_blocks < 0:
            raise ConfigError("kp.hidden_ch must be positive and kp.residual_blocks non-negative")
        if self.kp_kernel_size <= 0 or self.kp_kernel_size % 2 == 0:
            raise ConfigError("kp.kp_kernel_size must be a positive odd integer")


@dataclass(frozen=True)
class FlowConfig:
    n_flows: int = 12
    n_early_every: int = 4
    n_early_size: int = 2
    squeeze_channels: int = 8
    lvc_layers_per_flow: int = 7
    lvc_channels: int = 32
    lvc_kernel_size: int = 3
    kp: KernelPredictorConfig = field(default_factory=KernelPredictorConfig)
    stft: STFTConfig = field(default_factory=STFTConfig)
    sigma_train: float = 1.0
    sigma_sample: float = 0.6
    s_clamp: float = 7.0

    def __post_init__(self):
        if self.n_flows < 1 or self.lvc_layers_per_flow < 1:
            raise ConfigError("flow.n_flows and flow.lvc_layers_per_flow must be >= 1")
        if self.lvc_channels < 2 or self.lvc_channels % 2:
            raise ConfigError("flow.lvc_channels must be an even integer >= 2")
        if self.lvc_kernel_size < 1 or self.lvc_kernel_size % 2 == 0:
            raise ConfigError("flow.lvc_kernel_size must be odd")
        if self.stft.hop_length % self.squeeze_channels:
            raise ConfigError("stft.hop_length must be divisible by flow.squeeze_channels")
        if self.sigma_train <= 0 or self.sigma_sample < 0:
            raise ConfigError("flow.sigma_train must be positive and flow.sigma_sample non-negative")
        if self.channel_schedule()[-1] < 2:
            raise ConfigError("early outputs leave fewer than 2 working channels")

    @property
    def frame_hop_elems(self) -> int:
        return self.stft.hop_length // self.squeeze_channels

    @property
    def frame_window_elems(self) -> int:
        return self.stft.win_length // self.squeeze_channels

    def is_early_step(self, k: int) -> bool:
        return self.n_early_every > 0 and k > 0 and k % self.n_early_every == 0

    def channel_schedule(self) -> list[int]:
        """Working channel count entering each flow step."""
        ch = self.squeeze_channels
        out = []
        for k in range(self.n_flows):
            if self.is_early_step(k):
                ch -= self.n_early_size
            out.append(ch)
        return out


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    clip_seconds: float = 1.0
    lr: float = 1e-4
    lr_plateau: float = 5e-5
    plateau_patience: int = 5
    eval_every: int = 500
    log_every: int = 100
    checkpoint_every: int = 0
    max_steps: int = 600_000
    seed: int = 0
    grad_clip_norm: float = 10.0
    dtype: str = "float32"

    def __post_init__(self):
        if not self.lr > self.lr_plateau > 0:
            raise ConfigError("train.lr must exceed train.lr_plateau, which must be positive")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.clip_seconds <= 0:
            raise ConfigError("train.clip_seconds must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be 'float32' or 'float64'")
        if self.plateau_patience < 1 or self.eval_every < 1 or self.log_every < 1:
            raise ConfigError("train.plateau_patience, eval_every and log_every must be >= 1")


@dataclass(frozen=True)
class WaveGlowConfig:
    """Global-kernel WN baseline; only its parameter count is ever used."""

    channels: int = 256
    n_flows: int = 12
    n_layers: int = 8
    n_early_every: int = 4
    n_early_size: int = 2
    n_group: int = 8
    kernel_size: int = 3
    n_mels: int = 80
    upsample_window: int = 1024
    upsample_stride: int = 256


@dataclass(frozen=True)
class ConfigFile:
    flow: FlowConfig = field(default_factory=FlowConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Mapping[str, str] = field(default_factory=dict)
    baseline: Optional[WaveGlowConfig] = None

    def __eq__(self, other):
        return isinstance(other, ConfigFile) and self.to_dict() == other.to_dict()

    def to_dict(self) -> dict:
        d = {
            "flow": dataclasses.asdict(self.flow),
            "train": dataclasses.asdict(self.train),
            "paths": dict(self.paths),
        }
        if self.baseline is not None:
            d["baseline"] = dataclasses.asdict(self.baseline)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def _build(cls, data: Any, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key '{where}.{unknown[0]}'")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            value = _build(sub, value, f"{where}.{name}")
        else:
            ftype = fields[name].type
            if ftype in ("int", int) and not (isinstance(value, int) and not isinstance(value, bool)):
                raise ConfigError(f"{where}.{name}: expected an integer, got {value!r}")
            if ftype in ("float", float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{where}.{name}: expected a number, got {value!r}")
                value = float(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


_NESTED = {
    (FlowConfig, "kp"): KernelPredictorConfig,
    (FlowConfig, "stft"): STFTConfig,
}


def config_from_dict(data: Mapping) -> ConfigFile:
    if not isinstance(data, Mapping):
        raise ConfigError("config document must be a JSON object")
    unknown = sorted(set(data) - {"flow", "train", "paths", "baseline"})
    if unknown:
        raise ConfigError(f"unknown config key '{unknown[0]}'")
    paths = data.get("paths", {})
    if not isinstance(paths, Mapping) or not all(isinstance(v, str) for v in paths.values()):
        raise ConfigError("paths: expected an object of strings")
    baseline = data.get("baseline")
    return ConfigFile(
        flow=_build(FlowConfig, data.get("flow", {}), "flow"),
        train=_build(TrainConfig, data.get("train", {}), "train"),
        paths=dict(paths),
        baseline=None if baseline is None else _build(WaveGlowConfig, baseline, "baseline"),
    )


def loads(text: str) -> ConfigFile:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(data)


def _published(lvc_channels=32, hidden=64, blocks=3) -> ConfigFile:
    return ConfigFile(
        flow=FlowConfig(lvc_channels=lvc_channels, kp=KernelPredictorConfig(hidden_ch=hidden, residual_blocks=blocks)),
        train=TrainConfig(),
    )


PRESETS = {
    "tiny": lambda: ConfigFile(
        flow=FlowConfig(
            n_flows=4,
            lvc_channels=16,
            kp=KernelPredictorConfig(hidden_ch=16, residual_blocks=2),
        ),
        train=TrainConfig(lr=1e-3, lr_plateau=5e-4, max_steps=500, eval_every=100, log_every=10),
    ),
    "melglow-32": lambda: _published(32),
    "melglow-48": lambda: _published(48),
    "melglow-64": lambda: _published(64),
    "melglow-128": lambda: _published(128),
    "melglow-kp-32c": lambda: _published(32, hidden=32),
    "melglow-kp-64c": lambda: _published(32, hidden=64),
    "melglow-kp-128c": lambda: _published(32, hidden=128),
    "melglow-kp-1l": lambda: _published(32, blocks=1),
    "melglow-kp-3l": lambda: _published(32, blocks=3),
    "melglow-kp-5l": lambda: _published(32, blocks=5),
}
for _c in (64, 128, 256, 512):
    PRESETS[f"waveglow-{_c}"] = (lambda c: lambda: ConfigFile(baseline=WaveGlowConfig(channels=c)))(_c)


def load_config(spec: str | os.PathLike) -> ConfigFile:
    """Load a preset by name or a JSON config file by path.

    ``MELGLOW_SEED`` in the environment overrides ``train.seed``.
    """
    spec_s = os.fspath(spec)
    if spec_s in PRESETS and not Path(spec_s).exists():
        cfg = PRESETS[spec_s]()
    else:
        try:
            text = Path(spec_s).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {spec_s!r}: {exc.strerror}") from None
        cfg = loads(text)
    seed = os.environ.get("MELGLOW_SEED")
    if seed is not None:
        try:
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=int(seed)))
        except ValueError:
            raise ConfigError(f"MELGLOW_SEED must be an integer, got {seed!r}") from None
    return cfg

"""MelGlow: a multi-scale Glow-style flow whose coupling nets are LVC stacks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .config import FlowConfig
from .errors import InversionError, NumericError, ShapeError
from .lvc import IntervalMap, lvc
from .predictor import KernelPredictor, LVCTarget, predictor_parameter_count

LOG_2PI = math.log(2 * math.pi)


def squeeze_batch(audio: torch.Tensor, channels: int) -> torch.Tensor:
    """(B, n) -> (B, channels, n / channels) with ``out[:, c, t] == audio[:, channels*t + c]``."""
    B, n = audio.shape
    if n % channels:
        raise ShapeError(f"audio length {n} is not divisible by {channels}")
    return audio.reshape(B, n // channels, channels).transpose(1, 2)


def unsqueeze_batch(x: torch.Tensor) -> torch.Tensor:
    B, C, T = x.shape
    return x.transpose(1, 2).reshape(B, C * T)


def random_orthogonal(n: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    q, r = torch.linalg.qr(torch.randn(n, n, generator=generator, dtype=torch.float64))
    q = q * torch.sign(torch.diagonal(r))
    if torch.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q.float()


class InvertibleConv1x1(nn.Module):
    """Per-timestep channel mixing ``y[:, :, t] = W x[:, :, t]``."""

    def __init__(self, channels: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.weight = nn.Parameter(random_orthogonal(channels, generator))

    def forward(self, x):
        _, logabsdet = torch.linalg.slogdet(self.weight)
        return torch.einsum("ij,bjt->bit", self.weight, x), x.shape[-1] * logabsdet

    def inverse(self, y):
        if abs(torch.det(self.weight).item()) < 1e-12:
            raise InversionError("invertible 1x1 conv weight is singular")
        return torch.einsum("ij,bjt->bit", torch.linalg.inv(self.weight), y)


class CouplingNet(nn.Module):
    """Maps the conditioning half ``x_a`` and the mel to log-scale ``s`` and shift ``b``."""

    def __init__(self, n_in: int, n_out: int, cfg: FlowConfig):
        super().__init__()
        C = cfg.lvc_channels
        self.cfg = cfg
        self.n_out = n_out
        self.start = nn.Conv1d(n_in, C, 1)
        self.targets = [LVCTarget(i, C // 2, C, cfg.lvc_kernel_size) for i in range(cfg.lvc_layers_per_flow)]
        self.predictor = KernelPredictor(cfg.stft.n_mels, cfg.kp, self.targets)
        self.res = nn.ModuleList(nn.Conv1d(C // 2, C, 1) for _ in self.targets)
        self.end = nn.Conv1d(C, 2 * n_out, 1)
        nn.init.zeros_(self.end.weight)
        nn.init.zeros_(self.end.bias)
        self.maps = [
            IntervalMap(cfg.frame_hop_elems, cfg.frame_window_elems, 2**i) for i in range(cfg.lvc_layers_per_flow)
        ]

    def forward(self, x_a, mel):
        kernels = self.predictor(mel)
        if kernels[0].num_frames * self.cfg.frame_hop_elems != x_a.shape[-1]:
            raise ShapeError(
                f"{mel.shape[-1]} mel frames give {kernels[0].num_frames} kernel frames, "
                f"which do not cover {x_a.shape[-1]} squeezed elements"
            )
        h = self.start(x_a)
        for ks, imap, res in zip(kernels, self.maps, self.res):
            h = h + res(lvc(h, ks, imap))
        s, b = self.end(h).split(self.n_out, dim=1)
        return torch.clamp(s, -self.cfg.s_clamp, self.cfg.s_clamp), b


@dataclass
class FlowOutput:
    z: list  # early outputs in emission order, then the final working channels
    log_det: torch.Tensor  # (B,)
    nll: torch.Tensor  # scalar, nats per element, averaged over the batch
    n_elements: int  # per batch item

    @property
    def bits_per_dim(self) -> torch.Tensor:
        return self.nll / math.log(2)


class MelGlow(nn.Module):
    def __init__(self, cfg: FlowConfig, seed: Optional[int] = 0):
        super().__init__()
        self.cfg = cfg
        gen = None if seed is None else torch.Generator().manual_seed(seed)
        self.convinv = nn.ModuleList()
        self.couplings = nn.ModuleList()
        with torch.random.fork_rng():
            if seed is not None:
                torch.manual_seed(seed)
            for ch in cfg.channel_schedule():
                n_a = (ch + 1) // 2
                self.convinv.append(InvertibleConv1x1(ch, gen))
                self.couplings.append(CouplingNet(n_a, ch - n_a, cfg))

    @property
    def dtype(self):
        return self.convinv[0].weight.dtype

    def _prepare(self, audio, mel):
        if audio.dim() == 1:
            audio = audio.unsqueeze(0)
        if mel.dim() == 2:
            mel = mel.unsqueeze(0)
        hop = self.cfg.stft.hop_length
        if mel.shape[1] != self.cfg.stft.n_mels:
            raise ShapeError(f"mel has {mel.shape[1]} channels, model expects {self.cfg.stft.n_mels}")
        if audio.shape[-1] % hop or audio.shape[-1] // hop != mel.shape[-1] - 1:
            raise ShapeError(
                f"audio length {audio.shape[-1]} must equal (mel_frames - 1) * hop = {(mel.shape[-1] - 1) * hop}"
            )
        return audio.to(self.dtype), mel.to(self.dtype)

    def forward(self, audio: torch.Tensor, mel: torch.Tensor) -> FlowOutput:
        """Map ``audio`` (B, n) to latents given ``mel`` (B, n_mels, n / hop + 1)."""
        audio, mel = self._prepare(audio, mel)
        x = squeeze_batch(audio, self.cfg.squeeze_channels)
        B = x.shape[0]
        log_det = x.new_zeros(B)
        z = []
        for k, (conv, coupling) in enumerate(zip(self.convinv, self.couplings)):
            if self.cfg.is_early_step(k):
                z.append(x[:, : self.cfg.n_early_size])
                x = x[:, self.cfg.n_early_size :]
            x, ld = conv(x)
            log_det = log_det + ld
            n_a = (x.shape[1] + 1) // 2
            x_a, x_b = x[:, :n_a], x[:, n_a:]
            s, b = coupling(x_a, mel)
            x = torch.cat([x_a, x_b * torch.exp(s) + b], dim=1)
            log_det = log_det + s.sum(dim=(1, 2))
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after flow step {k}")
        z.append(x)
        n = audio.shape[-1]
        sigma = self.cfg.sigma_train
        sq = sum(t.pow(2).sum(dim=(1, 2)) for t in z)
        total = sq / (2 * sigma**2) + 0.5 * n * (LOG_2PI + 2 * math.log(sigma)) - log_det
        return FlowOutput(z, log_det, total.mean() / n, n)

    def latent_shapes(self, batch: int, squeezed_len: int) -> list[tuple]:
        shapes = [(batch, self.cfg.n_early_size, squeezed_len) for k in range(self.cfg.n_flows) if self.cfg.is_early_step(k)]
        shapes.append((batch, self.cfg.channel_schedule()[-1], squeezed_len))
        return shapes

    def inverse(self, z: list, mel: torch.Tensor) -> torch.Tensor:
        """Invert :meth:`forward`; returns audio of shape (B, n)."""
        if mel.dim() == 2:
            mel = mel.unsqueeze(0)
        mel = mel.to(self.dtype)
        z = [t.to(self.dtype) for t in z]
        early = list(z[:-1])
        x = z[-1]
        expected = self.latent_shapes(x.shape[0], x.shape[-1])
        if [tuple(t.shape) for t in z] != expected:
            raise ShapeError(f"latent segments {[tuple(t.shape) for t in z]} do not match {expected}")
        for k in reversed(range(self.cfg.n_flows)):
            n_a = (x.shape[1] + 1) // 2
            x_a, x_b = x[:, :n_a], x[:, n_a:]
            s, b = self.couplings[k](x_a, mel)
            x = torch.cat([x_a, (x_b - b) * torch.exp(-s)], dim=1)
            x = self.convinv[k].inverse(x)
            if self.cfg.is_early_step(k):
                x = torch.cat([early.pop(), x], dim=1)
        return unsqueeze_batch(x)

    @torch.no_grad()
    def synthesize(self, mel: torch.Tensor, sigma: Optional[float] = None, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if mel.dim() == 2:
            mel = mel.unsqueeze(0)
        sigma = self.cfg.sigma_sample if sigma is None else sigma
        T = (mel.shape[-1] - 1) * self.cfg.frame_hop_elems
        z = []
        for shape in self.latent_shapes(mel.shape[0], T):
            if sigma == 0:
                z.append(torch.zeros(shape, dtype=self.dtype))
            else:
                z.append(sigma * torch.randn(shape, generator=generator, dtype=self.dtype))
        return self.inverse(z, mel)


def perturb_(model: nn.Module, scale: float = 0.05, seed: int = 0) -> nn.Module:
    """Add seeded Gaussian noise to every parameter (zero-initialised layers included).

    Noise is scaled by ``scale / sqrt(fan_in)`` so coupling outputs stay O(scale).
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            fan_in = p[0].numel() if p.dim() > 1 else 1
            noise = torch.randn(p.shape, generator=gen, dtype=torch.float64) * (scale / math.sqrt(fan_in))
            p.add_(noise.to(p.dtype))
    return model


@dataclass
class ParameterCount:
    total: int
    modules: dict = field(default_factory=dict)
    steps: list = field(default_factory=list)


def count_parameters(cfg: FlowConfig) -> ParameterCount:
    """Closed-form trainable-parameter count of :class:`MelGlow` for ``cfg``."""
    C = cfg.lvc_channels
    modules: dict[str, int] = {}
    steps = []
    for ch in cfg.channel_schedule():
        n_a = (ch + 1) // 2
        n_b = ch - n_a
        targets = [LVCTarget(i, C // 2, C, cfg.lvc_kernel_size) for i in range(cfg.lvc_layers_per_flow)]
        parts = {
            "invertible_conv": ch * ch,
            "coupling.start": n_a * C + C,
            "coupling.residual_proj": cfg.lvc_layers_per_flow * ((C // 2) * C + C),
            "coupling.end": C * 2 * n_b + 2 * n_b,
        }
        for name, n in predictor_parameter_count(cfg.stft.n_mels, cfg.kp, targets).items():
            parts[f"predictor.{name}"] = n
        for name, n in parts.items():
            modules[name] = modules.get(name, 0) + n
        steps.append(sum(parts.values()))
    return ParameterCount(sum(steps), modules, steps)


def numel(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def to_tensor(a: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=dtype)

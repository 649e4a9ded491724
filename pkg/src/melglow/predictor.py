"""Kernel predictor: a small conv net that maps mel frames to LVC kernels."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .config import KernelPredictorConfig
from .errors import ConfigError, InputTooShortError, ShapeError
from .lvc import KernelSet

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class LVCTarget:
    """Shape of one LVC layer fed by the predictor."""

    layer_id: int
    out_ch: int
    in_ch: int
    kernel_size: int

    @property
    def coeff_count(self) -> int:
        return 2 * self.out_ch * self.in_ch * self.kernel_size + 2 * self.out_ch


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, kernel_size: int):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv1d(channels, channels, kernel_size, padding=pad)
        self.bn1 = nn.BatchNorm1d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.conv2 = nn.Conv1d(channels, channels, kernel_size, padding=pad)
        self.bn2 = nn.BatchNorm1d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)

    def forward(self, h):
        y = torch.tanh(self.bn1(self.conv1(h)))
        y = torch.tanh(self.bn2(self.conv2(y)))
        return h + y


class KernelPredictor(nn.Module):
    """Entry conv (kernel 2, no padding) -> residual blocks -> per-frame linear.

    Every conv, the entry included, is followed by batch norm and tanh.

    The entry conv consumes one frame, so a mel with ``m`` frames yields
    kernel sets with ``m - 1`` frames, one per hop-sized interval of the
    waveform the mel was computed from.
    """

    def __init__(self, n_mels: int, cfg: KernelPredictorConfig, targets: Sequence[LVCTarget]):
        super().__init__()
        if not targets:
            raise ConfigError("kernel predictor needs at least one target layer")
        self.cfg = cfg
        self.targets = tuple(targets)
        self.n_mels = n_mels
        self.entry = nn.Conv1d(n_mels, cfg.hidden_ch, 2)
        self.entry_bn = nn.BatchNorm1d(cfg.hidden_ch, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.blocks = nn.ModuleList(ResidualBlock(cfg.hidden_ch, cfg.kp_kernel_size) for _ in range(cfg.residual_blocks))
        self.total_coeffs = sum(t.coeff_count for t in self.targets)
        self.output = nn.Linear(cfg.hidden_ch, self.total_coeffs)
        nn.init.zeros_(self.output.weight)
        nn.init.zeros_(self.output.bias)

    def hidden(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.dim() != 3 or mel.shape[1] != self.n_mels:
            raise ShapeError(f"mel must be (B, {self.n_mels}, frames), got {tuple(mel.shape)}")
        if mel.shape[-1] < 2:
            raise InputTooShortError(f"kernel predictor needs >= 2 mel frames, got {mel.shape[-1]}")
        h = torch.tanh(self.entry_bn(self.entry(mel)))
        for block in self.blocks:
            h = block(h)
        return h

    def forward(self, mel: torch.Tensor) -> list[KernelSet]:
        h = self.hidden(mel)  # (B, H, F)
        coeffs = self.output(h.transpose(1, 2))  # (B, F, total)
        if coeffs.shape[-1] != self.total_coeffs:
            raise ConfigError("coefficient count mismatch")
        B, nf, _ = coeffs.shape
        shapes, sizes = [], []
        for t in self.targets:
            kshape = (t.out_ch, t.in_ch, t.kernel_size)
            for shape in (kshape, kshape, (t.out_ch,), (t.out_ch,)):
                shapes.append(shape)
                sizes.append(math.prod(shape))
        # split, not slicing: its backward is one concatenation instead of a
        # full-size zero fill per slice
        parts = [c.reshape(B, nf, *shape) for c, shape in zip(coeffs.split(sizes, dim=-1), shapes)]
        out = [KernelSet(*parts[i : i + 4]) for i in range(0, len(parts), 4)]
        return out


def predictor_parameter_count(n_mels: int, cfg: KernelPredictorConfig, targets: Sequence[LVCTarget]) -> dict:
    H, k = cfg.hidden_ch, cfg.kp_kernel_size
    total = sum(t.coeff_count for t in targets)
    return {
        "entry_conv": n_mels * H * 2 + H,
        "residual_convs": cfg.residual_blocks * 2 * (H * H * k + H),
        "batch_norm": (2 * cfg.residual_blocks + 1) * 2 * H,
        "output_linear": total * H + total,
    }


def predict_kernels(mel: torch.Tensor, predictor: KernelPredictor, mode: str = "eval") -> list[KernelSet]:
    """Run the predictor in ``train`` (batch statistics) or ``eval`` (running statistics) mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    was_training = predictor.training
    predictor.train(mode == "train")
    try:
        return predictor(mel)
    finally:
        predictor.train(was_training)


def predict_kernels_backward(mel: torch.Tensor, predictor: KernelPredictor, grad_kernels: Sequence[KernelSet], mode: str = "train"):
    """Gradients of ``<kernels, grad_kernels>`` w.r.t. the predictor parameters and the mel.

    Returns ``(param_grads, grad_mel)`` where ``param_grads`` maps parameter
    names to tensors. Re-runs the forward pass, so in train mode the
    batch-norm running statistics are updated once more.
    """
    mel = mel.detach().requires_grad_(True)
    kernels = predict_kernels(mel, predictor, mode)
    if len(kernels) != len(grad_kernels):
        raise ShapeError(f"expected {len(kernels)} kernel-set gradients, got {len(grad_kernels)}")
    outputs, upstream = [], []
    for ks, gs in zip(kernels, grad_kernels):
        for t, g in zip(ks, gs):
            if g.shape != t.shape:
                raise ShapeError(f"gradient shape {tuple(g.shape)} does not match kernel shape {tuple(t.shape)}")
            outputs.append(t)
            upstream.append(g)
    names, params = zip(*predictor.named_parameters())
    grads = torch.autograd.grad(outputs, (*params, mel), upstream, allow_unused=True)
    param_grads = {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}
    grad_mel = grads[-1] if grads[-1] is not None else torch.zeros_like(mel)
    return param_grads, grad_mel

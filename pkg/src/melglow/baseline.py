"""WaveGlow-style baseline, present only for parameter accounting.

The coupling net is the usual global-kernel WN block: a 1x1 start conv,
``n_layers`` dilated gated convs with a shared 1x1 conditioning conv over the
upsampled, group-squeezed mel, residual/skip 1x1 convs and a 1x1 end conv.
The mel is upsampled by one transposed conv shared by all flows.
"""
from __future__ import annotations

import torch
from torch import nn

from .config import WaveGlowConfig
from .flow import ParameterCount


class WN(nn.Module):
    def __init__(self, n_in: int, n_cond: int, channels: int, n_layers: int, kernel_size: int):
        super().__init__()
        self.n_layers = n_layers
        self.channels = channels
        self.start = nn.Conv1d(n_in, channels, 1)
        self.cond_layer = nn.Conv1d(n_cond, 2 * channels * n_layers, 1)
        self.in_layers = nn.ModuleList(
            nn.Conv1d(channels, 2 * channels, kernel_size, dilation=2**i, padding=2**i * (kernel_size - 1) // 2)
            for i in range(n_layers)
        )
        self.res_skip = nn.ModuleList(
            nn.Conv1d(channels, 2 * channels if i < n_layers - 1 else channels, 1) for i in range(n_layers)
        )
        self.end = nn.Conv1d(channels, 2 * n_in, 1)

    def forward(self, x, cond):
        h = self.start(x)
        out = torch.zeros_like(h)
        c_all = self.cond_layer(cond)
        C = self.channels
        for i, (conv, rs) in enumerate(zip(self.in_layers, self.res_skip)):
            acts = conv(h) + c_all[:, 2 * C * i : 2 * C * (i + 1)]
            g = torch.tanh(acts[:, :C]) * torch.sigmoid(acts[:, C:])
            r = rs(g)
            if i < self.n_layers - 1:
                h = h + r[:, :C]
                out = out + r[:, C:]
            else:
                out = out + r
        return self.end(out)


class WaveGlowBaseline(nn.Module):
    def __init__(self, cfg: WaveGlowConfig):
        super().__init__()
        self.cfg = cfg
        self.upsample = nn.ConvTranspose1d(cfg.n_mels, cfg.n_mels, cfg.upsample_window, stride=cfg.upsample_stride)
        self.convinv = nn.ModuleList()
        self.wn = nn.ModuleList()
        for ch in _channel_schedule(cfg):
            self.convinv.append(nn.Linear(ch, ch, bias=False))
            self.wn.append(WN(ch // 2, cfg.n_mels * cfg.n_group, cfg.channels, cfg.n_layers, cfg.kernel_size))


def _channel_schedule(cfg: WaveGlowConfig) -> list[int]:
    ch, out = cfg.n_group, []
    for k in range(cfg.n_flows):
        if k > 0 and k % cfg.n_early_every == 0:
            ch -= cfg.n_early_size
        out.append(ch)
    return out


def waveglow_parameter_count(cfg: WaveGlowConfig) -> ParameterCount:
    C, L, K = cfg.channels, cfg.n_layers, cfg.kernel_size
    n_cond = cfg.n_mels * cfg.n_group
    modules = {"upsample": cfg.n_mels * cfg.n_mels * cfg.upsample_window + cfg.n_mels}
    steps = []
    for ch in _channel_schedule(cfg):
        n_half = ch // 2
        parts = {
            "invertible_conv": ch * ch,
            "wn.start": n_half * C + C,
            "wn.cond_layer": n_cond * 2 * C * L + 2 * C * L,
            "wn.in_layers": L * (C * 2 * C * K + 2 * C),
            "wn.res_skip": (L - 1) * (C * 2 * C + 2 * C) + C * C + C,
            "wn.end": C * 2 * n_half + 2 * n_half,
        }
        for name, n in parts.items():
            modules[name] = modules.get(name, 0) + n
        steps.append(sum(parts.values()))
    return ParameterCount(sum(modules.values()), modules, steps)

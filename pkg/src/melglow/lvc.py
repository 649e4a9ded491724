"""Location-variable convolution.

The input sequence is cut into hop-aligned intervals, one per conditioning
frame. Every interval is convolved with its own filter/gate kernel pair and
passed through the gated activation ``tanh(f) * sigmoid(g)``; the interval
outputs are concatenated back into a sequence of the original length.

Kernels are indexed by *output* position: frame ``i`` owns outputs
``[i*hop, (i+1)*hop)``, while the (dilated, centered) taps may read input
from neighbouring intervals. Zero padding is applied only at the ends of the
whole sequence.

Shapes (a leading batch dimension ``B`` is optional everywhere)::

    x    : (B, in_ch, T)              T = frames * hop
    w_f  : (B, frames, out_ch, in_ch, K)
    b_f  : (B, frames, out_ch)
    z    : (B, out_ch, T)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

from .errors import NumericError, ShapeError


@dataclass(frozen=True)
class IntervalMap:
    frame_hop_elems: int
    frame_window_elems: int
    dilation: int = 1

    @classmethod
    def from_stft(cls, hop_length: int, win_length: int, squeeze_channels: int = 8, dilation: int = 1):
        return cls(hop_length // squeeze_channels, win_length // squeeze_channels, dilation)


class KernelSet(NamedTuple):
    w_f: torch.Tensor
    w_g: torch.Tensor
    b_f: torch.Tensor
    b_g: torch.Tensor

    @property
    def num_frames(self) -> int:
        return self.w_f.shape[-4]

    @property
    def out_ch(self) -> int:
        return self.w_f.shape[-3]

    @property
    def in_ch(self) -> int:
        return self.w_f.shape[-2]

    @property
    def kernel_size(self) -> int:
        return self.w_f.shape[-1]

    def batched(self) -> "KernelSet":
        if self.w_f.dim() == 4:
            return KernelSet(*(t.unsqueeze(0) for t in self))
        return self


def _check(x: torch.Tensor, k: KernelSet, imap: IntervalMap) -> None:
    if x.dim() != 3:
        raise ShapeError(f"x must be (B, in_ch, T), got {tuple(x.shape)}")
    B, C, T = x.shape
    if k.w_f.dim() != 5 or k.w_f.shape != k.w_g.shape:
        raise ShapeError("w_f and w_g must share shape (B, frames, out_ch, in_ch, K)")
    kb, nf, oc, ic, K = k.w_f.shape
    if k.b_f.shape != (kb, nf, oc) or k.b_g.shape != (kb, nf, oc):
        raise ShapeError(f"biases must be (B, frames, out_ch) = {(kb, nf, oc)}")
    if kb != B:
        raise ShapeError(f"kernel batch {kb} does not match input batch {B}")
    if ic != C:
        raise ShapeError(f"kernels expect {ic} input channels, x has {C}")
    if K % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {K}")
    if nf * imap.frame_hop_elems != T:
        raise ShapeError(f"{nf} frames x {imap.frame_hop_elems} elems/frame != T={T}")


def _taps(x: torch.Tensor, nf: int, K: int, dilation: int) -> torch.Tensor:
    """(B, C, T) -> (B, frames, C*K, hop); tap j reads x[t + dilation * (j - (K-1)/2)]."""
    B, C, T = x.shape
    pad = dilation * (K - 1) // 2
    xp = F.pad(x, (pad, pad))
    taps = torch.stack([xp[..., j * dilation : j * dilation + T].reshape(B, C, nf, T // nf) for j in range(K)], dim=3)
    return taps.permute(0, 2, 1, 3, 4).reshape(B, nf, C * K, T // nf)


def _fused_weights(k: KernelSet) -> torch.Tensor:
    B, nf, O, C, K = k.w_f.shape
    return torch.cat([k.w_f, k.w_g], dim=2).reshape(B, nf, 2 * O, C * K)


def _preactivations(x, k: KernelSet, imap: IntervalMap):
    """Returns the tap tensor and (filter, gate) pre-activations, each (B, frames, out_ch, hop)."""
    xs = _taps(x, k.num_frames, k.kernel_size, imap.dilation)
    pre = torch.matmul(_fused_weights(k), xs)
    pre_f, pre_g = pre.split(k.out_ch, dim=2)
    return xs, pre_f + k.b_f.unsqueeze(-1), pre_g + k.b_g.unsqueeze(-1)


def _to_sequence(y: torch.Tensor) -> torch.Tensor:
    """(B, frames, O, hop) -> (B, O, frames * hop)."""
    B, nf, O, hop = y.shape
    return y.permute(0, 2, 1, 3).reshape(B, O, nf * hop)


def split_intervals(x: torch.Tensor, imap: IntervalMap, num_frames: int, kernel_size: int = 3) -> list[torch.Tensor]:
    """Input context of every interval.

    Interval ``i`` produces outputs ``[i*hop, (i+1)*hop)``; its context is that
    range widened by ``dilation * (K-1)/2`` on both sides, zero-padded only at
    the sequence ends. Returns one ``(..., in_ch, hop + 2*pad)`` view per frame.
    """
    T = x.shape[-1]
    hop = imap.frame_hop_elems
    if T != num_frames * hop:
        raise ShapeError(f"T={T} is not {num_frames} frames x {hop} elems")
    pad = imap.dilation * (kernel_size - 1) // 2
    xp = F.pad(x, (pad, pad))
    return [xp[..., i * hop : (i + 1) * hop + 2 * pad] for i in range(num_frames)]


def lvc_forward(x: torch.Tensor, k: KernelSet, imap: IntervalMap) -> torch.Tensor:
    """Gated location-variable convolution (no autograd graph through the kernels)."""
    unbatched = x.dim() == 2
    if unbatched:
        x, k = x.unsqueeze(0), k.batched()
    _check(x, k, imap)
    # a non-finite coefficient anywhere makes the sum non-finite
    if not all(torch.isfinite(t.sum()) for t in k):
        raise NumericError("kernel set contains non-finite coefficients")
    _, pre_f, pre_g = _preactivations(x, k, imap)
    z = _to_sequence(torch.tanh(pre_f) * torch.sigmoid(pre_g))
    return z[0] if unbatched else z


def lvc_backward(x: torch.Tensor, k: KernelSet, imap: IntervalMap, grad_z: torch.Tensor):
    """Adjoint of :func:`lvc_forward`.

    Returns ``(grad_x, KernelSet_of_gradients)`` for the upstream gradient
    ``grad_z`` of the output.
    """
    unbatched = x.dim() == 2
    if unbatched:
        x, k, grad_z = x.unsqueeze(0), k.batched(), grad_z.unsqueeze(0)
    _check(x, k, imap)
    if grad_z.shape != (x.shape[0], k.out_ch, x.shape[-1]):
        raise ShapeError(f"grad_z must be {(x.shape[0], k.out_ch, x.shape[-1])}, got {tuple(grad_z.shape)}")
    xs, pre_f, pre_g = _preactivations(x, k, imap)
    grad_x, grads = _adjoint(xs, pre_f, pre_g, k, imap, grad_z)
    if unbatched:
        return grad_x[0], KernelSet(*(g[0] for g in grads))
    return grad_x, grads


def _adjoint(xs, pre_f, pre_g, k: KernelSet, imap: IntervalMap, grad_z):
    B, nf, O, hop = pre_f.shape
    C, K, d = k.in_ch, k.kernel_size, imap.dilation
    T = nf * hop
    tf, sg = torch.tanh(pre_f), torch.sigmoid(pre_g)
    gz = grad_z.reshape(B, O, nf, hop).permute(0, 2, 1, 3)
    g_f = gz * (1 - tf * tf) * sg
    g_g = gz * tf * sg * (1 - sg)
    g = torch.cat([g_f, g_g], dim=2)  # (B, frames, 2*out_ch, hop)

    grad_w = torch.matmul(g, xs.transpose(-1, -2)).reshape(B, nf, 2 * O, C, K)
    grad_wf, grad_wg = grad_w.split(O, dim=2)

    grad_xs = torch.matmul(_fused_weights(k).transpose(-1, -2), g)  # (B, frames, C*K, hop)
    grad_xs = grad_xs.reshape(B, nf, C, K, hop).permute(0, 3, 2, 1, 4).reshape(B, K, C, T)
    pad = d * (K - 1) // 2
    grad_xp = grad_xs.new_zeros(B, C, T + 2 * pad)
    for j in range(K):
        grad_xp[..., j * d : j * d + T] += grad_xs[:, j]
    grad_x = grad_xp[..., pad : pad + T]
    return grad_x, KernelSet(grad_wf, grad_wg, g_f.sum(-1), g_g.sum(-1))


class _LVCFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, w_f, w_g, b_f, b_g, imap):
        k = KernelSet(w_f, w_g, b_f, b_g)
        _check(x, k, imap)
        if not all(torch.isfinite(t.sum()) for t in k):
            raise NumericError("kernel set contains non-finite coefficients")
        xs, pre_f, pre_g = _preactivations(x, k, imap)
        ctx.imap = imap
        ctx.save_for_backward(xs, pre_f, pre_g, w_f, w_g, b_f, b_g)
        return _to_sequence(torch.tanh(pre_f) * torch.sigmoid(pre_g))

    @staticmethod
    def backward(ctx, grad_z):
        xs, pre_f, pre_g, *kernels = ctx.saved_tensors
        grad_x, gk = _adjoint(xs, pre_f, pre_g, KernelSet(*kernels), ctx.imap, grad_z)
        return (grad_x, gk.w_f, gk.w_g, gk.b_f, gk.b_g, None)


def lvc(x: torch.Tensor, k: KernelSet, imap: IntervalMap) -> torch.Tensor:
    """Differentiable :func:`lvc_forward`; gradients come from :func:`lvc_backward`."""
    return _LVCFunction.apply(x, k.w_f, k.w_g, k.b_f, k.b_g, imap)


def lvc_reference(x: torch.Tensor, k: KernelSet, imap: IntervalMap) -> torch.Tensor:
    """Interval-by-interval evaluation with an ordinary dilated ``conv1d`` per frame.

    Slow; used by the verification suite as an independent route to the
    same result as :func:`lvc_forward`.
    """
    unbatched = x.dim() == 2
    if unbatched:
        x, k = x.unsqueeze(0), k.batched()
    _check(x, k, imap)
    outs = []
    for b in range(x.shape[0]):
        pieces = []
        windows = split_intervals(x[b], imap, k.num_frames, k.kernel_size)
        for i, win in enumerate(windows):
            f = F.conv1d(win.unsqueeze(0), k.w_f[b, i], k.b_f[b, i], dilation=imap.dilation)
            g = F.conv1d(win.unsqueeze(0), k.w_g[b, i], k.b_g[b, i], dilation=imap.dilation)
            pieces.append(torch.tanh(f) * torch.sigmoid(g))
        outs.append(torch.cat(pieces, dim=-1)[0])
    z = torch.stack(outs)
    return z[0] if unbatched else z

"""Property suites behind ``melglow verify``.

Every suite returns a :class:`SuiteResult`; the CLI prints them as
tab-separated rows and exits non-zero if any failed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import audio as sig
from .config import FlowConfig, KernelPredictorConfig, STFTConfig
from .flow import MelGlow, count_parameters, numel, perturb_, squeeze_batch, unsqueeze_batch
from .lvc import IntervalMap, KernelSet, lvc_forward, lvc_reference
from .train import gradcheck_suite

SUITES = ("oracle", "gradcheck", "inversion", "logdet", "structure")


@dataclass
class SuiteResult:
    suite: str
    cases: int
    max_error: float
    tolerance: float
    passed: bool
    detail: str = ""

    def row(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{self.suite}\t{self.cases}\t{self.max_error:.3e}\t{self.tolerance:.0e}\t{status}\t{self.detail}"


HEADER = "suite\tcases\tmax_error\ttolerance\tstatus\tdetail"


def random_lvc_instance(rng: np.random.Generator, dtype=torch.float64):
    """Random (x, kernels, map) drawn from the acceptance ranges."""
    in_ch = int(rng.integers(1, 5))
    out_ch = int(rng.integers(1, 5))
    frames = int(rng.integers(1, 9))
    hop = int(rng.integers(1, 256 // frames + 1))
    K = int(rng.choice([1, 3, 5]))
    dilation = int(rng.choice([1, 2, 4]))
    B = int(rng.integers(1, 3))
    T = frames * hop

    def t(*shape):
        return torch.as_tensor(rng.standard_normal(shape), dtype=dtype)

    x = t(B, in_ch, T)
    k = KernelSet(t(B, frames, out_ch, in_ch, K), t(B, frames, out_ch, in_ch, K), t(B, frames, out_ch), t(B, frames, out_ch))
    return x, k, IntervalMap(hop, 4 * hop, dilation)


def oracle_suite(n: int = 100, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        x, k, imap = random_lvc_instance(rng)
        worst = max(worst, float((lvc_forward(x, k, imap) - lvc_reference(x, k, imap)).abs().max()))
    return SuiteResult("oracle", n, worst, 1e-12, worst <= 1e-12, "lvc_forward vs per-interval conv1d")


def _random_inputs(cfg: FlowConfig, frames: int, batch: int, gen: torch.Generator, dtype):
    n = frames * cfg.stft.hop_length
    audio = 0.3 * torch.randn(batch, n, generator=gen, dtype=torch.float64)
    mel = torch.randn(batch, cfg.stft.n_mels, frames + 1, generator=gen, dtype=torch.float64) - 4.0
    return audio.to(dtype), mel.to(dtype)


def inversion_suite(cfg: FlowConfig, draws: int = 10, frames: int = 4, seed: int = 0, scale: float = 0.1) -> list[SuiteResult]:
    """Round-trip error of forward then inverse, float32 and float64.

    Each draw builds one model and runs it at both precisions.
    """
    dtypes = ((torch.float32, 1e-4), (torch.float64, 1e-10))
    worst = {dtype: 0.0 for dtype, _ in dtypes}
    for d in range(draws):
        base = perturb_(MelGlow(cfg, seed=seed + d), scale, seed=seed + d).eval()
        for dtype, _ in dtypes:
            model = base.to(dtype)
            gen = torch.Generator().manual_seed(seed + d)
            audio, mel = _random_inputs(cfg, frames, 2, gen, dtype)
            with torch.no_grad():
                rec = model.inverse(model(audio, mel).z, mel)
            worst[dtype] = max(worst[dtype], float((rec - audio).abs().max()))
    out = []
    for dtype, tol in dtypes:
        name = "float32" if dtype == torch.float32 else "float64"
        out.append(SuiteResult(f"inversion[{name}]", draws, worst[dtype], tol, worst[dtype] <= tol, f"{cfg.n_flows} flows"))
    return out


def logdet_config() -> FlowConfig:
    """A 32-dimensional flow: 4-channel squeeze, 8 squeezed steps."""
    return FlowConfig(
        n_flows=4,
        n_early_every=2,
        n_early_size=1,
        squeeze_channels=4,
        lvc_layers_per_flow=3,
        lvc_channels=4,
        kp=KernelPredictorConfig(hidden_ch=4, residual_blocks=1, kp_kernel_size=3),
        stft=STFTConfig(sample_rate=8000, fft_size=32, win_length=32, hop_length=16, n_mels=6, fmin=60.0, fmax=3000.0),
    )


def numeric_log_det(model: MelGlow, audio: torch.Tensor, mel: torch.Tensor, eps: float = 1e-6) -> float:
    """log|det J| of audio -> concatenated latents, J from central differences."""
    def f(a):
        with torch.no_grad():
            return torch.cat([z.reshape(-1) for z in model(a.unsqueeze(0), mel).z])

    n = audio.shape[-1]
    J = torch.empty(n, n, dtype=torch.float64)
    for i in range(n):
        e = torch.zeros(n, dtype=torch.float64)
        e[i] = eps
        J[:, i] = (f(audio + e) - f(audio - e)) / (2 * eps)
    return float(torch.linalg.slogdet(J)[1])


def logdet_suite(draws: int = 5, seed: int = 0, scale: float = 0.3) -> SuiteResult:
    cfg = logdet_config()
    worst = 0.0
    for d in range(draws):
        model = perturb_(MelGlow(cfg, seed=seed + d), scale, seed=seed + d).double().eval()
        gen = torch.Generator().manual_seed(seed + d)
        audio, mel = _random_inputs(cfg, 2, 1, gen, torch.float64)
        with torch.no_grad():
            analytic = float(model(audio, mel).log_det[0])
        numeric = numeric_log_det(model, audio[0], mel)
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1.0))
    return SuiteResult("logdet", draws, worst, 1e-5, worst <= 1e-5, "32-dim instance, finite-difference Jacobian")


def gradcheck_results(cfg: FlowConfig, seed: int = 0, frames: int = 2) -> list[SuiteResult]:
    out = []
    for label, scale, tol in (("zero-init", 0.0, 1e-6), ("randomized", 0.1, 1e-5)):
        model = MelGlow(cfg, seed=seed).double()
        if scale:
            perturb_(model, scale, seed=seed)
        gen = torch.Generator().manual_seed(seed)
        audio, mel = _random_inputs(cfg, frames, 2, gen, torch.float64)
        report = gradcheck_suite(model, audio, mel, tolerance=tol, seed=seed)
        out.append(SuiteResult(f"gradcheck[{label}]", len(report.entries), report.max_rel_err, tol, report.passed, report.summary()))
    return out


def structure_suite(cfg: FlowConfig, seed: int = 0) -> SuiteResult:
    """Exact structural invariants; error is the number of violated checks."""
    problems = []
    cases = 0
    gen = torch.Generator().manual_seed(seed)
    frames = 3
    model = MelGlow(cfg, seed=seed).double().eval()
    audio, mel = _random_inputs(cfg, frames, 1, gen, torch.float64)
    with torch.no_grad():
        out = model(audio, mel)
    total = sum(z.numel() for z in out.z)
    cases += 1
    if total != audio.numel():
        problems.append(f"latent elements {total} != input elements {audio.numel()}")
    expected = []
    ch = cfg.squeeze_channels
    for k in range(cfg.n_flows):
        if cfg.is_early_step(k):
            ch -= cfg.n_early_size
        expected.append(ch)
    cases += 1
    if [c.weight.shape[0] for c in model.convinv] != expected:
        problems.append("working channel schedule does not match early-output bookkeeping")
    kernels = model.couplings[0].predictor(mel)
    cases += 1
    if kernels[0].num_frames != mel.shape[-1] - 1:
        problems.append("kernel frames != mel frames - 1")
    cases += 1
    if kernels[0].num_frames * cfg.frame_hop_elems != audio.shape[-1] // cfg.squeeze_channels:
        problems.append("kernel frames do not tile the squeezed sequence")
    for n in (cfg.squeeze_channels, 64 * cfg.squeeze_channels, 22016):
        if n % cfg.squeeze_channels:
            continue
        cases += 1
        x = torch.randn(2, n, generator=gen, dtype=torch.float64)
        if not torch.equal(unsqueeze_batch(squeeze_batch(x, cfg.squeeze_channels)), x):
            problems.append(f"squeeze round trip not exact at length {n}")
        w = sig.Waveform(x[0].numpy(), cfg.stft.sample_rate)
        if not np.array_equal(sig.unsqueeze(sig.squeeze(w, cfg.squeeze_channels)).samples, w.samples):
            problems.append(f"numpy squeeze round trip not exact at length {n}")
    cases += 1
    if count_parameters(cfg).total != numel(model):
        problems.append("closed-form parameter count differs from the module walk")
    return SuiteResult("structure", cases, float(len(problems)), 0.0, not problems, "; ".join(problems) or "all exact")


def run_suites(names, cfg: FlowConfig) -> list[SuiteResult]:
    if "all" in names:
        names = SUITES
    results: list[SuiteResult] = []
    for name in names:
        if name == "oracle":
            results.append(oracle_suite())
        elif name == "gradcheck":
            results += gradcheck_results(cfg)
        elif name == "inversion":
            results += inversion_suite(cfg)
        elif name == "logdet":
            results.append(logdet_suite())
        elif name == "structure":
            results.append(structure_suite(cfg))
        else:
            raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)} or all")
    return results

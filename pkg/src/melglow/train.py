"""Maximum-likelihood training: data pipeline, optimizer, schedule, gradient checks."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import audio as sig
from .checkpoint import Checkpoint, load_checkpoint, load_model_tensors, model_tensors, save_checkpoint
from .config import ConfigFile, FlowConfig, TrainConfig
from .errors import NumericError, TrainingDivergedError
from .flow import MelGlow

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


# --------------------------------------------------------------------------- optimizer

class SafeAdam(torch.optim.Adam):
    """Adam that skips (and counts) steps whose gradients are not finite."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, lr=lr, betas=betas, eps=eps)
        self.skipped = 0

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    self.skipped += 1
                    log.warning("non-finite gradient, skipping optimizer step (%d skipped so far)", self.skipped)
                    return None
        return super().step(closure)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], optimizer: SafeAdam, lr: Optional[float] = None) -> bool:
    """Apply one Adam update with explicit gradients; returns False if the step was skipped."""
    for p, g in zip(params, grads):
        p.grad = g.detach().clone()
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    before = optimizer.skipped
    optimizer.step()
    return optimizer.skipped == before


# --------------------------------------------------------------------------- data

@dataclass
class Clip:
    waveform: sig.Waveform
    partials: tuple = ()


def make_synthetic_dataset(n_clips: int, seed: int = 0, sample_rate: int = 22050, seconds: float = 1.2) -> list[Clip]:
    """Sums of 2-4 amplitude-modulated sine partials plus low-level noise.

    Each clip is peak-normalised to 0.9 and records its partial frequencies.
    """
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    clips = []
    for _ in range(n_clips):
        count = int(rng.integers(2, 5))
        freqs: list[float] = []
        while len(freqs) < count:
            f = float(rng.uniform(100.0, 4000.0))
            if all(abs(f - g) > 60.0 for g in freqs):
                freqs.append(f)
        x = np.zeros(n)
        for f in freqs:
            x += rng.uniform(0.4, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        envelope = 1.0 + rng.uniform(0.1, 0.5) * np.sin(2 * np.pi * rng.uniform(0.5, 3.0) * t + rng.uniform(0, 2 * np.pi))
        x = x * envelope + 0.01 * rng.standard_normal(n)
        x *= 0.9 / np.max(np.abs(x))
        clips.append(Clip(sig.Waveform(x, sample_rate), tuple(sorted(freqs))))
    return clips


def clip_samples(flow: FlowConfig, train: TrainConfig) -> int:
    """Crop length: the largest multiple of the hop that fits in ``clip_seconds``."""
    hop = flow.stft.hop_length
    return int(train.clip_seconds * flow.stft.sample_rate) // hop * hop


def make_batch(dataset: Sequence[Clip], flow: FlowConfig, train: TrainConfig, rng: np.random.Generator):
    """Random crops plus their mels: ``(audio (B, n), mel (B, n_mels, n // hop + 1))``."""
    n = clip_samples(flow, train)
    usable = [c for c in dataset if len(c.waveform) >= n]
    if len(usable) < len(dataset):
        log.warning("skipping %d clip(s) shorter than %d samples", len(dataset) - len(usable), n)
    if not usable:
        raise ValueError(f"no clip is at least {n} samples long")
    audio, mels = [], []
    for _ in range(train.batch_size):
        clip = usable[int(rng.integers(len(usable)))]
        start = int(rng.integers(len(clip.waveform) - n + 1))
        crop = sig.Waveform(clip.waveform.samples[start : start + n], clip.waveform.sample_rate)
        audio.append(crop.samples)
        mels.append(sig.compute_mel(crop, flow.stft).values.T)
    return np.stack(audio), np.stack(mels)


# --------------------------------------------------------------------------- training loop

@dataclass
class StepRecord:
    step: int
    nll: float
    bpd: float
    gnorm: float
    lr: float

    def line(self) -> str:
        return f"step={self.step} nll={self.nll!r} bpd={self.bpd!r} gnorm={self.gnorm!r} lr={self.lr!r}"


def parse_metrics_line(line: str) -> StepRecord:
    fields = dict(kv.split("=", 1) for kv in line.split())
    return StepRecord(int(fields["step"]), float(fields["nll"]), float(fields["bpd"]), float(fields["gnorm"]), float(fields["lr"]))


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    valid: list = field(default_factory=list)  # (step, nll)
    checkpoint: Optional[Path] = None


class Trainer:
    def __init__(self, model: MelGlow, dataset: Sequence[Clip], cfg: TrainConfig, valid: Optional[Sequence[Clip]] = None):
        self.model = model.to(DTYPES[cfg.dtype])
        self.dataset = list(dataset)
        self.cfg = cfg
        self.flow_cfg = model.cfg
        self.optimizer = SafeAdam(model.parameters(), lr=cfg.lr)
        self.scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            self.optimizer,
            mode="min",
            factor=cfg.lr_plateau / cfg.lr,
            patience=cfg.plateau_patience - 1,
            min_lr=cfg.lr_plateau,
        )
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.bad_losses = 0
        vrng = np.random.default_rng(cfg.seed + 1)
        self.valid_batch = make_batch(list(valid) if valid else self.dataset, self.flow_cfg, cfg, vrng)

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def _tensors(self, batch):
        dt = DTYPES[self.cfg.dtype]
        return torch.as_tensor(batch[0], dtype=dt), torch.as_tensor(batch[1], dtype=dt)

    def train_step(self) -> StepRecord:
        self.model.train()
        audio, mel = self._tensors(make_batch(self.dataset, self.flow_cfg, self.cfg, self.rng))
        self.step += 1
        self.optimizer.zero_grad()
        try:
            out = self.model(audio, mel)
            loss = out.nll
            finite = bool(torch.isfinite(loss))
        except NumericError as exc:
            log.warning("step %d: %s", self.step, exc)
            finite, loss = False, None
        if not finite:
            self.bad_losses += 1
            if self.bad_losses >= 3:
                raise TrainingDivergedError(f"non-finite loss for 3 consecutive steps (last at step {self.step})")
            return StepRecord(self.step, math.nan, math.nan, math.nan, self.lr)
        self.bad_losses = 0
        loss.backward()
        gnorm = float(torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip_norm))
        saved = [c.weight.detach().clone() for c in self.model.convinv]
        self.optimizer.step()
        with torch.no_grad():
            for conv, w in zip(self.model.convinv, saved):
                if abs(float(torch.det(conv.weight))) < 1e-12:
                    log.warning("step %d: 1x1 conv became singular, rejecting its update", self.step)
                    conv.weight.copy_(w)
        nll = float(loss.detach())
        return StepRecord(self.step, nll, nll / math.log(2), gnorm, self.lr)

    @torch.no_grad()
    def evaluate(self) -> float:
        self.model.eval()
        return float(self.model(*self._tensors(self.valid_batch)).nll)

    def observe_validation(self, nll: float) -> None:
        self.scheduler.step(nll)

    # -- persistence -------------------------------------------------------

    def state(self) -> dict:
        return {
            "step": self.step,
            "bad_losses": self.bad_losses,
            "skipped": self.optimizer.skipped,
            "rng": self.rng.bit_generator.state,
            "scheduler": self.scheduler.state_dict(),
            "adam_steps": {n: float(self.optimizer.state[p]["step"]) for n, p in self.model.named_parameters() if p in self.optimizer.state},
        }

    def optimizer_tensors(self) -> dict:
        out = {}
        for name, p in self.model.named_parameters():
            st = self.optimizer.state.get(p)
            if st:
                out[f"exp_avg.{name}"] = st["exp_avg"]
                out[f"exp_avg_sq.{name}"] = st["exp_avg_sq"]
        return out

    def save(self, path, config: ConfigFile) -> None:
        save_checkpoint(path, config, model_tensors(self.model), self.state(), self.optimizer_tensors())

    def restore(self, ckpt: Checkpoint) -> None:
        load_model_tensors(self.model, ckpt.tensors)
        st = ckpt.state or {}
        self.step = st.get("step", 0)
        self.bad_losses = st.get("bad_losses", 0)
        self.optimizer.skipped = st.get("skipped", 0)
        if "rng" in st:
            self.rng.bit_generator.state = st["rng"]
        if "scheduler" in st:
            self.scheduler.load_state_dict(st["scheduler"])
            for group in self.optimizer.param_groups:
                group["lr"] = self.scheduler._last_lr[0]
        dt = DTYPES[self.cfg.dtype]
        opt = ckpt.optimizer or {}
        for name, p in self.model.named_parameters():
            if f"exp_avg.{name}" in opt:
                self.optimizer.state[p] = {
                    "step": torch.tensor(st["adam_steps"][name]),
                    "exp_avg": torch.as_tensor(opt[f"exp_avg.{name}"], dtype=dt).clone(),
                    "exp_avg_sq": torch.as_tensor(opt[f"exp_avg_sq.{name}"], dtype=dt).clone(),
                }


def train(
    model: MelGlow,
    dataset: Sequence[Clip],
    cfg: TrainConfig,
    out_dir=None,
    valid: Optional[Sequence[Clip]] = None,
    resume=None,
    max_steps: Optional[int] = None,
    config: Optional[ConfigFile] = None,
    on_step: Optional[Callable[[StepRecord], None]] = None,
) -> TrainResult:
    """Train ``model`` for ``max_steps`` (default ``cfg.max_steps``) steps.

    With ``out_dir`` set, metrics go to ``out_dir/metrics.log`` and
    checkpoints to ``out_dir/ckpt_<step>.mgck`` plus ``out_dir/final.mgck``.
    """
    trainer = Trainer(model, dataset, cfg, valid)
    config = config or ConfigFile(flow=model.cfg, train=cfg)
    if resume is not None:
        trainer.restore(resume if isinstance(resume, Checkpoint) else load_checkpoint(resume))
    total = cfg.max_steps if max_steps is None else max_steps
    result = TrainResult()
    metrics = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = open(out_dir / "metrics.log", "a" if resume is not None else "w")
    try:
        while trainer.step < total:
            rec = trainer.train_step()
            result.history.append(rec)
            if on_step is not None:
                on_step(rec)
            if metrics is not None and (rec.step % cfg.log_every == 0 or rec.step == 1 or rec.step == total):
                metrics.write(rec.line() + "\n")
                metrics.flush()
            if rec.step % cfg.eval_every == 0:
                v = trainer.evaluate()
                result.valid.append((rec.step, v))
                trainer.observe_validation(v)
                log.info("step %d valid nll %.4f lr %.2e", rec.step, v, trainer.lr)
            if out_dir is not None and cfg.checkpoint_every and rec.step % cfg.checkpoint_every == 0:
                trainer.save(out_dir / f"ckpt_{rec.step}.mgck", config)
        if out_dir is not None:
            result.checkpoint = out_dir / "final.mgck"
            trainer.save(result.checkpoint, config)
    finally:
        if metrics is not None:
            metrics.close()
    return result


def build_model(flow: FlowConfig, train: TrainConfig) -> MelGlow:
    return MelGlow(flow, seed=train.seed).to(DTYPES[train.dtype])


def model_from_checkpoint(ckpt: Checkpoint, dtype=torch.float32) -> MelGlow:
    model = MelGlow(ckpt.config.flow, seed=None).to(dtype)
    load_model_tensors(model, ckpt.tensors)
    model.eval()
    return model


# --------------------------------------------------------------------------- gradient checks

@dataclass
class GradcheckEntry:
    tensor: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradcheckReport:
    entries: list
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def failures(self) -> list:
        return [e for e in self.entries if e.rel_err > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        if self.passed:
            return f"gradcheck passed: {len(self.entries)} coordinates, max rel err {self.max_rel_err:.3e}"
        worst = max(self.failures, key=lambda e: e.rel_err)
        return (
            f"gradcheck FAILED: {len(self.failures)}/{len(self.entries)} coordinates above {self.tolerance:g}; "
            f"worst {worst.tensor}{list(worst.index)} analytic={worst.analytic:.6e} numeric={worst.numeric:.6e}"
        )


def gradcheck_suite(
    model: MelGlow,
    audio: torch.Tensor,
    mel: torch.Tensor,
    selector: str | Callable[[str], bool] | None = None,
    tolerance: float = 1e-6,
    coords_per_tensor: int = 5,
    eps: float = 1e-6,
    abs_floor: float = 1e-4,
    seed: int = 0,
) -> GradcheckReport:
    """Compare analytic NLL gradients with central differences.

    ``model`` should be float64. For each selected parameter tensor,
    ``coords_per_tensor`` random coordinates are probed. The error of a
    coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``; the floor keeps
    exactly-zero gradients (e.g. behind a zero-initialised layer) from
    producing 0/0.
    """
    if isinstance(selector, str):
        pattern = re.compile(selector)
        select = lambda name: bool(pattern.search(name))  # noqa: E731
    else:
        select = selector or (lambda name: True)
    model.train()
    audio = audio.to(model.dtype)
    mel = mel.to(model.dtype)
    model.zero_grad()
    model(audio, mel).nll.backward()
    rng = np.random.default_rng(seed)
    entries = []
    for name, p in model.named_parameters():
        if not select(name):
            continue
        grad = p.grad.reshape(-1)
        count = min(coords_per_tensor, p.numel())
        for i in rng.choice(p.numel(), size=count, replace=False):
            idx = tuple(int(j) for j in np.unravel_index(int(i), tuple(p.shape)))
            orig = p.data[idx].item()
            with torch.no_grad():
                p.data[idx] = orig + eps
                up = float(model(audio, mel).nll)
                p.data[idx] = orig - eps
                down = float(model(audio, mel).nll)
                p.data[idx] = orig
            numeric = (up - down) / (2 * eps)
            analytic = float(grad[int(i)])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
            entries.append(GradcheckEntry(name, idx, analytic, numeric, err))
    return GradcheckReport(entries, tolerance)

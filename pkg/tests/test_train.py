import dataclasses
import logging
import math

import numpy as np
import pytest
import torch
from scipy.signal import find_peaks

import melglow.lvc as lvc_mod
from melglow.checkpoint import load_checkpoint
from melglow.config import PRESETS, ConfigFile, FlowConfig, KernelPredictorConfig, TrainConfig
from melglow.errors import TrainingDivergedError
from melglow.flow import MelGlow, perturb_
from melglow.train import (
    SafeAdam,
    StepRecord,
    Trainer,
    adam_step,
    clip_samples,
    gradcheck_suite,
    make_batch,
    make_synthetic_dataset,
    model_from_checkpoint,
    parse_metrics_line,
    train,
)
from melglow.verify import logdet_config

TINY = PRESETS["tiny"]()
# small crops keep the loop tests fast; the flow itself is the tiny preset
FAST = dataclasses.replace(TINY.train, batch_size=2, clip_seconds=0.1, eval_every=3, log_every=1)


@pytest.fixture(scope="module")
def clips():
    return make_synthetic_dataset(3, seed=0)


# --------------------------------------------------------------------------- Adam

def test_adam_zero_gradient():
    p = torch.nn.Parameter(torch.tensor([1.5, -2.0]))
    opt = SafeAdam([p], lr=0.1)
    assert adam_step([p], [torch.zeros(2)], opt)
    assert torch.equal(p.data, torch.tensor([1.5, -2.0]))
    assert int(opt.state[p]["step"]) == 1


def test_adam_first_step_is_lr():
    p = torch.nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
    opt = SafeAdam([p], lr=0.1)
    adam_step([p], [torch.ones(1, dtype=torch.float64)], opt)
    # m_hat = 1, v_hat = 1  ->  step = lr * 1 / (1 + eps)
    assert abs(float(p.detach()) + 0.1 / (1 + 1e-8)) <= 1e-15


def test_adam_matches_closed_form_sequence():
    p = torch.nn.Parameter(torch.tensor([0.3], dtype=torch.float64))
    opt = SafeAdam([p], lr=0.01)
    x, m, v = 0.3, 0.0, 0.0
    for t in range(1, 6):
        g = 2 * x - 1
        adam_step([p], [torch.tensor([g], dtype=torch.float64)], opt)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert abs(float(p.detach()) - x) <= 1e-15


def test_adam_skips_non_finite(caplog):
    p = torch.nn.Parameter(torch.tensor([1.0]))
    opt = SafeAdam([p], lr=0.1)
    with caplog.at_level(logging.WARNING):
        assert not adam_step([p], [torch.tensor([float("nan")])], opt)
    assert float(p.detach()) == 1.0 and opt.skipped == 1
    assert "skipping" in caplog.text


def test_adam_determinism():
    def run():
        torch.manual_seed(0)
        p = torch.nn.Parameter(torch.randn(5))
        opt = SafeAdam([p], lr=0.05)
        g = torch.Generator().manual_seed(1)
        for _ in range(10):
            adam_step([p], [torch.randn(5, generator=g)], opt)
        return p.data.clone()

    assert torch.equal(run(), run())


# --------------------------------------------------------------------------- data

def test_crop_and_frame_arithmetic(clips):
    assert clip_samples(TINY.flow, TINY.train) == 22016
    rng = np.random.default_rng(0)
    audio, mel = make_batch(clips, TINY.flow, TINY.train, rng)
    assert audio.shape == (8, 22016)
    assert mel.shape == (8, 80, 87)
    model = MelGlow(TINY.flow, seed=0)
    kernels = model.couplings[0].predictor(torch.as_tensor(mel[:1], dtype=torch.float32))
    assert kernels[0].num_frames == 86
    assert kernels[0].num_frames * 32 == 22016 // 8


def test_single_item_gives_independent_crops():
    ds = make_synthetic_dataset(1, seed=4)
    audio, _ = make_batch(ds, TINY.flow, TINY.train, np.random.default_rng(0))
    assert len({a[:16].tobytes() for a in audio}) == 8


def test_batch_reproducible(clips):
    a = make_batch(clips, TINY.flow, FAST, np.random.default_rng(9))
    b = make_batch(clips, TINY.flow, FAST, np.random.default_rng(9))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_batch_skips_short_clips(clips, caplog):
    short = make_synthetic_dataset(1, seed=1, seconds=0.5)
    with caplog.at_level(logging.WARNING):
        audio, _ = make_batch(list(clips) + short, TINY.flow, TINY.train, np.random.default_rng(0))
    assert "skipping 1 clip" in caplog.text
    assert audio.shape == (8, 22016)
    with pytest.raises(ValueError):
        make_batch(short, TINY.flow, TINY.train, np.random.default_rng(0))


def test_synthetic_dataset_deterministic():
    a, b = make_synthetic_dataset(4, seed=11), make_synthetic_dataset(4, seed=11)
    assert all(x.waveform.samples.tobytes() == y.waveform.samples.tobytes() for x, y in zip(a, b))
    assert a[0].waveform.samples.tobytes() != make_synthetic_dataset(1, seed=12)[0].waveform.samples.tobytes()


def test_synthetic_dataset_shape_and_peak():
    for clip in make_synthetic_dataset(6, seed=2):
        w = clip.waveform
        assert len(w) == 26460 and w.sample_rate == 22050
        assert abs(np.max(np.abs(w.samples)) - 0.9) <= 1e-12
        assert 2 <= len(clip.partials) <= 4
        assert all(100 <= f <= 4000 for f in clip.partials)


def test_synthetic_dataset_spectral_peaks():
    for clip in make_synthetic_dataset(6, seed=3):
        x = clip.waveform.samples
        spec = np.abs(np.fft.rfft(x))
        bin_hz = 22050 / len(x)
        peaks, _ = find_peaks(spec, distance=int(30 / bin_hz))
        top = peaks[np.argsort(spec[peaks])[::-1][: len(clip.partials)]]
        for f in clip.partials:
            assert np.min(np.abs(top - f / bin_hz)) <= 2


def test_synthetic_dataset_rejects_empty():
    with pytest.raises(ValueError):
        make_synthetic_dataset(0)


# --------------------------------------------------------------------------- metrics

def test_metrics_line_round_trip():
    rec = StepRecord(12, -0.123456789012345, -0.178, 3.5, 1e-4)
    line = rec.line()
    assert line.startswith("step=12 nll=")
    assert parse_metrics_line(line) == rec


def test_bpd_reconstructs_nats(clips):
    trainer = Trainer(MelGlow(TINY.flow, seed=0), clips, FAST)
    rec = trainer.train_step()
    assert abs(rec.bpd * math.log(2) - rec.nll) <= 1e-9


# --------------------------------------------------------------------------- loop

def test_lr_drops_after_patience(clips):
    trainer = Trainer(MelGlow(TINY.flow, seed=0), clips, FAST)
    lrs = []
    for _ in range(8):
        trainer.observe_validation(1.0)
        lrs.append(trainer.lr)
    # first evaluation sets the best; five more without improvement trigger the drop
    assert lrs[:5] == [1e-3] * 5
    assert lrs[5:] == [5e-4] * 3


def test_default_lr_schedule():
    cfg = TrainConfig()
    trainer = Trainer(MelGlow(TINY.flow, seed=0), make_synthetic_dataset(1), dataclasses.replace(cfg, batch_size=1, clip_seconds=0.1))
    for _ in range(6):
        trainer.observe_validation(2.0)
    assert trainer.lr == 5e-5


def test_gradient_clipping_keeps_direction(clips):
    model = perturb_(MelGlow(TINY.flow, seed=0), 0.1)
    audio, mel = (torch.as_tensor(a, dtype=torch.float32) for a in make_batch(clips, TINY.flow, FAST, np.random.default_rng(0)))
    model(audio, mel).nll.backward()
    before = torch.cat([p.grad.flatten() for p in model.parameters()]).clone()
    norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), 1e-3))
    after = torch.cat([p.grad.flatten() for p in model.parameters()])
    assert norm > 1e-3
    # torch divides by (norm + 1e-6)
    assert abs(float(after.norm()) - 1e-3) <= 1e-4 * 1e-3
    cos = float(torch.dot(before.double(), after.double()) / (before.double().norm() * after.double().norm()))
    assert abs(cos - 1.0) <= 1e-6


def test_training_is_deterministic(clips, tmp_path):
    logs = []
    for run in ("a", "b"):
        train(MelGlow(TINY.flow, seed=0), clips, FAST, out_dir=tmp_path / run, max_steps=4)
        logs.append((tmp_path / run / "metrics.log").read_text())
    assert logs[0] == logs[1]
    assert len(logs[0].splitlines()) == 4


def test_resume_matches_uninterrupted(clips, tmp_path):
    cfg = dataclasses.replace(FAST, checkpoint_every=3)
    full = train(MelGlow(TINY.flow, seed=0), clips, cfg, out_dir=tmp_path / "full", max_steps=6)
    part = train(MelGlow(TINY.flow, seed=0), clips, cfg, out_dir=tmp_path / "part", max_steps=3)
    rest = train(MelGlow(TINY.flow, seed=0), clips, cfg, out_dir=tmp_path / "part", max_steps=6, resume=part.checkpoint)
    assert [r.step for r in rest.history] == [4, 5, 6]
    assert [r.nll for r in rest.history] == [r.nll for r in full.history[3:]]
    assert (tmp_path / "full" / "ckpt_3.mgck").exists()
    assert (tmp_path / "part" / "metrics.log").read_text() == (tmp_path / "full" / "metrics.log").read_text()


def test_checkpoint_round_trip_bitwise(clips, tmp_path):
    result = train(MelGlow(TINY.flow, seed=0), clips, FAST, out_dir=tmp_path, max_steps=3)
    ckpt = load_checkpoint(result.checkpoint)
    assert ckpt.config == ConfigFile(flow=TINY.flow, train=FAST)
    assert ckpt.state["step"] == 3
    reloaded = model_from_checkpoint(ckpt)
    original = MelGlow(TINY.flow, seed=0)
    trainer = Trainer(original, clips, FAST)
    trainer.restore(ckpt)
    batch = [torch.as_tensor(a, dtype=torch.float32) for a in make_batch(clips, TINY.flow, FAST, np.random.default_rng(5))]
    with torch.no_grad():
        assert float(reloaded(*batch).nll) == float(original.eval()(*batch).nll)


def test_divergence_aborts(clips):
    model = MelGlow(TINY.flow, seed=0)
    with torch.no_grad():
        model.couplings[0].end.bias.fill_(float("nan"))
    trainer = Trainer(model, clips, FAST)
    assert math.isnan(trainer.train_step().nll)
    assert math.isnan(trainer.train_step().nll)
    with pytest.raises(TrainingDivergedError):
        trainer.train_step()


def test_overfit_small_model():
    # 2 flows, 8 LVC channels, predictor hidden 8; one synthetic clip
    flow = FlowConfig(n_flows=2, n_early_every=4, lvc_channels=8, kp=KernelPredictorConfig(hidden_ch=8, residual_blocks=1))
    cfg = dataclasses.replace(TINY.train, batch_size=2, clip_seconds=0.25, eval_every=1000)
    result = train(MelGlow(flow, seed=0), make_synthetic_dataset(1, seed=0), cfg, max_steps=500)
    first, last = result.history[0].nll, np.mean([r.nll for r in result.history[-10:]])
    assert all(math.isfinite(r.nll) for r in result.history)
    assert first - last >= 0.3 * abs(first)


# --------------------------------------------------------------------------- gradcheck harness

def _small_model(scale):
    model = MelGlow(logdet_config(), seed=0).double()
    if scale:
        perturb_(model, scale, seed=0)
    g = torch.Generator().manual_seed(0)
    audio = 0.3 * torch.randn(2, 64, generator=g, dtype=torch.float64)
    mel = torch.randn(2, 6, 5, generator=g, dtype=torch.float64) - 4.0
    return model, audio, mel


def test_gradcheck_zero_init():
    report = gradcheck_suite(*_small_model(0.0), tolerance=1e-6)
    assert report.passed, report.summary()
    assert len({e.tensor for e in report.entries}) == len(list(_small_model(0.0)[0].parameters()))


def test_gradcheck_randomized():
    report = gradcheck_suite(*_small_model(0.2), tolerance=1e-5)
    assert report.passed, report.summary()


def test_gradcheck_selector():
    report = gradcheck_suite(*_small_model(0.2), selector=r"convinv")
    assert {e.tensor for e in report.entries} == {f"convinv.{k}.weight" for k in range(4)}


def test_gradcheck_detects_corrupted_adjoint(monkeypatch):
    real = lvc_mod._adjoint

    def corrupted(*args):
        grad_x, grads = real(*args)
        return 1.1 * grad_x, grads

    monkeypatch.setattr(lvc_mod, "_adjoint", corrupted)
    report = gradcheck_suite(*_small_model(0.2), tolerance=1e-5)
    assert not report.passed
    assert "FAILED" in report.summary()
    assert report.failures[0].tensor in {n for n, _ in _small_model(0.2)[0].named_parameters()}

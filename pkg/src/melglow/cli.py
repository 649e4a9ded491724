"""``melglow`` command line.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import torch

from . import audio as sig
from .baseline import waveglow_parameter_count
from .checkpoint import load_checkpoint
from .config import ConfigFile, load_config
from .errors import CheckpointError, ConfigError, MelCacheError, MelGlowError, WavFormatError
from .flow import count_parameters
from .train import Clip, build_model, make_synthetic_dataset, model_from_checkpoint, parse_metrics_line, train
from .verify import HEADER, SUITES, run_suites

log = logging.getLogger("melglow")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

# published parameter totals, for the bench comparison column
PUBLISHED = {
    "melglow-32": 19.3e6,
    "melglow-48": 40.4e6,
    "melglow-64": 71.3e6,
    "melglow-128": 294.3e6,
    "melglow-kp-32c": 10.5e6,
    "melglow-kp-64c": 19.3e6,
    "melglow-kp-128c": 38.6e6,
    "melglow-kp-1l": 18.1e6,
    "melglow-kp-3l": 19.3e6,
    "melglow-kp-5l": 20.6e6,
    "waveglow-64": 17.59e6,
    "waveglow-128": 34.83e6,
    "waveglow-256": 87.87e6,
    "waveglow-512": 268.29e6,
}
DEFAULT_BENCH = ["melglow-32", "melglow-kp-32c", "melglow-kp-128c", "melglow-kp-1l", "melglow-kp-5l",
                 "waveglow-64", "waveglow-128", "waveglow-256", "waveglow-512"]


class IOFailure(MelGlowError):
    """Raised for conditions that map to exit code 3."""


# --------------------------------------------------------------------------- preprocess

def _preprocess_one(args):
    src, dst, stft = args
    try:
        w = sig.read_wav(src)
    except (OSError, WavFormatError) as exc:
        return src.name, None, str(exc)
    if w.sample_rate != stft.sample_rate:
        return src.name, None, f"sample rate {w.sample_rate} != {stft.sample_rate}"
    if len(w) == 0:
        return src.name, None, "no samples"
    m = sig.compute_mel(w, stft)
    sig.save_mel(dst, m)
    return src.name, (len(w), m.values.shape[0]), None


def cmd_preprocess(args) -> int:
    cfg = load_config(args.config)
    src, out = Path(args.input), Path(args.out)
    if not src.is_dir():
        raise IOFailure(f"input directory {src} does not exist")
    wavs = sorted(p for p in src.iterdir() if p.suffix.lower() == ".wav")
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(p, out / (p.stem + ".mel"), cfg.flow.stft) for p in wavs]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_preprocess_one, jobs))
    else:
        results = [_preprocess_one(j) for j in jobs]
    rows = []
    for name, info, err in results:
        if err is not None:
            log.warning("skipping %s: %s", name, err)
            continue
        n, frames = info
        rows.append(f"{Path(name).stem}.mel\t{name}\t{n}\t{n / cfg.flow.stft.sample_rate:.6f}\t{frames}")
    if not rows:
        raise IOFailure(f"no usable WAV files in {src}")
    (out / "manifest.tsv").write_text("mel\twav\tsamples\tduration_s\tframes\n" + "\n".join(rows) + "\n")
    print(f"wrote {len(rows)} mel file(s) to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- train

def _load_wav_dataset(path: Path, cfg: ConfigFile) -> list[Clip]:
    if not path.is_dir():
        raise IOFailure(f"data directory {path} does not exist")
    clips = []
    for p in sorted(path.glob("*.wav")):
        try:
            w = sig.read_wav(p)
        except (OSError, WavFormatError) as exc:
            log.warning("skipping %s: %s", p.name, exc)
            continue
        if w.sample_rate != cfg.flow.stft.sample_rate:
            log.warning("skipping %s: sample rate %d != %d", p.name, w.sample_rate, cfg.flow.stft.sample_rate)
            continue
        clips.append(Clip(w))
    if not clips:
        raise IOFailure(f"no usable WAV files in {path}")
    return clips


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if cfg.baseline is not None:
        raise ConfigError("baseline configs have no training path")
    if args.synthetic is not None:
        dataset = make_synthetic_dataset(args.synthetic, seed=cfg.train.seed, sample_rate=cfg.flow.stft.sample_rate)
    elif args.data is not None:
        dataset = _load_wav_dataset(Path(args.data), cfg)
    else:
        raise ConfigError("one of --data or --synthetic is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        if resume.config.flow != cfg.flow:
            raise ConfigError("checkpoint config differs from --config: " + ", ".join(config_diff(resume.config, cfg)))
    cfg.save(out / "config.json")
    model = build_model(cfg.flow, cfg.train)
    result = train(model, dataset, cfg.train, out_dir=out, resume=resume, max_steps=args.steps, config=cfg)
    records = [parse_metrics_line(line) for line in (out / "metrics.log").read_text().splitlines() if line.strip()]
    if records:
        from .plotting import plot_training_curve

        plot_training_curve([r.step for r in records], [r.nll for r in records], out / "metrics.png", result.valid)
    first, last = result.history[0] if result.history else None, result.history[-1] if result.history else None
    print("step\tnll\tbpd")
    for rec in (first, last):
        if rec is not None:
            print(f"{rec.step}\t{rec.nll:.6f}\t{rec.bpd:.6f}")
    print(f"checkpoint\t{result.checkpoint}")
    return EXIT_OK


# --------------------------------------------------------------------------- synthesize

def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_diff(a: ConfigFile, b: ConfigFile) -> list[str]:
    """Dotted names of the model-shaping fields that differ between two configs."""
    fa, fb = _flatten(a.to_dict()["flow"], "flow."), _flatten(b.to_dict()["flow"], "flow.")
    return sorted(k for k in fa.keys() | fb.keys() if fa.get(k) != fb.get(k))


def cmd_synthesize(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    if args.config:
        diff = config_diff(cfg, load_config(args.config))
        if diff:
            raise ConfigError("config does not match checkpoint; differing fields: " + ", ".join(diff))
    stft = cfg.flow.stft
    if args.mel:
        mel = sig.load_mel(args.mel, stft.hop_length, stft.win_length)
    else:
        w = sig.read_wav(args.wav)
        if w.sample_rate != stft.sample_rate:
            raise ConfigError(f"{args.wav}: sample rate {w.sample_rate} != model rate {stft.sample_rate}")
        mel = sig.compute_mel(w, stft)
    if mel.values.shape[1] != stft.n_mels:
        raise ConfigError(f"mel has {mel.values.shape[1]} channels, model expects {stft.n_mels}")
    model = model_from_checkpoint(ckpt)
    gen = torch.Generator().manual_seed(args.seed)
    with torch.no_grad():
        y = model.synthesize(torch.as_tensor(mel.values.T, dtype=torch.float32), sigma=args.sigma, generator=gen)
    out = sig.Waveform(y[0].double().numpy(), stft.sample_rate)
    sig.write_wav(args.out, out)
    print(f"wrote {args.out}\t{len(out)} samples\t{out.duration:.6f} s")
    return EXIT_OK


# --------------------------------------------------------------------------- verify

def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    results = run_suites(args.suite, cfg.flow)
    print(HEADER)
    for r in results:
        print(r.row(), flush=True)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


# --------------------------------------------------------------------------- bench

def synthesis_throughput(cfg: ConfigFile, seconds: float = 1.0, repeats: int = 1) -> float:
    """Samples per second when synthesizing from a fixed mel of ``seconds`` length."""
    stft = cfg.flow.stft
    frames = int(seconds * stft.sample_rate) // stft.hop_length + 1
    model = build_model(cfg.flow, cfg.train).float().eval()
    mel = torch.full((1, stft.n_mels, frames), -4.0)
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        model.synthesize(mel[..., :3], generator=gen)  # warm-up
        start = time.perf_counter()
        for _ in range(repeats):
            y = model.synthesize(mel, generator=gen)
        elapsed = time.perf_counter() - start
    return repeats * y.shape[-1] / elapsed


def bench_rows(names: list[str], runtime: bool = False) -> list[dict]:
    rows = []
    for name in names:
        cfg = load_config(name)
        key = Path(name).stem if Path(name).suffix else name
        count = waveglow_parameter_count(cfg.baseline) if cfg.baseline is not None else count_parameters(cfg.flow)
        rate = synthesis_throughput(cfg) if runtime and cfg.baseline is None else None
        rows.append({"config": key, "count": count, "published": PUBLISHED.get(key), "samples_per_s": rate})
    return rows


def cmd_bench(args) -> int:
    torch.set_num_threads(args.threads)
    names = [n for item in (args.config_list or DEFAULT_BENCH) for n in item.split(",") if n]
    rows = bench_rows(names, args.runtime)
    lines = ["config\tmodule\tparams\tpublished\trel_diff\tsamples_per_s"]
    for r in rows:
        for module, n in r["count"].modules.items():
            lines.append(f"{r['config']}\t{module}\t{n}\t\t\t")
        pub = r["published"]
        rel = "" if pub is None else f"{(r['count'].total - pub) / pub:+.4f}"
        rate = "" if r["samples_per_s"] is None else f"{r['samples_per_s']:.1f}"
        lines.append(f"{r['config']}\ttotal\t{r['count'].total}\t{'' if pub is None else int(pub)}\t{rel}\t{rate}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out_dir:
        from .plotting import plot_parameter_counts

        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.tsv").write_text(text)
        plot_parameter_counts({r["config"]: r["count"].total for r in rows}, {r["config"]: r["published"] for r in rows}, out / "params.png")
    return EXIT_OK


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="melglow", description="MelGlow vocoder: preprocessing, training, synthesis, verification, benchmarks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="WAV directory -> mel cache files + manifest.tsv")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default="tiny")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="maximum-likelihood training")
    s.add_argument("--config", default="tiny")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--data")
    src.add_argument("--synthetic", type=int, metavar="N")
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.add_argument("--steps", type=int, help="total step count (default: train.max_steps)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", help="mel or WAV -> synthetic WAV")
    s.add_argument("--ckpt", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--mel")
    src.add_argument("--wav")
    s.add_argument("--out", required=True)
    s.add_argument("--sigma", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="fail if this config does not match the checkpoint")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("verify", help="run property suites")
    s.add_argument("--suite", action="append", choices=SUITES + ("all",), required=True)
    s.add_argument("--config", default="tiny")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("bench", help="parameter counts and synthesis throughput")
    s.add_argument("--config-list", nargs="+", metavar="CONFIG")
    s.add_argument("--runtime", action="store_true")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (IOFailure, CheckpointError, MelCacheError, WavFormatError, OSError) as exc:
        print(f"melglow: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, MelGlowError, ValueError) as exc:
        print(f"melglow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

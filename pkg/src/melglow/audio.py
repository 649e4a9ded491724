"""Waveform I/O and the deterministic DSP front end.

Everything here is plain numpy: WAV reading/writing, the log-mel
spectrogram used as the vocoder's conditioning input, the 8-channel
squeeze used by the flow, the binary mel cache, and a Griffin-Lim
baseline synthesiser.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from .config import STFTConfig
from .errors import EmptyInputError, MelCacheError, ShapeError, UnsupportedFormatError, WavFormatError

LOG_FLOOR = 1e-5


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (num_frames, num_mels)
    hop_length: int = 256
    win_length: int = 1024

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_mels(self) -> int:
        return self.values.shape[1]


@dataclass
class SqueezedSignal:
    data: np.ndarray  # (channels, T / channels)
    original_length: int


# --------------------------------------------------------------------------- WAV

def read_wav(path) -> Waveform:
    """Read a PCM16 or float32 WAV file; multichannel files keep channel 0."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except ValueError as exc:
        msg = str(exc)
        if "Unsupported bit depth" in msg or "Unknown wave file format" in msg:
            raise UnsupportedFormatError(f"{path}: {msg}") from None
        raise WavFormatError(f"{path}: {msg}") from None
    except (struct.error, EOFError, IndexError) as exc:
        raise WavFormatError(f"{path}: truncated or malformed WAV ({exc})") from None
    if data.ndim == 2:
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedFormatError(f"{path}: unsupported sample encoding {data.dtype}")
    return Waveform(samples, int(rate))


def write_wav(path, w: Waveform) -> None:
    """Write ``w`` as mono PCM16, clamping samples to [-1, 1]."""
    if not np.all(np.isfinite(w.samples)):
        raise ValueError("cannot write non-finite samples")
    pcm = np.clip(np.round(np.clip(w.samples, -1.0, 1.0) * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(path, int(w.sample_rate), pcm)


# --------------------------------------------------------------------------- mel

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: STFTConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg: STFTConfig) -> np.ndarray:
    """Triangular HTK-scale filter bank of shape (n_mels, fft_size // 2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def _window(cfg: STFTConfig) -> np.ndarray:
    win = get_window("hann", cfg.win_length, fftbins=True)
    left = (cfg.fft_size - cfg.win_length) // 2
    return np.pad(win, (left, cfg.fft_size - cfg.win_length - left))


def num_frames_for(n_samples: int, hop_length: int) -> int:
    return n_samples // hop_length + 1


def stft(x: np.ndarray, cfg: STFTConfig) -> np.ndarray:
    """Centered STFT with reflection padding; returns (frames, fft_size//2 + 1) complex."""
    x = np.asarray(x, dtype=np.float64)
    pad = cfg.win_length // 2
    if x.shape[0] > pad:
        xp = np.pad(x, pad, mode="reflect")
    else:
        # reflection is undefined for very short inputs; numpy's iterated reflect
        # still works for len >= 2, the single-sample case degenerates to edge
        xp = np.pad(x, pad, mode="reflect" if x.shape[0] > 1 else "edge")
    n_frames = num_frames_for(x.shape[0], cfg.hop_length)
    need = (n_frames - 1) * cfg.hop_length + cfg.fft_size
    if xp.shape[0] < need:
        xp = np.pad(xp, (0, need - xp.shape[0]))
    frames = np.lib.stride_tricks.sliding_window_view(xp, cfg.fft_size)[:: cfg.hop_length][:n_frames]
    return np.fft.rfft(frames * _window(cfg), axis=-1)


def compute_mel(w: Waveform, cfg: STFTConfig) -> MelSpectrogram:
    """Log-mel spectrogram with ``len(w) // hop + 1`` frames."""
    if len(w) < 1:
        raise EmptyInputError("compute_mel needs at least one sample")
    mag = np.abs(stft(w.samples, cfg))
    mel = mag @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)), cfg.hop_length, cfg.win_length)


# --------------------------------------------------------------------------- squeeze

def squeeze(w: Waveform, channels: int = 8) -> SqueezedSignal:
    n = len(w)
    if n % channels:
        raise ShapeError(f"waveform length {n} is not divisible by {channels}")
    return SqueezedSignal(w.samples.reshape(n // channels, channels).T.copy(), n)


def unsqueeze(s: SqueezedSignal, sample_rate: int = 22050) -> Waveform:
    return Waveform(s.data.T.reshape(-1).copy(), sample_rate)


def trim_to_multiple(w: Waveform, multiple: int) -> Waveform:
    n = len(w) - len(w) % multiple
    return Waveform(w.samples[:n], w.sample_rate)


# --------------------------------------------------------------------------- mel cache

_MEL_MAGIC = b"MELG"
_MEL_VERSION = 1


def save_mel(path, m: MelSpectrogram) -> None:
    values = np.ascontiguousarray(m.values, dtype="<f4")
    header = _MEL_MAGIC + struct.pack("<III", _MEL_VERSION, values.shape[0], values.shape[1])
    Path(path).write_bytes(header + values.tobytes())


def load_mel(path, hop_length: int = 256, win_length: int = 1024) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _MEL_MAGIC:
        raise MelCacheError(f"{path}: not a mel cache file")
    version, frames, mels = struct.unpack_from("<III", raw, 4)
    if version != _MEL_VERSION:
        raise MelCacheError(f"{path}: unsupported mel cache version {version}")
    if len(raw) != 16 + 4 * frames * mels:
        raise MelCacheError(f"{path}: payload size does not match {frames}x{mels}")
    values = np.frombuffer(raw, dtype="<f4", offset=16).reshape(frames, mels).astype(np.float64)
    return MelSpectrogram(values, hop_length, win_length)


# --------------------------------------------------------------------------- Griffin-Lim

def istft(spec: np.ndarray, cfg: STFTConfig) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`; output length (frames - 1) * hop."""
    win = _window(cfg)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=-1) * win
    n_frames = spec.shape[0]
    total = (n_frames - 1) * cfg.hop_length + cfg.fft_size
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        s = i * cfg.hop_length
        out[s : s + cfg.fft_size] += frames[i]
        norm[s : s + cfg.fft_size] += win**2
    out /= np.where(norm > 1e-8, norm, 1.0)
    pad = cfg.win_length // 2
    return out[pad : pad + (n_frames - 1) * cfg.hop_length]


def mel_to_linear(m: MelSpectrogram, cfg: STFTConfig) -> np.ndarray:
    mel_mag = np.exp(m.values)
    lin = mel_mag @ np.linalg.pinv(mel_filterbank(cfg)).T
    return np.maximum(lin, 0.0)


def griffin_lim(
    m: MelSpectrogram,
    cfg: STFTConfig,
    iterations: int = 60,
    seed: int = 0,
    errors: Optional[list] = None,
) -> Waveform:
    """Classic Griffin-Lim on the pseudo-inverted mel magnitude.

    If ``errors`` is a list, the L2 distance between ``|STFT(y)|`` and the
    target magnitude is appended after every iteration.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if m.num_mels != cfg.n_mels:
        raise ShapeError(f"mel has {m.num_mels} channels, config expects {cfg.n_mels}")
    target = mel_to_linear(m, cfg)
    silent = np.all(m.values <= np.log(LOG_FLOOR) + 1e-9)
    n_out = (m.num_frames - 1) * cfg.hop_length
    if silent or n_out == 0:
        return Waveform(np.zeros(n_out), cfg.sample_rate)
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(target.shape))
    y = istft(target * angles, cfg)
    for _ in range(iterations):
        angles = np.exp(1j * np.angle(stft(y, cfg)))
        y = istft(target * angles, cfg)
        if errors is not None:
            errors.append(float(np.linalg.norm(np.abs(stft(y, cfg)) - target)))
    return Waveform(y, cfg.sample_rate)

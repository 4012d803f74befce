"""Waveform loading and log-mel feature extraction.

Frames start every ``hop`` samples from the first sample. A trailing partial
frame is kept and zero-padded, so a clip of ``N >= win`` samples yields
``1 + ceil((N - win) / hop)`` frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

from .errors import ConfigError, DecodeError, EmptyInputError, TooShortError

__all__ = [
    "WaveformClip",
    "MelConfig",
    "MelSpectrogram",
    "load_waveform",
    "compute_mel",
    "frame_count",
    "mel_filterbank",
    "hz_to_mel",
    "mel_to_hz",
]


@dataclass(frozen=True)
class WaveformClip:
    samples: np.ndarray
    sample_rate: int = 32000
    clip_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise ConfigError(f"waveform must be mono, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ConfigError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    def with_samples(self, samples: np.ndarray) -> "WaveformClip":
        return replace(self, samples=samples)


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 32000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.hop_ms <= 0 or self.window_ms < self.hop_ms:
            raise ConfigError(
                f"need 0 < hop_ms <= window_ms, got hop={self.hop_ms} window={self.window_ms}"
            )
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if not 0 <= self.fmin < self.f_max <= self.sample_rate / 2:
            raise ConfigError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={self.fmin} fmax={self.f_max}"
            )
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    @property
    def f_max(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else float(self.fmax)

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def n_fft(self) -> int:
        return 1 << (self.win_length - 1).bit_length()


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # (n_mels, frames)
    config: MelConfig = field(default_factory=MelConfig)
    clip_id: str = ""

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        # scipy left-justifies 24-bit PCM into int32
        return data.astype(np.float64) / 2147483648.0
    if np.issubdtype(data.dtype, np.floating):
        return np.clip(data.astype(np.float64), -1.0, 1.0)
    raise DecodeError(f"unsupported sample format {data.dtype}")


def load_waveform(path, target_sr: int = 32000) -> WaveformClip:
    """Read a WAV file as a mono clip at ``target_sr`` with amplitudes in [-1, 1]."""
    path = Path(path)
    try:
        sr, data = wavfile.read(path)
    except (OSError, ValueError, EOFError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    if data.size == 0:
        raise EmptyInputError(f"{path} contains no audio")
    samples = _to_float(data)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if sr != target_sr:
        g = gcd(int(sr), int(target_sr))
        samples = resample_poly(samples, target_sr // g, sr // g)
        samples = np.clip(samples, -1.0, 1.0)
    return WaveformClip(samples, sample_rate=int(target_sr), clip_id=path.stem)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=32)
def _filterbank(sr: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    # unit-area triangles
    weights *= 2.0 / (upper - lower)
    weights.flags.writeable = False
    return weights


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filterbank of shape ``(n_mels, n_fft // 2 + 1)``."""
    return _filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, float(cfg.fmin), cfg.f_max)


def mel_band_centers(cfg: MelConfig) -> np.ndarray:
    """Center frequency in Hz of every mel band."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    return edges[1:-1]


def frame_count(n_samples: int, cfg: MelConfig) -> int:
    if n_samples < cfg.win_length:
        raise TooShortError(
            f"{n_samples} samples is shorter than one window ({cfg.win_length})"
        )
    return 1 + -(-(n_samples - cfg.win_length) // cfg.hop_length)


def mel_power(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Mel-band power before log compression, shape ``(n_mels, frames)``."""
    samples = np.asarray(samples, dtype=np.float64)
    n_frames = frame_count(len(samples), cfg)
    padded_len = (n_frames - 1) * cfg.hop_length + cfg.win_length
    samples = np.pad(samples, (0, padded_len - len(samples)))
    frames = np.lib.stride_tricks.sliding_window_view(samples, cfg.win_length)
    frames = frames[:: cfg.hop_length]
    window = get_window("hann", cfg.win_length, fftbins=True)
    spectrum = np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    return mel_filterbank(cfg) @ power.T


def compute_mel(clip: WaveformClip, cfg: MelConfig) -> MelSpectrogram:
    if clip.sample_rate != cfg.sample_rate:
        raise ConfigError(
            f"clip sample rate {clip.sample_rate} != config sample rate {cfg.sample_rate}"
        )
    values = np.log(mel_power(clip.samples, cfg) + cfg.log_floor).astype(np.float32)
    return MelSpectrogram(values, cfg, clip.clip_id)

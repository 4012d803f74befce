"""Synthetic weakly labeled tagging task for desk-scale experiments.

Ten sound classes (harmonic tones, band-limited noise bursts, amplitude
modulated tones and chirps) are mixed into short clips over background noise.
Training labels are weak in the AudioSet sense: each present class is
annotated only with probability ``1 - label_drop``. Evaluation labels are
complete.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import butter, sosfilt

from .dataset import DatasetManifest, ManifestRow, write_manifest

__all__ = ["ToyConfig", "CLASS_NAMES", "synthesize_clip", "make_toy"]

CLASS_NAMES = (
    "tone_220", "tone_330", "tone_495", "tone_740",
    "noise_low", "noise_mid", "noise_high",
    "am_slow", "am_fast", "chirp_up",
)


@dataclass(frozen=True)
class ToyConfig:
    n_train: int = 2000
    n_eval: int = 500
    sample_rate: int = 32000
    duration: float = 1.0
    max_events: int = 3
    label_drop: float = 0.3
    snr_db: tuple[float, float] = (-5.0, 20.0)
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return len(CLASS_NAMES)


def _envelope(n, sr, rng):
    """Random onset/offset with short raised-cosine ramps."""
    length = int(rng.uniform(0.2, 0.7) * n)
    start = int(rng.integers(0, n - length + 1))
    env = np.zeros(n)
    ramp = min(int(0.01 * sr), length // 2)
    body = np.ones(length)
    if ramp:
        r = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        body[:ramp], body[-ramp:] = r, r[::-1]
    env[start:start + length] = body
    return env


def _event(cls, n, sr, rng):
    t = np.arange(n) / sr
    jitter = rng.uniform(0.97, 1.03)
    if cls < 4:
        f0 = (220.0, 330.0, 495.0, 740.0)[cls] * jitter
        x = sum(np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi)) / h for h in (1, 2, 3))
    elif cls < 7:
        lo, hi = ((300, 900), (2000, 4000), (7000, 12000))[cls - 4]
        sos = butter(4, [lo * jitter, hi * jitter], btype="band", fs=sr, output="sos")
        x = sosfilt(sos, rng.standard_normal(n))
    elif cls < 9:
        rate = (3.0, 14.0)[cls - 7] * jitter
        carrier = np.sin(2 * np.pi * 1500 * jitter * t)
        x = carrier * (0.5 + 0.5 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    else:
        f_start, f_end = 600 * jitter, 6000 * jitter
        phase = 2 * np.pi * (f_start * t + (f_end - f_start) * t**2 / (2 * t[-1]))
        x = np.sin(phase)
    x = x / (np.sqrt(np.mean(x**2)) + 1e-12)
    return x * _envelope(n, sr, rng)


def synthesize_clip(classes, cfg: ToyConfig, rng: np.random.Generator) -> np.ndarray:
    n = int(cfg.sample_rate * cfg.duration)
    noise = rng.standard_normal(n)
    noise = np.cumsum(noise) * 0.02 + noise  # tilt the background towards low frequencies
    noise /= np.sqrt(np.mean(noise**2))
    mix = noise * 10 ** (-cfg.snr_db[1] / 20)
    for c in classes:
        snr = rng.uniform(*cfg.snr_db)
        mix = mix + _event(c, n, cfg.sample_rate, rng) * 10 ** ((snr - cfg.snr_db[1]) / 20)
    peak = np.max(np.abs(mix))
    return mix * (0.8 / peak) * rng.uniform(0.3, 1.0)


def _draw_classes(cfg: ToyConfig, rng) -> list[int]:
    # long-tailed class prior so importance sampling has something to fix
    prior = 1.0 / np.arange(1, cfg.n_classes + 1) ** 0.8
    prior /= prior.sum()
    k = int(rng.integers(1, cfg.max_events + 1))
    return sorted(rng.choice(cfg.n_classes, size=k, replace=False, p=prior).tolist())


def make_toy(out_dir, cfg: ToyConfig = ToyConfig()) -> dict[str, Path]:
    """Write WAV clips and ``train.csv`` / ``eval.csv`` manifests under ``out_dir``.

    Returns the manifest paths keyed by split.
    """
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    paths = {}
    for split, count in (("train", cfg.n_train), ("eval", cfg.n_eval)):
        rows = []
        for i in range(count):
            clip_id = f"{split}_{i:05d}"
            classes = _draw_classes(cfg, rng)
            audio = synthesize_clip(classes, cfg, rng)
            rel = f"audio/{clip_id}.wav"
            wavfile.write(out_dir / rel, cfg.sample_rate, (audio * 32767).astype(np.int16))
            labels = classes
            if split == "train":
                kept = [c for c in classes if rng.random() >= cfg.label_drop]
                labels = kept or [classes[int(rng.integers(len(classes)))]]
            rows.append(ManifestRow(clip_id, rel, tuple(labels)))
        manifest = DatasetManifest(rows, cfg.n_classes, split, out_dir)
        paths[split] = write_manifest(manifest, out_dir / f"{split}.csv")
    return paths

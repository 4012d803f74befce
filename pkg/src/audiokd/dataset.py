"""Weakly labeled multi-label datasets: manifests, importance sampling, augmentation."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .frontend import MelConfig, WaveformClip, compute_mel, load_waveform

__all__ = [
    "DATA_ROOT_ENV",
    "ManifestRow",
    "DatasetManifest",
    "read_manifest",
    "write_manifest",
    "SamplerState",
    "AugmentConfig",
    "compute_sample_weights",
    "sample_epoch",
    "roll_waveform",
    "gain_augment",
    "spec_masking",
    "TaggingDataset",
]

DATA_ROOT_ENV = "AUDIOKD_DATA_ROOT"


@dataclass(frozen=True)
class ManifestRow:
    clip_id: str
    path: str
    labels: tuple[int, ...]


@dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    class_count: int = 527
    split: str = "train"
    root: Path | None = None

    def __post_init__(self):
        seen = set()
        for r in self.rows:
            if r.clip_id in seen:
                raise FormatError(f"duplicate clip id {r.clip_id!r}")
            seen.add(r.clip_id)
            if not r.labels:
                raise FormatError(f"{r.clip_id}: empty label list")
            bad = [l for l in r.labels if not 0 <= l < self.class_count]
            if bad:
                raise FormatError(f"{r.clip_id}: label indices {bad} outside [0, {self.class_count})")
        if self.split not in ("train", "eval"):
            raise ConfigError(f"split must be 'train' or 'eval', got {self.split!r}")

    def __len__(self):
        return len(self.rows)

    @property
    def clip_ids(self) -> list[str]:
        return [r.clip_id for r in self.rows]

    def label_matrix(self) -> np.ndarray:
        y = np.zeros((len(self.rows), self.class_count), dtype=np.float32)
        for i, r in enumerate(self.rows):
            y[i, list(r.labels)] = 1.0
        return y

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        if p.is_absolute():
            return p
        root = self.root or Path(os.environ.get(DATA_ROOT_ENV, "."))
        return root / p


def read_manifest(path, class_count: int = 527, split: str = "train",
                  root=None) -> DatasetManifest:
    """Read ``clip_id,path,labels`` CSV with semicolon-separated label indices.

    Relative audio paths resolve against ``root``, else the ``AUDIOKD_DATA_ROOT``
    environment variable, else the manifest's own directory.
    """
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames)[:3] != ["clip_id", "path", "labels"]:
            raise FormatError(f"{path}: header must be clip_id,path,labels")
        for lineno, r in enumerate(reader, 2):
            try:
                labels = tuple(int(x) for x in r["labels"].split(";") if x.strip())
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad label list {r['labels']!r}") from None
            rows.append(ManifestRow(r["clip_id"], r["path"], labels))
    if root is None:
        root = os.environ.get(DATA_ROOT_ENV) or path.parent
    return DatasetManifest(rows, class_count, split, Path(root))


def write_manifest(manifest: DatasetManifest, path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "path", "labels"])
        for r in manifest.rows:
            w.writerow([r.clip_id, r.path, ";".join(str(l) for l in r.labels)])
    return Path(path)


def compute_sample_weights(manifest: DatasetManifest) -> np.ndarray:
    """Per clip, the sum over its labels of ``1 / (#clips carrying that label)``."""
    counts = manifest.label_matrix().sum(axis=0, dtype=np.float64)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    return np.array([inv[list(r.labels)].sum() for r in manifest.rows])


@dataclass
class SamplerState:
    weights: np.ndarray
    seed: int = 0
    sample_size: int = 100_000

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights < 0) or not np.any(self.weights > 0):
            raise ConfigError("sampling weights must be >= 0 with at least one positive")


def sample_epoch(state: SamplerState, epoch: int = 0) -> np.ndarray:
    """Weighted draw without replacement of ``sample_size`` clip indices.

    Each clip gets the key ``E / w`` with ``E ~ Exp(1)``; the smallest keys win.
    The draw is a function of ``(seed, epoch)`` only.
    """
    n = len(state.weights)
    k = state.sample_size
    if k > n:
        raise ConfigError(f"sample size {k} exceeds population {n}")
    rng = np.random.default_rng([state.seed, epoch])
    e = rng.standard_exponential(n)
    with np.errstate(divide="ignore"):
        keys = e / state.weights
    order = np.argsort(keys, kind="stable")
    return order[:k]


def roll_waveform(clip, shift: int):
    samples = clip.samples if isinstance(clip, WaveformClip) else np.asarray(clip)
    if abs(shift) >= len(samples):
        raise ConfigError(f"|shift| must be < {len(samples)}, got {shift}")
    rolled = np.roll(samples, shift)
    return clip.with_samples(rolled) if isinstance(clip, WaveformClip) else rolled


def gain_augment(clip, rng: np.random.Generator | None = None, range_db: float = 7.0,
                 gain_db: float | None = None):
    """Scale by ``10 ** (g / 20)`` with ``g ~ U(-range_db, range_db)``; clip to [-1, 1]."""
    if gain_db is None:
        gain_db = rng.uniform(-range_db, range_db)
    samples = clip.samples if isinstance(clip, WaveformClip) else np.asarray(clip)
    out = np.clip(samples * 10.0 ** (gain_db / 20.0), -1.0, 1.0)
    return clip.with_samples(out) if isinstance(clip, WaveformClip) else out


def _apply_masks(spec, time_ranges, freq_ranges, fill):
    out = np.array(spec, copy=True)
    for lo, hi in time_ranges:
        out[:, lo:hi] = fill
    for lo, hi in freq_ranges:
        out[lo:hi, :] = fill
    return out


def spec_masking(spec, rng: np.random.Generator, n_time_masks=2, max_t=20,
                 n_freq_masks=2, max_f=8, fill=None):
    """SpecAugment-style masks filled with the spectrogram mean."""
    spec = np.asarray(spec)
    n_f, n_t = spec.shape
    if max_t > n_t or max_f > n_f:
        raise ConfigError(f"mask sizes ({max_f}, {max_t}) exceed spectrogram {spec.shape}")
    fill = spec.mean() if fill is None else fill

    def ranges(count, max_size, extent):
        out = []
        for _ in range(count):
            size = int(rng.integers(0, max_size + 1))
            start = int(rng.integers(0, extent - size + 1))
            out.append((start, start + size))
        return out

    return _apply_masks(spec, ranges(n_time_masks, max_t, n_t), ranges(n_freq_masks, max_f, n_f), fill)


@dataclass(frozen=True)
class AugmentConfig:
    masking: bool = False
    n_time_masks: int = 2
    max_time_mask: int = 20
    n_freq_masks: int = 2
    max_freq_mask: int = 8
    rolling: bool = False
    max_shift: int = 16000
    gain: bool = False
    gain_db: float = 7.0
    mixup: bool = True

    @property
    def waveform_level(self) -> bool:
        return self.rolling or self.gain


@dataclass
class TaggingDataset:
    """A manifest plus its log-mel features, cached when no waveform augmentation runs."""

    manifest: DatasetManifest
    mel: MelConfig
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    clip_samples: int | None = None
    _features: np.ndarray | None = field(default=None, repr=False)
    _waves: list | None = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = self.manifest.label_matrix()
        self.clip_ids = self.manifest.clip_ids

    def __len__(self):
        return len(self.manifest)

    @property
    def is_train(self) -> bool:
        return self.manifest.split == "train"

    def _load(self, i) -> WaveformClip:
        clip = load_waveform(self.manifest.resolve(self.manifest.rows[i]), self.mel.sample_rate)
        n = self.clip_samples or len(clip)
        samples = clip.samples[:n]
        if len(samples) < n:
            samples = np.pad(samples, (0, n - len(samples)))
        return clip.with_samples(samples)

    def waveforms(self) -> list[WaveformClip]:
        if self._waves is None:
            self._waves = [self._load(i) for i in range(len(self))]
        return self._waves

    def features(self) -> np.ndarray:
        """Unaugmented log-mel features, shape ``(N, n_mels, frames)``."""
        if self._features is None:
            self._features = np.stack([compute_mel(w, self.mel).values for w in self.waveforms()])
        return self._features

    def spectrograms(self, indices: Sequence[int], rng: np.random.Generator | None = None):
        """Features for ``indices`` with the configured augmentations (train split only)."""
        aug = self.augment if self.is_train and rng is not None else AugmentConfig(mixup=False)
        if not aug.waveform_level:
            specs = self.features()[np.asarray(indices)]
        else:
            out = []
            for i in indices:
                clip = self.waveforms()[i]
                if aug.rolling:
                    clip = roll_waveform(clip, int(rng.integers(-aug.max_shift, aug.max_shift + 1)))
                if aug.gain:
                    clip = gain_augment(clip, rng, aug.gain_db)
                out.append(compute_mel(clip, self.mel).values)
            specs = np.stack(out)
        if aug.masking:
            specs = np.stack([
                spec_masking(s, rng, aug.n_time_masks, aug.max_time_mask,
                             aug.n_freq_masks, aug.max_freq_mask)
                for s in specs
            ])
        return specs

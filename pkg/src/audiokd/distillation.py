"""Offline knowledge distillation: loss, teacher logit stores, mixup.

The loss is a convex mix of two binary cross-entropies on the sigmoid of the
student logits: one against the hard labels, one against the teacher's soft
labels ``sigmoid(z_T / tau)``. Only the teacher logits see the temperature.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.special import expit
from torch.nn import functional as F

from .errors import (
    AlignmentError,
    ConfigError,
    CorruptionError,
    FormatError,
    NumericError,
    ShapeError,
)

__all__ = [
    "KDConfig",
    "TeacherLogitsStore",
    "TrainingExample",
    "kd_loss",
    "teacher_soft_labels",
    "average_ensemble",
    "mixup_pair",
    "mixup_batch",
    "sample_mix_lambda",
    "read_store",
    "write_store",
    "store_from_csv",
    "store_to_csv",
    "STORE_MAGIC",
]


@dataclass(frozen=True)
class KDConfig:
    lam: float = 0.1  # weight of the hard-label loss
    tau: float = 1.0
    mixup_alpha: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.mixup_alpha < 0:
            raise ConfigError(f"mixup_alpha must be >= 0, got {self.mixup_alpha}")

    @property
    def uses_teacher(self) -> bool:
        return self.lam < 1.0


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def kd_loss(student_logits, y, teacher_soft, cfg: KDConfig) -> torch.Tensor:
    """``lam * BCE(sigmoid(z_S), y) + (1 - lam) * BCE(sigmoid(z_S), teacher_soft)``.

    Both terms are averaged over batch and classes. ``teacher_soft`` must
    already be ``sigmoid(z_T / tau)``.
    """
    z = _as_tensor(student_logits)
    y = _as_tensor(y, z)
    t = _as_tensor(teacher_soft, z) if teacher_soft is not None else None
    if y.shape != z.shape or (t is not None and t.shape != z.shape):
        raise ShapeError(
            f"shape mismatch: logits {tuple(z.shape)}, labels {tuple(y.shape)}, "
            f"teacher {None if t is None else tuple(t.shape)}"
        )
    for name, v in (("student logits", z), ("labels", y), ("teacher soft labels", t)):
        if v is not None and not torch.isfinite(v).all():
            raise NumericError(f"non-finite values in {name}")
    loss = z.new_zeros(())
    if cfg.lam > 0:
        loss = loss + cfg.lam * F.binary_cross_entropy_with_logits(z, y)
    if cfg.lam < 1:
        if t is None:
            raise ConfigError("lambda < 1 needs teacher soft labels")
        loss = loss + (1 - cfg.lam) * F.binary_cross_entropy_with_logits(z, t)
    return loss


def teacher_soft_labels(z_t, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    z = np.asarray(z_t, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite teacher logits")
    return expit(z / tau)


@dataclass
class TeacherLogitsStore:
    logits: dict[str, np.ndarray] = field(default_factory=dict)
    class_count: int = 527
    teacher: str = ""

    def __post_init__(self):
        for cid, v in self.logits.items():
            v = np.asarray(v, dtype=np.float32)
            if v.shape != (self.class_count,):
                raise ShapeError(f"{cid}: expected {self.class_count} logits, got shape {v.shape}")
            if not np.all(np.isfinite(v)):
                raise NumericError(f"{cid}: non-finite logits")
            self.logits[cid] = v

    def __len__(self):
        return len(self.logits)

    def __contains__(self, clip_id):
        return clip_id in self.logits

    def __getitem__(self, clip_id) -> np.ndarray:
        return self.logits[clip_id]

    def ids(self) -> list[str]:
        return list(self.logits)

    def matrix(self, clip_ids: Sequence[str]) -> np.ndarray:
        missing = [c for c in clip_ids if c not in self.logits]
        if missing:
            raise AlignmentError(f"teacher store lacks {len(missing)} clips: {missing[:5]}", missing)
        return np.stack([self.logits[c] for c in clip_ids]) if clip_ids else \
            np.zeros((0, self.class_count), np.float32)

    def soft_labels(self, clip_ids: Sequence[str], tau: float) -> np.ndarray:
        return teacher_soft_labels(self.matrix(clip_ids), tau).astype(np.float32)

    def __eq__(self, other):
        if not isinstance(other, TeacherLogitsStore):
            return NotImplemented
        return (self.class_count == other.class_count
                and self.logits.keys() == other.logits.keys()
                and all(np.array_equal(v, other.logits[k]) for k, v in self.logits.items()))


def average_ensemble(stores: Sequence[TeacherLogitsStore]) -> TeacherLogitsStore:
    """Per clip, the elementwise mean of the logits of all stores."""
    if not stores:
        raise ConfigError("need at least one store to average")
    first = stores[0]
    keys = set(first.logits)
    for s in stores[1:]:
        if s.class_count != first.class_count:
            raise ShapeError(f"class counts differ: {first.class_count} vs {s.class_count}")
        if set(s.logits) != keys:
            missing = keys.symmetric_difference(s.logits)
            raise AlignmentError(
                f"clip id sets differ; missing ids: {', '.join(sorted(missing)[:20])}", missing
            )
    merged = {}
    for cid in first.logits:
        stack = np.stack([s.logits[cid].astype(np.float64) for s in stores])
        merged[cid] = stack.mean(axis=0).astype(np.float32)
    name = "+".join(s.teacher for s in stores if s.teacher) or "ensemble"
    return TeacherLogitsStore(merged, first.class_count, name if len(stores) > 1 else first.teacher)


# binary format: little-endian header then records
STORE_MAGIC = b"KDL1"
_HEADER = struct.Struct("<4sIQ")
_ID_LEN = struct.Struct("<H")


def write_store(store: TeacherLogitsStore, path) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(STORE_MAGIC, store.class_count, len(store)))
        for cid, v in store.logits.items():
            raw = cid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"clip id too long: {cid[:40]}...")
            fh.write(_ID_LEN.pack(len(raw)))
            fh.write(raw)
            fh.write(np.asarray(v, dtype="<f4").tobytes())
    return path


def read_store(path, teacher: str | None = None) -> TeacherLogitsStore:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    magic, classes, count = _HEADER.unpack_from(data)
    if magic != STORE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {STORE_MAGIC!r}")
    pos, logits = _HEADER.size, {}
    vec_bytes = 4 * classes
    for i in range(count):
        if pos + _ID_LEN.size > len(data):
            raise CorruptionError(f"{path}: truncated at record {i} of {count}")
        (n,) = _ID_LEN.unpack_from(data, pos)
        pos += _ID_LEN.size
        if pos + n + vec_bytes > len(data):
            raise CorruptionError(f"{path}: truncated at record {i} of {count}")
        cid = data[pos:pos + n].decode("utf-8")
        pos += n
        logits[cid] = np.frombuffer(data, dtype="<f4", count=classes, offset=pos).astype(np.float32)
        pos += vec_bytes
    if pos != len(data):
        raise CorruptionError(f"{path}: {len(data) - pos} trailing bytes after {count} records")
    return TeacherLogitsStore(logits, classes, teacher if teacher is not None else path.stem)


def store_from_csv(path, class_count: int | None = None) -> TeacherLogitsStore:
    """Rows of ``clip_id,z_0,...,z_{C-1}``; a header row is skipped if present."""
    logits = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                values = np.array([float(v) for v in row[1:]], dtype=np.float32)
            except ValueError:
                if lineno == 1:
                    continue
                raise FormatError(f"{path}:{lineno}: non-numeric logit") from None
            if class_count is None:
                class_count = len(values)
            if len(values) != class_count:
                raise FormatError(f"{path}:{lineno}: expected {class_count} logits, got {len(values)}")
            if row[0] in logits:
                raise FormatError(f"{path}:{lineno}: duplicate clip id {row[0]!r}")
            logits[row[0]] = values
    return TeacherLogitsStore(logits, class_count or 0, Path(path).stem)


def store_to_csv(store: TeacherLogitsStore, path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for cid, v in store.logits.items():
            w.writerow([cid, *(repr(float(x)) for x in v)])
    return Path(path)


@dataclass(frozen=True)
class TrainingExample:
    spectrogram: np.ndarray
    labels: np.ndarray
    teacher_soft: np.ndarray | None = None

    def __post_init__(self):
        if self.teacher_soft is not None:
            if np.shape(self.teacher_soft) != np.shape(self.labels):
                raise ShapeError("teacher soft labels and hard labels differ in shape")
            t = np.asarray(self.teacher_soft)
            if np.any(t <= 0) or np.any(t >= 1):
                raise NumericError("teacher soft labels must lie strictly inside (0, 1)")


def mixup_pair(a: TrainingExample, b: TrainingExample, lam: float) -> TrainingExample:
    if np.shape(a.spectrogram) != np.shape(b.spectrogram) or np.shape(a.labels) != np.shape(b.labels):
        raise ShapeError("mixup needs examples of identical shape")
    if (a.teacher_soft is None) != (b.teacher_soft is None):
        raise ShapeError("mixup needs soft labels on both examples or neither")

    def mix(u, v):
        return lam * np.asarray(u) + (1 - lam) * np.asarray(v)

    soft = None if a.teacher_soft is None else mix(a.teacher_soft, b.teacher_soft)
    return replace(a, spectrogram=mix(a.spectrogram, b.spectrogram),
                   labels=mix(a.labels, b.labels), teacher_soft=soft)


def mixup_batch(specs, labels, soft, lam, perm):
    """Batched ``mixup_pair``: row ``i`` is mixed with row ``perm[i]`` at ``lam[i]``."""
    lam = np.asarray(lam, dtype=np.float32)

    def mix(x):
        if x is None:
            return None
        w = lam.reshape((-1,) + (1,) * (x.ndim - 1))
        return w * x + (1 - w) * x[perm]

    return mix(specs), mix(labels), mix(soft)


def sample_mix_lambda(alpha: float, rng: np.random.Generator, size=None):
    """Draw ``u ~ Beta(alpha, alpha)`` and fold it to ``max(u, 1 - u)``."""
    if not alpha > 0:
        raise ConfigError(f"mixup alpha must be positive, got {alpha}")
    u = rng.beta(alpha, alpha, size=size)
    return np.maximum(u, 1.0 - u)

"""Training loop, learning-rate schedule, Adam, and mAP evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dataset import SamplerState, TaggingDataset, compute_sample_weights, sample_epoch
from .distillation import KDConfig, TeacherLogitsStore, kd_loss, mixup_batch, sample_mix_lambda
from .errors import ConfigError, DomainError, NumericError, ShapeError
from .network import Network, NetworkConfig, build_network, read_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

__all__ = [
    "ScheduleConfig",
    "AdamConfig",
    "learning_rate",
    "optimize_step",
    "init_moments",
    "average_precision",
    "EvalResult",
    "evaluate",
    "predict",
    "TrainState",
    "init_state",
    "train_epoch",
    "save_state",
    "load_state",
]


@dataclass(frozen=True)
class ScheduleConfig:
    max_lr: float = 8e-4
    warmup_epochs: float = 8
    decay_start: float = 80
    decay_end: float = 175
    final_fraction: float = 0.01
    total_epochs: int = 200
    batch_size: int = 120

    def __post_init__(self):
        if not 0 <= self.warmup_epochs <= self.decay_start <= self.decay_end <= self.total_epochs:
            raise ConfigError(
                "need 0 <= warmup_epochs <= decay_start <= decay_end <= total_epochs, got "
                f"{self.warmup_epochs}, {self.decay_start}, {self.decay_end}, {self.total_epochs}"
            )
        if not 0 < self.final_fraction <= 1:
            raise ConfigError("final_fraction must lie in (0, 1]")
        if self.max_lr < 0:
            raise ConfigError("max_lr must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def learning_rate(epoch: float, cfg: ScheduleConfig) -> float:
    """Linear warmup from 0, hold, linear decay to ``final_fraction * max_lr``, hold."""
    if not 0 <= epoch <= cfg.total_epochs:
        raise DomainError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    top, low = cfg.max_lr, cfg.max_lr * cfg.final_fraction
    if epoch < cfg.warmup_epochs:
        return top * epoch / cfg.warmup_epochs
    if epoch <= cfg.decay_start:
        return top
    if epoch < cfg.decay_end:
        frac = (epoch - cfg.decay_start) / (cfg.decay_end - cfg.decay_start)
        return top + frac * (low - top)
    return low


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def init_moments(params: Sequence[torch.Tensor]) -> dict:
    return {
        "step": 0,
        "m": [torch.zeros_like(p) for p in params],
        "v": [torch.zeros_like(p) for p in params],
    }


def optimize_step(params, grads, moments, lr, cfg: AdamConfig = AdamConfig()):
    """One bias-corrected Adam update; returns new ``(params, moments)``.

    Inputs are left untouched.
    """
    if len(params) != len(grads) or len(params) != len(moments["m"]):
        raise ShapeError("params, grads and moments differ in length")
    step = moments["step"] + 1
    c1 = 1 - cfg.beta1**step
    c2 = 1 - cfg.beta2**step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, moments["m"], moments["v"]):
        if g is None:
            g = torch.zeros_like(p)
        if p.shape != g.shape:
            raise ShapeError(f"param {tuple(p.shape)} vs grad {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            raise NumericError("non-finite gradient")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        if lr == 0:
            new_p.append(p.clone())
        else:
            new_p.append(p - lr * (m / c1) / ((v / c2).sqrt() + cfg.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, {"step": step, "m": new_m, "v": new_v}


def average_precision(scores, labels) -> float:
    """Step-wise AP over score thresholds.

    Items with equal scores form one block: they enter the ranked list together,
    so precision is evaluated only at distinct thresholds. Returns NaN when
    there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels) > 0.5
    n_pos = labels.sum()
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # last index of every tie block
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    recall_gain = np.diff(np.r_[0, tp_at]) / n_pos
    return float(np.sum(precision * recall_gain))


@dataclass
class EvalResult:
    ap: np.ndarray
    map: float

    @property
    def valid_classes(self) -> np.ndarray:
        return np.flatnonzero(~np.isnan(self.ap))


def mean_average_precision(scores: np.ndarray, targets: np.ndarray) -> EvalResult:
    if len(scores) == 0:
        raise DomainError("empty evaluation set")
    ap = np.array([average_precision(scores[:, c], targets[:, c]) for c in range(scores.shape[1])])
    valid = ~np.isnan(ap)
    if not valid.any():
        raise DomainError("no class has a positive example")
    return EvalResult(ap, float(ap[valid].mean()))


@torch.no_grad()
def predict(model: Network, specs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits for ``(N, n_mels, frames)`` features in evaluation mode."""
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(specs), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(specs[i:i + batch_size], dtype=np.float32))
        out.append(model(x[:, None]).numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.n_classes), np.float32)


def evaluate(model: Network, eval_set: TaggingDataset) -> EvalResult:
    if len(eval_set) == 0:
        raise DomainError("empty evaluation set")
    if eval_set.manifest.class_count != model.cfg.n_classes:
        raise ConfigError(
            f"model predicts {model.cfg.n_classes} classes, eval set has {eval_set.manifest.class_count}"
        )
    return mean_average_precision(predict(model, eval_set.features()), eval_set.labels)


@dataclass
class TrainState:
    model: Network
    moments: dict
    epoch: int = 0
    seed: int = 0
    best: EvalResult | None = None
    history: list[dict] = field(default_factory=list)
    adam: AdamConfig = field(default_factory=AdamConfig)


def init_state(cfg: NetworkConfig, seed: int = 0, adam: AdamConfig = AdamConfig()) -> TrainState:
    torch.manual_seed(seed)
    model = build_network(cfg)
    return TrainState(model, init_moments(list(model.parameters())), seed=seed, adam=adam)


class TrainingAborted(NumericError):
    pass


def train_epoch(state: TrainState, dataset: TaggingDataset, teacher_store: TeacherLogitsStore | None,
                kd_cfg: KDConfig, schedule: ScheduleConfig, epoch_size: int | None = None) -> TrainState:
    """Run one epoch over an importance-sampled subset and update ``state`` in place.

    Every random choice is derived from ``(state.seed, state.epoch)``, so a
    state restored from a checkpoint continues exactly as the original would.
    """
    model, n_classes = state.model, state.model.cfg.n_classes
    if dataset.manifest.class_count != n_classes:
        raise ConfigError(f"dataset has {dataset.manifest.class_count} classes, model {n_classes}")
    if kd_cfg.uses_teacher:
        if teacher_store is None:
            raise ConfigError("lambda < 1 needs a teacher store")
        if teacher_store.class_count != n_classes:
            raise ConfigError(f"teacher store has {teacher_store.class_count} classes, model {n_classes}")
        soft_all = teacher_store.soft_labels(dataset.clip_ids, kd_cfg.tau)
    else:
        soft_all = None
    if state.epoch >= schedule.total_epochs:
        raise DomainError(f"epoch {state.epoch} is past the schedule ({schedule.total_epochs})")

    epoch = state.epoch
    sampler = SamplerState(compute_sample_weights(dataset.manifest), state.seed,
                           min(epoch_size or len(dataset), len(dataset)))
    rng = np.random.default_rng([state.seed, epoch, 1])
    torch.manual_seed(state.seed * 100_003 + epoch)
    indices = sample_epoch(sampler, epoch)
    indices = indices[rng.permutation(len(indices))]
    bs = schedule.batch_size
    steps = max(1, -(-len(indices) // bs))
    params = list(model.parameters())
    model.train()
    losses = []
    for step in range(steps):
        batch = indices[step * bs:(step + 1) * bs]
        specs = dataset.spectrograms(batch, rng)
        y = dataset.labels[batch]
        soft = soft_all[batch] if soft_all is not None else None
        if dataset.augment.mixup and kd_cfg.mixup_alpha > 0:
            lam = sample_mix_lambda(kd_cfg.mixup_alpha, rng, size=len(batch))
            specs, y, soft = mixup_batch(specs, y, soft, lam, rng.permutation(len(batch)))
        x = torch.from_numpy(np.ascontiguousarray(specs, dtype=np.float32))[:, None]
        logits = model(x)
        loss = kd_loss(logits, torch.from_numpy(np.asarray(y, np.float32)),
                       None if soft is None else torch.from_numpy(np.asarray(soft, np.float32)),
                       kd_cfg)
        if not torch.isfinite(loss):
            ids = [dataset.clip_ids[i] for i in batch[:10]]
            raise TrainingAborted(f"non-finite loss at epoch {epoch} step {step}; batch ids {ids}")
        model.zero_grad(set_to_none=True)
        loss.backward()
        lr = learning_rate(epoch + step / steps, schedule)
        with torch.no_grad():
            new_p, state.moments = optimize_step(params, [p.grad for p in params], state.moments,
                                                 lr, state.adam)
            for p, q in zip(params, new_p):
                p.copy_(q)
        losses.append(loss.item())
    state.epoch += 1
    state.history.append({"epoch": state.epoch, "lr": learning_rate(epoch, schedule),
                          "train_loss": float(np.mean(losses)), "step_losses": losses})
    return state


def save_state(state: TrainState, path, extra: dict | None = None) -> Path:
    arrays = {}
    for i, (m, v) in enumerate(zip(state.moments["m"], state.moments["v"])):
        arrays[f"adam_m/{i}"] = m.numpy()
        arrays[f"adam_v/{i}"] = v.numpy()
    meta = {
        "epoch": state.epoch,
        "seed": state.seed,
        "adam_step": state.moments["step"],
        "adam": asdict(state.adam),
        "best_map": None if state.best is None else state.best.map,
        "history": [{k: v for k, v in h.items() if k != "step_losses"} for h in state.history],
        **(extra or {}),
    }
    return save_checkpoint(state.model, path, extra=meta, arrays=arrays)


def load_state(path) -> TrainState:
    meta, model_state, arrays = read_checkpoint(path)
    model = build_network(NetworkConfig.from_dict(meta["network"]))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in model_state.items()})
    extra = meta["extra"]
    n = len(list(model.parameters()))
    moments = {
        "step": extra["adam_step"],
        "m": [torch.from_numpy(arrays[f"adam_m/{i}"].copy()) for i in range(n)],
        "v": [torch.from_numpy(arrays[f"adam_v/{i}"].copy()) for i in range(n)],
    }
    state = TrainState(model, moments, epoch=extra["epoch"], seed=extra["seed"],
                       adam=AdamConfig(**extra["adam"]), history=list(extra.get("history", [])))
    return state

"""Run configuration: flat ``section.key=value`` files with command-line overrides."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import AugmentConfig
from .distillation import KDConfig
from .errors import AudioKDError, ConfigError
from .frontend import MelConfig
from .network import NetworkConfig
from .trainer import AdamConfig, ScheduleConfig

__all__ = ["RunConfig", "PathsConfig", "parse_config_text", "load_config", "dump_config"]


@dataclass(frozen=True)
class PathsConfig:
    train_manifest: str | None = None
    eval_manifest: str | None = None
    teacher_store: str | None = None
    output_dir: str = "runs/default"
    data_root: str | None = None
    clip_seconds: float | None = None  # crop or zero-pad clips to this length

    def __post_init__(self):
        if self.clip_seconds is not None and not self.clip_seconds > 0:
            raise ConfigError("paths.clip_seconds must be positive")


@dataclass(frozen=True)
class RunConfig:
    mel: MelConfig = field(default_factory=MelConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    epoch_size: int | None = None

    def __post_init__(self):
        if self.network.n_mels != self.mel.n_mels:
            raise ConfigError(
                f"network.n_mels={self.network.n_mels} differs from mel.n_mels={self.mel.n_mels}"
            )
        if self.epoch_size is not None and self.epoch_size < 1:
            raise ConfigError("run.epoch_size must be >= 1")


TOP_LEVEL = ("seed", "epoch_size")
_TYPES = typing.get_type_hints(RunConfig)
SECTIONS = tuple(k for k in _TYPES if k not in TOP_LEVEL)


def _convert(raw: str, hint, key: str):
    optional = typing.get_origin(hint) in (typing.Union, types.UnionType)
    if optional and raw.strip().lower() in ("", "none", "null"):
        return None
    target = next(a for a in typing.get_args(hint) if a is not type(None)) if optional else hint
    try:
        if target is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {target.__name__}") from None


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment. Later keys win."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(values: dict[str, str]) -> RunConfig:
    """Validate flat values into a ``RunConfig``; errors name the offending field."""
    grouped: dict[str, dict] = {s: {} for s in SECTIONS}
    top = {}
    for key, raw in values.items():
        section, _, name = key.partition(".")
        if section == "run" and name in TOP_LEVEL:
            top[name] = _convert(raw, _TYPES[name], key)
            continue
        if section not in SECTIONS:
            raise ConfigError(f"{key}: unknown section {section!r}")
        cls = _TYPES[section]
        hints = typing.get_type_hints(cls)
        if name not in hints:
            raise ConfigError(f"{key}: unknown field (known: {', '.join(sorted(hints))})")
        grouped[section][name] = _convert(raw, hints[name], key)
    parts = {}
    for section, kwargs in grouped.items():
        try:
            parts[section] = _TYPES[section](**kwargs)
        except AudioKDError as exc:
            raise ConfigError(f"{section}: {exc}") from None
    # the network sees the same mel resolution as the frontend unless set explicitly
    if "n_mels" not in grouped["network"] and "n_mels" in grouped["mel"]:
        parts["network"] = dataclasses.replace(parts["network"], n_mels=parts["mel"].n_mels)
    return RunConfig(**parts, **top)


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_config_text(text))
    values.update(parse_config_text("\n".join(overrides or [])))
    return build_config(values)


def dump_config(cfg: RunConfig) -> str:
    """Serialize every field, so the snapshot alone reproduces the run."""
    lines = [f"run.seed={cfg.seed}", f"run.epoch_size={'none' if cfg.epoch_size is None else cfg.epoch_size}"]
    for section in SECTIONS:
        for k, v in dataclasses.asdict(getattr(cfg, section)).items():
            lines.append(f"{section}.{k}={'none' if v is None else v}")
    return "\n".join(lines) + "\n"

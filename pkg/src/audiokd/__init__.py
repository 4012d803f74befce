"""Efficient audio tagging with MobileNet students distilled from transformer ensembles."""

from .complexity import NetworkDescription, analyze, frontier, transformer_description
from .config import RunConfig, load_config
from .dataset import (
    AugmentConfig,
    DatasetManifest,
    SamplerState,
    TaggingDataset,
    compute_sample_weights,
    read_manifest,
    sample_epoch,
)
from .distillation import (
    KDConfig,
    TeacherLogitsStore,
    average_ensemble,
    kd_loss,
    read_store,
    write_store,
)
from .errors import AudioKDError
from .frontend import MelConfig, compute_mel, load_waveform
from .network import NetworkConfig, build_network, count_parameters, load_checkpoint, save_checkpoint
from .trainer import ScheduleConfig, evaluate, learning_rate, train_epoch

__version__ = "0.1.0"

__all__ = [
    "AudioKDError",
    "AugmentConfig",
    "DatasetManifest",
    "KDConfig",
    "MelConfig",
    "NetworkConfig",
    "NetworkDescription",
    "RunConfig",
    "SamplerState",
    "ScheduleConfig",
    "TaggingDataset",
    "TeacherLogitsStore",
    "analyze",
    "average_ensemble",
    "build_network",
    "compute_mel",
    "compute_sample_weights",
    "count_parameters",
    "evaluate",
    "frontier",
    "kd_loss",
    "learning_rate",
    "load_checkpoint",
    "load_config",
    "load_waveform",
    "read_manifest",
    "read_store",
    "sample_epoch",
    "save_checkpoint",
    "train_epoch",
    "transformer_description",
    "write_store",
]

"""Width-scalable MobileNetV3-Large audio taggers.

The backbone follows the canonical MobileNetV3-Large stage table. Every channel
count is scaled by ``alpha`` and rounded to a multiple of 8. Blocks that carry
squeeze-and-excitation in the canonical table get either channel-wise SE,
frequency-wise SE, or nothing, depending on ``NetworkConfig.se_mode``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from math import ceil
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import complexity as cx
from .errors import ConfigError, FormatError, ShapeError

__all__ = [
    "NetworkConfig",
    "BlockSpec",
    "MOBILENETV3_LARGE",
    "SE_MODES",
    "HEADS",
    "width_scale",
    "ChannelSE",
    "FrequencySE",
    "SEBlock",
    "InvertedResidual",
    "Network",
    "build_network",
    "forward",
    "count_parameters",
    "apply_se",
    "save_checkpoint",
    "load_checkpoint",
]

SE_MODES = ("none", "channel", "frequency")
HEADS = ("mlp", "fully_conv", "attn_2", "attn_4")
STEM_CHANNELS = 16
LAST_HIDDEN = 1280
TOTAL_STRIDE = 32


def width_scale(base_channels: int, alpha: float) -> int:
    """``base_channels * alpha`` rounded to the nearest multiple of 8 (at least 8)."""
    if base_channels < 1 or alpha <= 0:
        raise ConfigError(f"need base_channels >= 1 and alpha > 0, got {base_channels}, {alpha}")
    return max(8, int(base_channels * alpha / 8 + 0.5) * 8)


class BlockSpec(NamedTuple):
    kernel: int
    expansion_channels: int
    out_channels: int
    stride: int
    use_se: bool
    activation: str


# kernel, expansion, out, stride, SE, activation
MOBILENETV3_LARGE = (
    BlockSpec(3, 16, 16, 1, False, "relu"),
    BlockSpec(3, 64, 24, 2, False, "relu"),
    BlockSpec(3, 72, 24, 1, False, "relu"),
    BlockSpec(5, 72, 40, 2, True, "relu"),
    BlockSpec(5, 120, 40, 1, True, "relu"),
    BlockSpec(5, 120, 40, 1, True, "relu"),
    BlockSpec(3, 240, 80, 2, False, "hard_swish"),
    BlockSpec(3, 200, 80, 1, False, "hard_swish"),
    BlockSpec(3, 184, 80, 1, False, "hard_swish"),
    BlockSpec(3, 184, 80, 1, False, "hard_swish"),
    BlockSpec(3, 480, 112, 1, True, "hard_swish"),
    BlockSpec(3, 672, 112, 1, True, "hard_swish"),
    BlockSpec(5, 672, 160, 2, True, "hard_swish"),
    BlockSpec(5, 960, 160, 1, True, "hard_swish"),
    BlockSpec(5, 960, 160, 1, True, "hard_swish"),
)


@dataclass(frozen=True)
class NetworkConfig:
    alpha: float = 1.0
    se_mode: str = "channel"
    head: str = "mlp"
    n_classes: int = 527
    n_mels: int = 128
    se_reduction: int = 4
    dropout: float = 0.2
    bn_momentum: float = 0.01  # torch convention: weight of the newest batch
    n_frames: int = 1000  # resolution used for the default complexity description

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.se_mode not in SE_MODES:
            raise ConfigError(f"se_mode must be one of {SE_MODES}, got {self.se_mode!r}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if self.n_mels < TOTAL_STRIDE:
            raise ConfigError(
                f"n_mels={self.n_mels} is too small for the stride stack (need >= {TOTAL_STRIDE})"
            )
        if self.se_reduction < 1:
            raise ConfigError("se_reduction must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if not 0 < self.bn_momentum <= 1:
            raise ConfigError("bn_momentum must be in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _activation(name: str) -> nn.Module:
    return nn.Hardswish() if name == "hard_swish" else nn.ReLU()


def _out_size(n: int, stride: int) -> int:
    return ceil(n / stride)


class ConvBNAct(nn.Sequential):
    def __init__(self, cin, cout, kernel=1, stride=1, groups=1, activation="relu"):
        layers = [
            nn.Conv2d(cin, cout, kernel, stride, kernel // 2, groups=groups, bias=False),
            nn.BatchNorm2d(cout, eps=0.001, momentum=0.01),
        ]
        if activation is not None:
            layers.append(_activation(activation))
        super().__init__(*layers)

    def describe(self, name, h, w):
        conv, bn = self[0], self[1]
        s = conv.stride[0]
        ho, wo = _out_size(h, s), _out_size(w, s)
        return [
            cx.conv(conv.in_channels, conv.out_channels, *conv.kernel_size, ho, wo,
                    groups=conv.groups, stride=conv.stride, name=f"{name}.conv"),
            cx.norm(bn.num_features, name=f"{name}.bn"),
        ], ho, wo


class SEBlock(nn.Module):
    """Two-layer bottleneck gate computed from mean statistics."""

    mode = ""

    def __init__(self, size: int, reduction: int = 4, squeeze: int | None = None):
        super().__init__()
        self.size = size
        squeeze = squeeze or max(1, size // reduction)
        self.fc1 = nn.Linear(size, squeeze)
        self.fc2 = nn.Linear(squeeze, size)

    def gate(self, stats: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(F.relu(self.fc1(stats))))

    def describe(self, name):
        return [
            cx.linear(self.fc1.in_features, self.fc1.out_features, name=f"{name}.fc1", branch=True),
            cx.linear(self.fc2.in_features, self.fc2.out_features, name=f"{name}.fc2", branch=True),
        ]


class ChannelSE(SEBlock):
    """Gate per channel from the mean over frequency and time."""

    mode = "channel"

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__(channels, squeeze=width_scale(channels, 1 / reduction))

    def forward(self, x):
        if x.shape[1] != self.size:
            raise ShapeError(f"channel SE built for {self.size} channels, got {x.shape[1]}")
        g = self.gate(x.mean(dim=(2, 3)))
        return x * g[:, :, None, None]


class FrequencySE(SEBlock):
    """Gate per frequency bin from the mean over channels and time.

    Parameter count depends only on the frequency extent, not on the width.
    """

    mode = "frequency"

    def forward(self, x):
        if x.shape[2] != self.size:
            raise ShapeError(f"frequency SE built for {self.size} bins, got {x.shape[2]}")
        g = self.gate(x.mean(dim=(1, 3)))
        return x * g[:, None, :, None]


def apply_se(features: torch.Tensor, block: SEBlock) -> torch.Tensor:
    if features.ndim != 4:
        raise ShapeError(f"expected B x C x F x T features, got {tuple(features.shape)}")
    return block(features)


class InvertedResidual(nn.Module):
    def __init__(self, cin: int, spec: BlockSpec, alpha: float, se_mode: str, n_freq: int,
                 se_reduction: int = 4):
        super().__init__()
        exp = width_scale(spec.expansion_channels, alpha)
        cout = width_scale(spec.out_channels, alpha)
        self.spec = spec
        self.in_channels, self.out_channels = cin, cout
        self.expand = ConvBNAct(cin, exp, 1, activation=spec.activation) if exp != cin else None
        self.depthwise = ConvBNAct(exp, exp, spec.kernel, spec.stride, groups=exp,
                                   activation=spec.activation)
        self.out_freq = _out_size(n_freq, spec.stride)
        if spec.use_se and se_mode == "channel":
            self.se = ChannelSE(exp, se_reduction)
        elif spec.use_se and se_mode == "frequency":
            self.se = FrequencySE(self.out_freq, se_reduction)
        else:
            self.se = None
        self.project = ConvBNAct(exp, cout, 1, activation=None)
        self.residual = spec.stride == 1 and cin == cout

    def forward(self, x):
        y = self.expand(x) if self.expand is not None else x
        y = self.depthwise(y)
        if self.se is not None:
            y = self.se(y)
        y = self.project(y)
        return x + y if self.residual else y

    def describe(self, name, h, w):
        layers = []
        if self.expand is not None:
            part, h, w = self.expand.describe(f"{name}.expand", h, w)
            layers += part
        part, h, w = self.depthwise.describe(f"{name}.depthwise", h, w)
        layers += part
        if self.se is not None:
            layers += self.se.describe(f"{name}.se")
        part, h, w = self.project.describe(f"{name}.project", h, w)
        return layers + part, h, w


class MLPHead(nn.Module):
    def __init__(self, cin, hidden, n_classes, dropout):
        super().__init__()
        self.fc1 = nn.Linear(cin, hidden)
        self.act = nn.Hardswish()
        self.dropout = nn.Dropout(dropout)
        self.classifier = nn.Linear(hidden, n_classes)

    def forward(self, x):
        x = x.mean(dim=(2, 3))
        return self.classifier(self.dropout(self.act(self.fc1(x))))

    def describe(self, name, h, w):
        return [
            cx.linear(self.fc1.in_features, self.fc1.out_features, name=f"{name}.fc1"),
            cx.linear(self.classifier.in_features, self.classifier.out_features,
                      name=f"{name}.classifier"),
        ]


class FullyConvHead(nn.Module):
    def __init__(self, cin, n_classes, dropout):
        super().__init__()
        self.dropout = nn.Dropout(dropout)
        self.classifier = nn.Conv2d(cin, n_classes, 1)

    def forward(self, x):
        return self.classifier(self.dropout(x)).mean(dim=(2, 3))

    def describe(self, name, h, w):
        c = self.classifier
        return [cx.conv(c.in_channels, c.out_channels, 1, 1, h, w, bias=True,
                        name=f"{name}.classifier")]


class AttentionPoolingHead(nn.Module):
    """Multi-head attention pooling over time.

    Frequency is averaged out first. Each head scores every time step per
    class with a sigmoid, normalizes the scores over time, and uses them to
    pool per-step class logits. Heads are combined with learned weights.
    """

    def __init__(self, cin, n_classes, heads, dropout, eps=1e-7):
        super().__init__()
        self.heads, self.n_classes, self.eps = heads, n_classes, eps
        self.dropout = nn.Dropout(dropout)
        self.attention = nn.Linear(cin, heads * n_classes)
        self.classifier = nn.Linear(cin, heads * n_classes)
        self.head_weight = nn.Parameter(torch.full((heads,), 1.0 / heads))

    def forward(self, x):
        x = self.dropout(x.mean(dim=2).transpose(1, 2))  # B x T x C
        b, t, _ = x.shape
        att = torch.sigmoid(self.attention(x)).clamp(self.eps, 1 - self.eps)
        att = att.view(b, t, self.heads, self.n_classes)
        att = att / att.sum(dim=1, keepdim=True)
        logits = self.classifier(x).view(b, t, self.heads, self.n_classes)
        pooled = (att * logits).sum(dim=1)  # B x heads x classes
        return (pooled * self.head_weight[None, :, None]).sum(dim=1)

    def describe(self, name, h, w):
        a, c = self.attention, self.classifier
        return [
            cx.linear(a.in_features, a.out_features, tokens=w, name=f"{name}.attention",
                      branch=True),
            cx.linear(c.in_features, c.out_features, tokens=w, name=f"{name}.classifier"),
            cx.scale(self.heads, name=f"{name}.head_weight"),
        ]


class Network(nn.Module):
    """Stem, fifteen inverted residual blocks, 1x1 expansion conv, head."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        a = cfg.alpha
        stem = width_scale(STEM_CHANNELS, a)
        self.stem = ConvBNAct(1, stem, 3, 2, activation="hard_swish")
        n_freq = _out_size(cfg.n_mels, 2)
        blocks, cin = [], stem
        for spec in MOBILENETV3_LARGE:
            block = InvertedResidual(cin, spec, a, cfg.se_mode, n_freq, cfg.se_reduction)
            blocks.append(block)
            cin, n_freq = block.out_channels, block.out_freq
        self.blocks = nn.Sequential(*blocks)
        last = 6 * cin
        self.last_conv = ConvBNAct(cin, last, 1, activation="hard_swish")
        if cfg.head == "mlp":
            self.head = MLPHead(last, width_scale(LAST_HIDDEN, a), cfg.n_classes, cfg.dropout)
        elif cfg.head == "fully_conv":
            self.head = FullyConvHead(last, cfg.n_classes, cfg.dropout)
        else:
            heads = int(cfg.head.split("_")[1])
            self.head = AttentionPoolingHead(last, cfg.n_classes, heads, cfg.dropout)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                m.momentum = self.cfg.bn_momentum
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, 0, 0.01)
                nn.init.zeros_(m.bias)

    def features(self, x):
        return self.last_conv(self.blocks(self.stem(x)))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.cfg.n_mels:
            raise ShapeError(
                f"expected B x 1 x {self.cfg.n_mels} x T input, got {tuple(x.shape)}"
            )
        return self.head(self.features(x))

    def describe(self, n_frames: int | None = None) -> cx.NetworkDescription:
        """Layer shapes for one input of ``n_mels x n_frames``."""
        h, w = self.cfg.n_mels, n_frames or self.cfg.n_frames
        layers, oh, ow = self.stem.describe("stem", h, w)
        for i, block in enumerate(self.blocks):
            part, oh, ow = block.describe(f"blocks.{i}", oh, ow)
            layers += part
        part, oh, ow = self.last_conv.describe("last_conv", oh, ow)
        layers += part + self.head.describe("head", oh, ow)
        return cx.NetworkDescription(layers, input_resolution=(h, w))

    @property
    def description(self) -> cx.NetworkDescription:
        return self.describe()

    def se_parameters(self) -> int:
        return sum(p.numel() for b in self.blocks if b.se is not None for p in b.se.parameters())

    def backbone_parameters(self) -> int:
        return count_parameters(self) - sum(p.numel() for p in self.head.parameters())


def build_network(cfg: NetworkConfig) -> Network:
    return Network(cfg)


def forward(net: Network, batch) -> torch.Tensor:
    if not isinstance(batch, torch.Tensor):
        batch = torch.as_tensor(np.asarray(batch, dtype=np.float32))
    return net(batch)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


CHECKPOINT_MAGIC = "audiokd-checkpoint-v1"


def save_checkpoint(net: Network, path, extra: dict | None = None,
                    arrays: dict[str, np.ndarray] | None = None) -> Path:
    """Write config, state dict and optional extra arrays to an ``.npz`` container.

    Tensors are stored as raw numpy arrays, so a load round-trips bit-exactly.
    """
    path = Path(path)
    meta = {"magic": CHECKPOINT_MAGIC, "network": asdict(net.cfg), "extra": extra or {}}
    payload = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for name, t in net.state_dict().items():
        payload[f"model/{name}"] = t.detach().cpu().numpy()
    for name, a in (arrays or {}).items():
        payload[f"extra/{name}"] = np.asarray(a)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray]]:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in data:
        raise FormatError(f"{path} is not a checkpoint (no metadata)")
    meta = json.loads(data.pop("__meta__").tobytes().decode())
    if meta.get("magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: unexpected checkpoint magic {meta.get('magic')!r}")
    state = {k[len("model/"):]: v for k, v in data.items() if k.startswith("model/")}
    extra = {k[len("extra/"):]: v for k, v in data.items() if k.startswith("extra/")}
    return meta, state, extra


def load_checkpoint(path) -> tuple[Network, dict]:
    """Rebuild the network stored at ``path``; returns ``(net, extra_metadata)``."""
    meta, state, _ = read_checkpoint(path)
    net = build_network(NetworkConfig.from_dict(meta["network"]))
    net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in state.items()})
    return net, meta["extra"]

"""MAC and parameter accounting for convolutional, linear and attention layers.

Only multiply-accumulates inside conv, linear and attention layers are counted.
Biases, activations, pooling, normalization and gating multiplies cost nothing,
but normalization and scale parameters still count towards the parameter total.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from math import ceil
from typing import Iterable, Sequence

from .errors import ConsistencyError, ShapeError

__all__ = [
    "LayerShape",
    "conv",
    "linear",
    "attention",
    "norm",
    "scale",
    "NetworkDescription",
    "LayerReport",
    "ComplexityReport",
    "FrontierRow",
    "macs_conv",
    "macs_linear",
    "macs_attention",
    "params_of",
    "macs_of",
    "analyze",
    "frontier",
    "write_frontier_csv",
    "read_frontier_csv",
    "transformer_description",
]

KINDS = ("conv", "linear", "attention", "norm", "scale")


@dataclass(frozen=True)
class LayerShape:
    """Shape record of one layer.

    ``kind`` selects which fields matter:

    * conv: cin, cout, kh, kw, groups, hout, wout, has_bias (stride_h/stride_w
      only used for composition checks)
    * linear: din, dout, has_bias; ``tokens`` is how many positions the same
      weights are applied to
    * attention: seq_len, dim, heads
    * norm: channels (affine scale and shift, no MACs)
    * scale: channels (free parameters, no MACs)

    ``branch`` marks side-path layers (squeeze-and-excitation) that read and
    write back a tensor of the trunk without changing its shape.
    """

    kind: str
    name: str = ""
    cin: int = 0
    cout: int = 0
    kh: int = 1
    kw: int = 1
    groups: int = 1
    hout: int = 1
    wout: int = 1
    stride_h: int = 1
    stride_w: int = 1
    din: int = 0
    dout: int = 0
    tokens: int = 1
    seq_len: int = 0
    dim: int = 0
    heads: int = 1
    channels: int = 0
    has_bias: bool = False
    branch: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")


def conv(cin, cout, kh, kw, hout, wout, *, groups=1, stride=(1, 1), bias=False,
         name="", branch=False) -> LayerShape:
    return LayerShape("conv", name, cin=cin, cout=cout, kh=kh, kw=kw, groups=groups,
                      hout=hout, wout=wout, stride_h=stride[0], stride_w=stride[1],
                      has_bias=bias, branch=branch)


def linear(din, dout, *, bias=True, tokens=1, name="", branch=False) -> LayerShape:
    return LayerShape("linear", name, din=din, dout=dout, has_bias=bias, tokens=tokens,
                      branch=branch)


def attention(seq_len, dim, heads=1, *, name="") -> LayerShape:
    return LayerShape("attention", name, seq_len=seq_len, dim=dim, heads=heads)


def norm(channels, *, name="") -> LayerShape:
    return LayerShape("norm", name, channels=channels)


def scale(channels, *, name="") -> LayerShape:
    return LayerShape("scale", name, channels=channels)


def _check_conv(s: LayerShape):
    dims = (s.cin, s.cout, s.kh, s.kw, s.groups, s.hout, s.wout)
    if min(dims) < 1:
        raise ShapeError(f"conv dims must be >= 1: {s}")
    if s.cin % s.groups or s.cout % s.groups:
        raise ShapeError(f"groups={s.groups} must divide cin={s.cin} and cout={s.cout}")


def macs_conv(s: LayerShape) -> int:
    _check_conv(s)
    return (s.cin // s.groups) * s.cout * s.kh * s.kw * s.hout * s.wout


def macs_linear(s: LayerShape) -> int:
    if min(s.din, s.dout, s.tokens) < 1:
        raise ShapeError(f"linear dims must be >= 1: {s}")
    return s.din * s.dout * s.tokens


def macs_attention(s: LayerShape) -> int:
    L, d, h = s.seq_len, s.dim, s.heads
    if min(L, d, h) < 1:
        raise ShapeError(f"attention dims must be >= 1: {s}")
    if d % h:
        raise ShapeError(f"model dim {d} not divisible by {h} heads")
    return 4 * L * d * d + 2 * L * L * d


def macs_of(s: LayerShape) -> int:
    if s.kind == "conv":
        return macs_conv(s)
    if s.kind == "linear":
        return macs_linear(s)
    if s.kind == "attention":
        return macs_attention(s)
    return 0


def params_of(s: LayerShape) -> int:
    if s.kind == "conv":
        _check_conv(s)
        return (s.cin // s.groups) * s.cout * s.kh * s.kw + (s.cout if s.has_bias else 0)
    if s.kind == "linear":
        return s.din * s.dout + (s.dout if s.has_bias else 0)
    if s.kind == "attention":
        # Q, K, V and output projections, with biases
        return 4 * (s.dim * s.dim + s.dim)
    if s.kind == "norm":
        return 2 * s.channels
    return s.channels


@dataclass
class NetworkDescription:
    layers: list[LayerShape] = field(default_factory=list)
    input_resolution: tuple[int, int] = (0, 0)
    input_channels: int = 1
    same_padding: bool = True

    def __add__(self, other: "NetworkDescription") -> "NetworkDescription":
        return NetworkDescription(list(self.layers) + list(other.layers),
                                  self.input_resolution, self.input_channels,
                                  self.same_padding)

    def __len__(self):
        return len(self.layers)


def _out_dim(s: LayerShape) -> int:
    return {"conv": s.cout, "linear": s.dout}.get(s.kind, 0)


def check_composable(desc: NetworkDescription) -> None:
    """Raise ConsistencyError unless consecutive layers chain.

    Trunk layers track the running (channels, height, width); a conv expects
    ``cin`` equal to the running channel count and ``hout = ceil(h / stride)``.
    A linear layer after spatial layers consumes the channel vector. Branch
    runs must chain internally and end in the dimension they read, or in the
    output dimension of the next trunk layer.
    """
    c = desc.input_channels
    h, w = desc.input_resolution
    trunk_spatial = desc.same_padding and h > 0 and w > 0
    branch_in = branch_cur = None

    def fail(i, msg):
        raise ConsistencyError(f"layer {i} ({desc.layers[i].name or desc.layers[i].kind}): {msg}")

    for i, s in enumerate(desc.layers):
        if s.branch:
            din = s.cin if s.kind == "conv" else s.din
            if branch_cur is None:
                if din not in (c, h, w):
                    fail(i, f"branch input {din} matches no trunk dim of ({c}, {h}, {w})")
                branch_in = din
            elif din != branch_cur:
                fail(i, f"branch input {din} != previous branch output {branch_cur}")
            branch_cur = _out_dim(s)
            continue
        if branch_cur is not None:
            # a branch either gates the tensor it read or the output of this layer
            if branch_cur not in (branch_in, _out_dim(s)):
                fail(i, f"branch returned {branch_cur}, read {branch_in}")
            branch_in = branch_cur = None
        if s.kind == "conv":
            if s.cin != c:
                fail(i, f"cin {s.cin} != running channels {c}")
            if trunk_spatial and (s.hout != ceil(h / s.stride_h) or s.wout != ceil(w / s.stride_w)):
                fail(i, f"output {s.hout}x{s.wout} inconsistent with input {h}x{w}")
            c, h, w = s.cout, s.hout, s.wout
            trunk_spatial = desc.same_padding
        elif s.kind == "linear":
            if s.din != c:
                fail(i, f"din {s.din} != running features {c}")
            c = s.dout
        elif s.kind == "attention":
            if s.dim != c:
                fail(i, f"model dim {s.dim} != running features {c}")
        elif s.kind == "norm":
            if s.channels != c:
                fail(i, f"norm over {s.channels} != running channels {c}")
    if branch_cur is not None and branch_cur != branch_in:
        raise ConsistencyError("trailing branch does not return to its input dimension")


@dataclass(frozen=True)
class LayerReport:
    name: str
    kind: str
    macs: int
    params: int


@dataclass
class ComplexityReport:
    layers: list[LayerReport]
    total_macs: int
    total_params: int
    input_resolution: tuple[int, int]

    def table(self) -> str:
        """Human-readable per-layer table."""
        width = max([len(r.name) for r in self.layers] + [5])
        lines = [f"{'layer':<{width}}  {'kind':<9} {'params':>12} {'MACs':>15}"]
        for r in self.layers:
            lines.append(f"{r.name:<{width}}  {r.kind:<9} {r.params:>12,} {r.macs:>15,}")
        lines.append(f"{'total':<{width}}  {'':<9} {self.total_params:>12,} {self.total_macs:>15,}")
        f, t = self.input_resolution
        lines.append(f"input resolution: {f} x {t}")
        return "\n".join(lines)


def analyze(desc: NetworkDescription) -> ComplexityReport:
    check_composable(desc)
    rows = [LayerReport(s.name or f"{s.kind}{i}", s.kind, macs_of(s), params_of(s))
            for i, s in enumerate(desc.layers)]
    return ComplexityReport(
        rows,
        total_macs=sum(r.macs for r in rows),
        total_params=sum(r.params for r in rows),
        input_resolution=tuple(desc.input_resolution),
    )


@dataclass(frozen=True)
class FrontierRow:
    label: str
    params: int
    macs: int
    score: float


def frontier(points: Sequence[tuple[str, ComplexityReport, float]]) -> list[FrontierRow]:
    """Rows ordered by total MACs; ties keep their input order."""
    rows = [FrontierRow(label, rep.total_params, rep.total_macs, float(score))
            for label, rep, score in points]
    return sorted(rows, key=lambda r: r.macs)


FRONTIER_HEADER = ("label", "params", "macs", "score")


def write_frontier_csv(rows: Iterable[FrontierRow], fh=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FRONTIER_HEADER)
    for r in rows:
        writer.writerow([r.label, r.params, r.macs, repr(r.score)])
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def read_frontier_csv(text: str) -> list[FrontierRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != FRONTIER_HEADER:
        raise ValueError(f"expected header {','.join(FRONTIER_HEADER)}")
    return [FrontierRow(r["label"], int(r["params"]), int(r["macs"]), float(r["score"]))
            for r in reader]


def transformer_description(n_mels=128, n_frames=998, *, dim=768, depth=12, heads=12,
                            mlp_ratio=4, include_mlp=True, patch=16, stride=10,
                            n_classes=527, extra_tokens=2) -> NetworkDescription:
    """Patch-embedding ViT in the style of an audio spectrogram transformer.

    Overlapping ``patch x patch`` patches with ``stride``, ``depth`` pre-norm
    transformer layers and a linear classifier on the pooled token. With
    ``include_mlp=False`` only the patch embedding and the attention layers
    are described.
    """
    fp = (n_mels - patch) // stride + 1
    tp = (n_frames - patch) // stride + 1
    seq = fp * tp + extra_tokens
    layers = [conv(1, dim, patch, patch, fp, tp, bias=True, name="patch_embed")]
    layers.append(scale(dim * (fp * tp + extra_tokens) + extra_tokens * dim, name="pos_embed+tokens"))
    for i in range(depth):
        layers += [norm(dim, name=f"block{i}.norm1"), attention(seq, dim, heads, name=f"block{i}.attn")]
        if include_mlp:
            layers += [
                norm(dim, name=f"block{i}.norm2"),
                linear(dim, dim * mlp_ratio, tokens=seq, name=f"block{i}.mlp.fc1"),
                linear(dim * mlp_ratio, dim, tokens=seq, name=f"block{i}.mlp.fc2"),
            ]
    layers += [norm(dim, name="norm"), linear(dim, n_classes, name="head")]
    # valid-mode patching does not follow the same-padding size law
    return NetworkDescription(layers, input_resolution=(n_mels, n_frames), same_padding=False)

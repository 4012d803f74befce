# # Width-scaled MobileNets and their cost
#
# The student is a MobileNetV3-Large on a one-channel spectrogram. The width
# multiplier alpha scales every channel count; squeeze-excitation can work on
# channels (default), on frequency, or be switched off; four classifier heads
# are available.

# %%
import torch

from audiokd import complexity as cx
from audiokd.network import NetworkConfig, build_network, count_parameters

for kwargs in [dict(), dict(se_mode="none"), dict(se_mode="frequency"), dict(head="fully_conv"),
               dict(head="attn_2"), dict(head="attn_4")]:
    net = build_network(NetworkConfig(**kwargs))
    print(f"{str(kwargs or 'baseline'):28s} {count_parameters(net) / 1e6:.2f}M parameters")

# %% [markdown]
# Any input length works: the heads pool over time.

# %%
small = build_network(NetworkConfig(alpha=0.5, n_classes=10)).eval()
with torch.no_grad():
    for frames in (300, 1000):
        print(frames, "frames ->", tuple(small(torch.randn(2, 1, 128, frames)).shape))

# %% [markdown]
# Multiply-accumulate counts come from a layer description that mirrors the
# module graph. Widening the network grows the cost roughly with alpha^2.

# %%
rows = []
for alpha in (0.4, 0.5, 0.75, 1.0, 1.5, 2.0):
    rep = cx.analyze(build_network(NetworkConfig(alpha=alpha)).describe(1000))
    rows.append((f"mn{alpha:g}", rep, float("nan")))
print(cx.write_frontier_csv(cx.frontier(rows)))

# %% [markdown]
# For comparison, a PaSST-like transformer (12 attention layers over 16x16
# patches with stride 10) costs about a hundred times more in its attention
# stack alone.

# %%
mn = cx.analyze(build_network(NetworkConfig()).describe(998)).total_macs
for mlp in (False, True):
    tr = cx.analyze(cx.transformer_description(include_mlp=mlp)).total_macs
    print(f"transformer{' + MLP' if mlp else ''}: {tr / 1e9:.1f}G MACs, {tr / mn:.0f}x the MobileNet")

import numpy as np
import pytest
import torch
from torch import nn

from audiokd import complexity as cx
from audiokd.errors import ConfigError, ShapeError
from audiokd.network import (
    BlockSpec,
    ChannelSE,
    FrequencySE,
    InvertedResidual,
    NetworkConfig,
    apply_se,
    build_network,
    count_parameters,
    forward,
    load_checkpoint,
    save_checkpoint,
    width_scale,
)


@pytest.mark.parametrize("base,alpha,expected", [(16, 1.0, 16), (16, 0.5, 8), (112, 2.0, 224),
                                                 (16, 0.1, 8), (40, 0.35, 16), (960, 0.25, 240)])
def test_width_scale(base, alpha, expected):
    assert width_scale(base, alpha) == expected


def test_width_scale_rejects_bad_input():
    with pytest.raises(ConfigError):
        width_scale(16, 0)
    with pytest.raises(ConfigError):
        width_scale(0, 1.0)


def test_too_few_mels():
    with pytest.raises(ConfigError):
        NetworkConfig(n_mels=16)


@pytest.mark.parametrize("kwargs,expected", [
    (dict(), 4.88e6),
    (dict(se_mode="none"), 3.36e6),
    (dict(se_mode="frequency"), 3.37e6),
    (dict(head="fully_conv"), 3.48e6),
])
def test_parameter_counts_match_reported(kwargs, expected):
    net = build_network(NetworkConfig(**kwargs))
    assert count_parameters(net) == pytest.approx(expected, rel=0.02)


def test_single_conv_parameter_count():
    assert count_parameters(nn.Conv2d(3, 5, 3, bias=False)) == 3 * 5 * 9


@pytest.mark.parametrize("head", ["mlp", "fully_conv", "attn_2", "attn_4"])
def test_output_shape_independent_of_time(head):
    net = build_network(NetworkConfig(alpha=0.25, head=head, n_classes=7, n_mels=64)).eval()
    for t in (40, 80, 131):
        assert forward(net, torch.randn(2, 1, 64, t)).shape == (2, 7)


def test_shape_errors():
    net = build_network(NetworkConfig(alpha=0.25, n_mels=64, n_classes=3))
    with pytest.raises(ShapeError):
        net(torch.zeros(1, 1, 32, 50))
    with pytest.raises(ShapeError):
        net(torch.zeros(1, 64, 50))


@pytest.mark.parametrize("head", ["mlp", "fully_conv", "attn_2"])
def test_zero_head_gives_zero_logits(head):
    net = build_network(NetworkConfig(alpha=0.25, head=head, n_mels=32, n_classes=5)).eval()
    with torch.no_grad():
        net.head.classifier.weight.zero_()
        net.head.classifier.bias.zero_()
    out = net(torch.zeros(3, 1, 32, 40))
    assert torch.equal(out, torch.zeros(3, 5))


def test_batch_independence_in_eval_mode():
    torch.manual_seed(0)
    net = build_network(NetworkConfig(alpha=0.25, n_mels=32, n_classes=4)).eval()
    x = torch.randn(2, 1, 32, 48)
    with torch.no_grad():
        both = net(x)
        one = net(x[:1])
    torch.testing.assert_close(both[:1], one, rtol=1e-5, atol=1e-6)


def test_doubling_time_keeps_dimension():
    torch.manual_seed(0)
    net = build_network(NetworkConfig(alpha=0.25, n_mels=32, n_classes=4)).eval()
    x = torch.randn(1, 1, 32, 48)
    with torch.no_grad():
        a, b = net(x), net(torch.cat([x, torch.randn_like(x)], dim=3))
    assert a.shape == b.shape and not torch.equal(a, b)


def test_parameter_monotone_in_alpha():
    counts = [count_parameters(build_network(NetworkConfig(alpha=a))) for a in (0.25, 0.5, 1.0, 2.0)]
    assert counts == sorted(counts)


def test_frequency_se_does_not_scale_with_width():
    small = build_network(NetworkConfig(alpha=0.5, se_mode="frequency"))
    large = build_network(NetworkConfig(alpha=2.0, se_mode="frequency"))
    assert small.se_parameters() == large.se_parameters() > 0

    def se_rows(net):
        return sum(r.params for r in cx.analyze(net.description).layers if ".se." in r.name)

    assert se_rows(small) == se_rows(large) == small.se_parameters()


def test_channel_se_scales_quadratically():
    a = build_network(NetworkConfig(alpha=1.0)).se_parameters()
    b = build_network(NetworkConfig(alpha=2.0)).se_parameters()
    assert 3.5 < b / a < 4.5


@pytest.mark.parametrize("se_mode", ["none", "channel", "frequency"])
def test_head_swap_leaves_backbone(se_mode):
    counts = {build_network(NetworkConfig(se_mode=se_mode, head=h)).backbone_parameters()
              for h in ("mlp", "fully_conv", "attn_2", "attn_4")}
    assert len(counts) == 1


@pytest.mark.parametrize("cfg", [
    NetworkConfig(),
    NetworkConfig(alpha=0.5, se_mode="frequency", head="attn_4", n_mels=64),
    NetworkConfig(alpha=2.0, se_mode="none", head="fully_conv", n_classes=10),
])
def test_description_matches_module(cfg):
    net = build_network(cfg)
    rep = cx.analyze(net.description)
    assert rep.total_params == count_parameters(net)


def test_description_macs_match_traced_convs():
    """Oracle: hook every conv/linear during a real forward pass and count MACs from tensors."""
    net = build_network(NetworkConfig(alpha=0.5, n_mels=64, n_classes=10, head="attn_2")).eval()
    traced = []

    def hook(mod, inp, out):
        if isinstance(mod, nn.Conv2d):
            k = mod.kernel_size[0] * mod.kernel_size[1] * mod.in_channels // mod.groups
            traced.append(out.numel() * k)
        else:
            traced.append(inp[0].numel() // mod.in_features * mod.in_features * mod.out_features)

    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            m.register_forward_hook(hook)
    with torch.no_grad():
        net(torch.zeros(1, 1, 64, 101))
    assert cx.analyze(net.describe(101)).total_macs == sum(traced)


def test_apply_se_identity_gate():
    se = ChannelSE(8)
    with torch.no_grad():
        se.fc2.weight.zero_()
        se.fc2.bias.fill_(1e4)  # sigmoid saturates to exactly 1.0 in float32
    x = torch.randn(2, 8, 3, 5)
    assert torch.equal(apply_se(x, se), x)


def test_channel_se_time_permutation():
    torch.manual_seed(1)
    se = ChannelSE(8)
    x = torch.randn(2, 8, 3, 6)
    perm = torch.randperm(6)
    with torch.no_grad():
        out = apply_se(x, se)
        out_p = apply_se(x[..., perm], se)
        g = se.gate(x.mean(dim=(2, 3)))
        g_p = se.gate(x[..., perm].mean(dim=(2, 3)))
    torch.testing.assert_close(out_p, out[..., perm])
    torch.testing.assert_close(g, g_p)


def test_frequency_se_zero_weights_closed_form():
    se = FrequencySE(3, reduction=1)
    with torch.no_grad():
        se.fc1.weight.zero_()
        se.fc1.bias.zero_()
        se.fc2.weight.zero_()
        se.fc2.bias.fill_(0.7)
    x = torch.arange(24, dtype=torch.float32).reshape(1, 2, 3, 4)
    expected = x * (1 / (1 + np.exp(-0.7)))
    torch.testing.assert_close(apply_se(x, se), expected)


def test_frequency_se_gates_frequency_axis():
    torch.manual_seed(2)
    se = FrequencySE(4)
    x = torch.randn(2, 3, 4, 5)
    g = se.gate(x.mean(dim=(1, 3)))
    torch.testing.assert_close(apply_se(x, se), x * g[:, None, :, None])
    with pytest.raises(ShapeError):
        apply_se(torch.randn(2, 3, 5, 5), se)
    with pytest.raises(ShapeError):
        apply_se(torch.randn(2, 3, 4), se)


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    blocks = nn.Sequential(
        InvertedResidual(8, BlockSpec(3, 16, 8, 1, True, "hard_swish"), 1.0, "channel", 6),
        InvertedResidual(8, BlockSpec(5, 16, 8, 2, True, "relu"), 1.0, "frequency", 6),
    )
    stem = nn.Conv2d(1, 8, 1)
    model = nn.Sequential(stem, blocks).double().eval()
    # move BN shifts off zero so no activation sits exactly on a ReLU kink
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.bias.uniform_(-0.5, 0.5)
                m.weight.uniform_(0.5, 1.5)
    x = torch.randn(2, 1, 6, 7, dtype=torch.float64)
    w = torch.randn(2, 8, 3, 4, dtype=torch.float64)

    def loss():
        return (model(x) * w).sum()

    model.zero_grad()
    loss().backward()
    h = 1e-4
    worst = 0.0
    with torch.no_grad():
        for p in model.parameters():
            flat, grad = p.view(-1), p.grad.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                numeric = (up - down) / (2 * h)
                denom = max(abs(numeric), abs(grad[i].item()), 1e-6)
                worst = max(worst, abs(numeric - grad[i].item()) / denom)
    assert worst < 1e-3


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    net = build_network(NetworkConfig(alpha=0.25, se_mode="frequency", n_mels=32, n_classes=6))
    net.train()
    with torch.no_grad():
        net(torch.randn(4, 1, 32, 40))  # move BN running stats off their defaults
    path = save_checkpoint(net, tmp_path / "net.npz", extra={"note": "x"})
    loaded, extra = load_checkpoint(path)
    assert loaded.cfg == net.cfg and extra == {"note": "x"}
    a, b = net.state_dict(), loaded.state_dict()
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype
        assert a[k].numpy().tobytes() == b[k].numpy().tobytes()

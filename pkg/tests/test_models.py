import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from xrayseq.backbones import build_backbone
from xrayseq.errors import ConfigError, ShapeMismatch, UnknownBackbone
from xrayseq.models import (
    ModelConfig,
    build_model,
    build_sequence_model,
    build_single_image_model,
    count_parameters,
    frozen_digest,
)

TINY = ModelConfig(backbone="tiny")


def tiny_layer_sum(channels=1):
    """Layer-by-layer weights + biases of the three 3x3 conv blocks (8, 16, 16 filters)."""
    total, c_in = 0, channels
    for c_out in (8, 16, 16):
        total += 3 * 3 * c_in * c_out + c_out
        c_in = c_out
    return total


def lstm_param_formula(units, d):
    return 4 * (units * (d + units) + units)


def batch(n, seed=0, channels=1):
    g = np.random.default_rng(seed)
    return [g.random((n, 128, 128, channels), dtype=np.float32) for _ in range(3)]


def test_unknown_backbone():
    with pytest.raises(UnknownBackbone):
        build_backbone("vgg16")


@pytest.mark.parametrize("channels", [1, 3])
def test_tiny_counts_by_hand(channels):
    model = build_model(ModelConfig(backbone="tiny", channels=channels))
    counts = count_parameters(model)
    assert counts.frozen == tiny_layer_sum(channels)
    assert model.feature_dim == 16 * 4 * 4
    assert counts.trainable == 3 * 256 * 15 + 15
    assert counts.total == counts.frozen + counts.trainable


def test_output_shape_and_range():
    model = build_sequence_model(TINY)
    out = model.eval()(*batch(4))
    assert out.shape == (4, 15)
    assert torch.all((out > 0) & (out < 1))


@pytest.mark.parametrize("mode,d_in", [("per_image", 256), ("concat_first", 768)])
def test_lstm_parameter_formula(mode, d_in):
    model = build_sequence_model(ModelConfig(backbone="tiny", use_lstm=True, lstm_sequence_mode=mode))
    lstm = model.head.lstm
    assert sum(p.numel() for p in lstm.parameters()) == lstm_param_formula(50, d_in)
    assert count_parameters(model).trainable == lstm_param_formula(50, d_in) + 50 * 15 + 15
    assert model.eval()(*batch(2)).shape == (2, 15)


def test_freezing_contract():
    model = build_sequence_model(TINY)
    assert all(not p.requires_grad for p in model.backbone.parameters())
    assert all(p.requires_grad for p in model.head.parameters())
    assert {id(p) for p in model.trainable_parameters()}.isdisjoint({id(p) for p in model.backbone.parameters()})
    model.train()
    assert not model.backbone.training and model.head.training


def test_single_image_model():
    single = build_single_image_model(ModelConfig(backbone="tiny", branches=1))
    triple = build_sequence_model(TINY)
    out = single.eval()(batch(4)[2])
    assert out.shape == (4, 15)
    assert torch.all((out > 0) & (out < 1))
    assert count_parameters(single).frozen == count_parameters(triple).frozen
    assert count_parameters(single).trainable == 256 * 15 + 15
    with pytest.raises(ConfigError):
        build_single_image_model(ModelConfig(backbone="tiny", branches=1, use_lstm=True))


def test_seeded_build_identical():
    a = build_single_image_model(ModelConfig(backbone="tiny", branches=1, seed=4))
    b = build_single_image_model(ModelConfig(backbone="tiny", branches=1, seed=4))
    c = build_single_image_model(ModelConfig(backbone="tiny", branches=1, seed=5))
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


@pytest.mark.parametrize(
    "bad",
    [
        dict(lstm_units=0),
        dict(dropout_rate=1.0),
        dict(branches=2),
        dict(pretrained=True),
        dict(lstm_sequence_mode="bidirectional"),
        dict(num_outputs=14),
    ],
)
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        build_model(ModelConfig(backbone="tiny", **bad))


def test_shape_mismatch():
    model = build_sequence_model(TINY)
    with pytest.raises(ShapeMismatch):
        model(*batch(2)[:2])
    with pytest.raises(ShapeMismatch):
        model(*batch(2, channels=3))


def test_weight_sharing():
    model = build_sequence_model(TINY).eval()
    x = batch(2)[0]
    feats = model.features([x, x, x])
    assert torch.equal(feats[:, 0], feats[:, 1]) and torch.equal(feats[:, 1], feats[:, 2])
    with torch.no_grad():
        model.backbone.body[0].weight.add_(0.1)
    after = model.features([x, x, x])
    assert not torch.equal(after[:, 0], feats[:, 0])
    assert torch.equal(after[:, 0], after[:, 1]) and torch.equal(after[:, 1], after[:, 2])


@pytest.mark.parametrize("use_lstm", [False, True])
def test_batch_permutation(use_lstm):
    model = build_sequence_model(ModelConfig(backbone="tiny", use_lstm=use_lstm)).eval()
    xs = batch(5)
    perm = np.array([3, 0, 4, 1, 2])
    out = model(*xs)
    out_perm = model(*[x[perm] for x in xs])
    torch.testing.assert_close(out_perm, out[perm], rtol=1e-6, atol=1e-7)


def test_concatenation_order_before_or_after_flatten():
    model = build_sequence_model(TINY).eval()
    xs = [torch.from_numpy(x).permute(0, 3, 1, 2) for x in batch(3)]
    with torch.no_grad():
        maps = [model.backbone(x) for x in xs]
        after = torch.cat([m.flatten(1) for m in maps], dim=1)
        before = torch.stack(maps, dim=1).flatten(2).flatten(1)
        torch.testing.assert_close(model.head.output(after), model.head.output(before), rtol=0, atol=0)
        torch.testing.assert_close(torch.sigmoid(model.head.output(after)), model(*batch(3)), rtol=1e-6, atol=1e-7)


@settings(max_examples=15, deadline=None)
@given(st.floats(-50, 50), st.floats(0, 20), st.integers(0, 2**16))
def test_probability_range_property(shift, scale, seed):
    model = build_sequence_model(TINY).eval()
    g = np.random.default_rng(seed)
    xs = [(shift + scale * g.standard_normal((2, 128, 128, 1))).astype(np.float32) for _ in range(3)]
    out = model(*xs)
    assert torch.all(torch.isfinite(out))
    # float32 sigmoid saturates to exactly 0 or 1 for |logit| > ~17 (or ~88 on the low side)
    assert torch.all((out >= 0) & (out <= 1))
    logits = model.logits(xs)
    assert torch.all(torch.isfinite(logits))


def test_frozen_digest_stable():
    model = build_sequence_model(TINY)
    assert frozen_digest(model) == frozen_digest(build_sequence_model(TINY))
    with torch.no_grad():
        model.backbone.body[0].bias[0] += 1e-3
    assert frozen_digest(model) != frozen_digest(build_sequence_model(TINY))


@pytest.mark.parametrize(
    "kind,published_count",
    [("resnet50v2", 23_558_528), ("densenet169", 12_636_608), ("mobilenetv2", 2_257_408)],
)
def test_full_backbone_frozen_count(kind, published_count):
    model = build_single_image_model(ModelConfig(backbone=kind, branches=1))
    counts = count_parameters(model)
    assert counts.frozen == published_count
    assert counts.total == counts.frozen + counts.trainable

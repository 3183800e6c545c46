import numpy as np
import pytest

from gage.backbone import (BackboneConfig, RegressionHead, build_backbone, forward_features, get_profile,
                           regression_head)
from gage.errors import ConfigurationError, DimensionError
from gage.tensor import Tensor


def count_resnet18_params(in_ch=1, widths=(64, 128, 256, 512), stem_k=7):
    """Independent block-by-block parameter count (conv weights + bn gamma/beta, no biases)."""
    conv = lambda cin, cout, k: cin * cout * k * k
    bn = lambda c: 2 * c
    total = conv(in_ch, widths[0], stem_k) + bn(widths[0])
    cin = widths[0]
    for stage, w in enumerate(widths):
        for block in range(2):
            total += conv(cin, w, 3) + bn(w) + conv(w, w, 3) + bn(w)
            if cin != w or (block == 0 and stage > 0):
                total += conv(cin, w, 1) + bn(w)
            cin = w
    return total


def test_full_resnet18_param_count():
    bb = build_backbone(get_profile("full").backbone_config("resnet18"), 0)
    assert bb.num_parameters() == count_resnet18_params() == 11_170_240


def test_desk_resnet18_param_count():
    bb = build_backbone(get_profile("desk").backbone_config("resnet18"), 0)
    assert bb.num_parameters() == count_resnet18_params(widths=(16, 32, 64, 128), stem_k=3)


@pytest.mark.parametrize("profile,variant,channels,grid", [
    ("desk", "resnet18", 128, 12), ("desk", "resnet50", 512, 12),
    ("full", "resnet18", 512, 7), ("full", "resnet50", 2048, 7)])
def test_shape_contract(profile, variant, channels, grid):
    cfg = get_profile(profile).backbone_config(variant)
    assert cfg.feature_grid == grid and cfg.feature_dim == channels
    assert cfg.overall_stride * grid == cfg.input_size
    bb = build_backbone(cfg, 0)
    n = 2
    x = Tensor(np.random.default_rng(0).normal(size=(n, 1, cfg.input_size, cfg.input_size)))
    fmap, fvec = forward_features(bb, x, "eval")
    assert fmap.shape == (n, channels, grid, grid)
    assert fvec.shape == (n, channels)
    assert np.all(fmap.data >= 0)  # post-ReLU


def test_eval_forward_is_bit_identical():
    bb = build_backbone(get_profile("desk").backbone_config(), 3)
    x = Tensor(np.random.default_rng(1).normal(size=(3, 1, 96, 96)))
    a = forward_features(bb, x, "eval")
    b = forward_features(bb, x, "eval")
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()


def test_train_mode_updates_running_stats_only_in_train():
    bb = build_backbone(get_profile("desk").backbone_config(), 3)
    before = {k: v.copy() for k, v in bb.buffers.items()}
    x = Tensor(np.random.default_rng(1).normal(size=(2, 1, 96, 96)))
    forward_features(bb, x, "eval")
    assert all(np.array_equal(before[k], v) for k, v in bb.buffers.items())
    forward_features(bb, x, "train")
    assert not np.array_equal(before["stem.conv.running_mean"], bb.buffers["stem.conv.running_mean"])


def test_same_seed_same_weights():
    cfg = get_profile("desk").backbone_config()
    a, b, c = build_backbone(cfg, 5), build_backbone(cfg, 5), build_backbone(cfg, 6)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert not np.array_equal(a.params["stem.conv.weight"].data, c.params["stem.conv.weight"].data)


def test_kaiming_init_std():
    bb = build_backbone(get_profile("full").backbone_config(), 0)
    w = bb.params["layer4.1.conv2.weight"].data
    fan_in = w.shape[1] * w.shape[2] * w.shape[3]
    assert w.std() == pytest.approx(np.sqrt(2.0 / fan_in), rel=0.02)
    assert np.all(bb.params["layer1.0.conv1.gamma"].data == 1)
    assert np.all(bb.params["layer1.0.conv1.beta"].data == 0)


def test_input_errors_name_the_axis():
    bb = build_backbone(get_profile("desk").backbone_config(), 0)
    with pytest.raises(DimensionError, match="channel axis"):
        bb.forward_features(Tensor(np.zeros((1, 3, 96, 96))))
    with pytest.raises(DimensionError, match="spatial"):
        bb.forward_features(Tensor(np.zeros((1, 1, 64, 64))))
    with pytest.raises(ConfigurationError):
        forward_features(bb, Tensor(np.zeros((1, 1, 96, 96))), "predict")


@pytest.mark.parametrize("kwargs", [dict(variant="vgg"), dict(width_multiplier=0), dict(input_size=100),
                                    dict(input_size=32)])
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigurationError):
        BackboneConfig(**kwargs)


def test_in_channels_override():
    cfg = get_profile("desk").backbone_config(in_channels=3)
    fmap, _ = build_backbone(cfg, 0).forward_features(Tensor(np.zeros((2, 3, 96, 96))))
    assert fmap.shape == (2, 128, 12, 12)


def test_head_zero_features_give_bias():
    head = RegressionHead.create(8, 0)
    head.bias.data[:] = 1.75
    out = regression_head(head, Tensor(np.zeros((3, 8))))
    np.testing.assert_allclose(out.data, [1.75] * 3)


def test_head_is_linear_without_bias():
    head = RegressionHead.create(8, 0)
    v = np.random.default_rng(0).normal(size=(2, 8)).astype(np.float32)
    np.testing.assert_allclose(head(Tensor(3.0 * v)).data, 3.0 * head(Tensor(v)).data, rtol=1e-5)


def test_head_dim_mismatch():
    with pytest.raises(DimensionError):
        RegressionHead.create(8, 0)(Tensor(np.zeros((2, 7))))

import numpy as np
import pytest

import voxelseg.tensor as tc
from voxelseg.models import (ARCHITECTURE_OF_VARIANT, ModelConfig, build_model, forward,
                             output_shape, parameter_count, plan_shapes, variant_config)
from voxelseg.ops import bce_loss
from voxelseg.tensor import Tensor, no_grad


def _input_for(cfg, seed=0):
    w, h, z = cfg.input_shape
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(0.05, 0.95, size=(1, 1, z, h, w)).astype(np.float32))


def test_variant_architecture_mapping():
    assert ARCHITECTURE_OF_VARIANT == {"M1": "M1", "M2": "M2", "M3": "M3",
                                       "M4": "M2", "M5": "M3"}
    assert variant_config("M4", input_shape=(32, 32, 17)).variant_tag == "M2"
    assert variant_config("M5", input_shape=(32, 32, 17)).variant_tag == "M3"


def test_m1_valid_mode_output_shape():
    cfg = variant_config("M1", input_shape=(132, 132, 116))
    assert cfg.padding == "valid" and cfg.depth == 4
    assert output_shape(cfg) == (44, 44, 28)


def test_same_mode_preserves_shape_including_odd_z():
    for tag in ("M2", "M3"):
        cfg = variant_config(tag, input_shape=(32, 32, 17), base_channels=2)
        assert output_shape(cfg) == (32, 32, 17)
        m = build_model(cfg, seed=0)
        with no_grad():
            q = forward(m, _input_for(cfg), "eval")
        assert q.data.shape == (1, 1, 17, 32, 32)
        assert float(q.data.min()) > 0.0 and float(q.data.max()) < 1.0


def test_plan_rejects_indivisible_xy_in_same_mode():
    with pytest.raises(ValueError, match="x|width"):
        plan_shapes(ModelConfig(depth=3, base_channels=2, channel_growth=2,
                                residual_blocks_per_level=0, padding="same",
                                input_shape=(30, 32, 9), variant_tag="M2"))
    with pytest.raises(ValueError, match="y|height"):
        plan_shapes(ModelConfig(depth=3, base_channels=2, channel_growth=2,
                                residual_blocks_per_level=0, padding="same",
                                input_shape=(32, 30, 9), variant_tag="M2"))


def test_plan_rejects_infeasible_valid_input():
    cfg = ModelConfig(depth=4, base_channels=2, channel_growth=2,
                      residual_blocks_per_level=0, padding="valid",
                      input_shape=(64, 64, 64), variant_tag="M1")
    with pytest.raises(ValueError):
        plan_shapes(cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(depth=1, base_channels=2, channel_growth=2, residual_blocks_per_level=0,
                    padding="same", input_shape=(32, 32, 16), variant_tag="M2")
    with pytest.raises(ValueError):
        ModelConfig(depth=3, base_channels=2, channel_growth=2, residual_blocks_per_level=0,
                    padding="zero", input_shape=(32, 32, 16), variant_tag="M2")
    with pytest.raises(ValueError):
        variant_config("M9", input_shape=(32, 32, 16))


def test_init_is_seed_deterministic():
    cfg = variant_config("M3", input_shape=(16, 16, 9), base_channels=2)
    a = build_model(cfg, seed=7)
    b = build_model(cfg, seed=7)
    c = build_model(cfg, seed=8)
    assert all(np.array_equal(a.parameters[n].data, b.parameters[n].data) for n in a.parameters)
    assert any(not np.array_equal(a.parameters[n].data, c.parameters[n].data) for n in a.parameters)


def test_zeroed_residual_blocks_reduce_m3_to_m2():
    # with every residual-block parameter zeroed the block is relu(input),
    # which is the identity on the already-rectified level features
    cfg3 = variant_config("M3", input_shape=(16, 16, 9), base_channels=2)
    cfg2 = variant_config("M2", input_shape=(16, 16, 9), base_channels=2)
    m3 = build_model(cfg3, seed=0)
    m2 = build_model(cfg2, seed=1)
    assert set(m2.parameters) <= set(m3.parameters)
    for name, t in m2.parameters.items():
        m3.parameters[name].data = t.data.copy()
    for name, t in m3.parameters.items():
        if ".res" in name:
            t.data = np.zeros_like(t.data)
    x = _input_for(cfg3)
    with no_grad():
        q2 = forward(m2, x, "eval")
        q3 = forward(m3, x, "eval")
    np.testing.assert_allclose(q3.data, q2.data, atol=1e-5)


def test_every_parameter_receives_gradient():
    cfg = variant_config("M3", input_shape=(16, 16, 9), base_channels=2)
    m = build_model(cfg, seed=0)
    x = _input_for(cfg)
    p = Tensor((np.random.default_rng(1).uniform(0, 1, x.data.shape) > 0.5).astype(np.float32))
    tc.backward(bce_loss(forward(m, x, "train"), p))
    for name, t in m.parameters.items():
        assert t.grad is not None, name
        assert np.all(np.isfinite(t.grad)), name


def test_encoder_features_reach_output_through_skips():
    # wiping the earliest encoder level must change the output: the level-0
    # skip is concatenated into the last decoder stage
    cfg = variant_config("M2", input_shape=(16, 16, 9), base_channels=2)
    m = build_model(cfg, seed=3)
    x = _input_for(cfg)
    with no_grad():
        before = forward(m, x, "eval").data.copy()
    for name, t in m.parameters.items():
        if name.startswith("enc0."):
            t.data = np.zeros_like(t.data)
    with no_grad():
        after = forward(m, x, "eval").data
    assert not np.allclose(before, after, atol=1e-6)


def test_forward_validates_input_shape():
    cfg = variant_config("M2", input_shape=(16, 16, 9), base_channels=2)
    m = build_model(cfg, seed=0)
    with pytest.raises(ValueError):
        forward(m, Tensor(np.zeros((1, 1, 9, 16, 15), dtype=np.float32)), "eval")
    with pytest.raises(ValueError):
        forward(m, Tensor(np.zeros((1, 2, 9, 16, 16), dtype=np.float32)), "eval")


def test_eval_mode_does_not_touch_running_stats():
    cfg = variant_config("M2", input_shape=(16, 16, 9), base_channels=2)
    m = build_model(cfg, seed=0)
    snap = {k: (s.running_mean.copy(), s.running_var.copy()) for k, s in m.batchnorm_states.items()}
    with no_grad():
        forward(m, _input_for(cfg), "eval")
    for k, s in m.batchnorm_states.items():
        np.testing.assert_array_equal(s.running_mean, snap[k][0])
        np.testing.assert_array_equal(s.running_var, snap[k][1])
    with no_grad():
        forward(m, _input_for(cfg), "train")
    assert any(not np.array_equal(s.running_mean, snap[k][0])
               for k, s in m.batchnorm_states.items())


def test_residual_depth3_has_fewer_parameters_than_plain_depth4():
    deep = variant_config("M1", input_shape=(132, 132, 116), base_channels=8)
    shallow = variant_config("M3", input_shape=(32, 32, 17), base_channels=8)
    assert parameter_count(build_model(shallow, seed=0)) < parameter_count(build_model(deep, seed=0))


def test_parameter_count_counts_every_entry():
    cfg = variant_config("M2", input_shape=(16, 16, 9), base_channels=2)
    m = build_model(cfg, seed=0)
    assert parameter_count(m) == sum(t.data.size for t in m.parameters.values())


def test_deeper_variant_widens_channels_by_growth():
    cfg = variant_config("M3", input_shape=(32, 32, 17), base_channels=4)
    assert [cfg.channels(i) for i in range(cfg.depth)] == [4, 8, 16]

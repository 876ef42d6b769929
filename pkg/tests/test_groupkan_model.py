import logging

import numpy as np
import pydantic
import pytest
from groupkan import config, model
from groupkan.errors import DimensionError
from groupkan.model import Breakdown, GroupKanNet, count_flops, count_params
from groupkan.module import Module
from groupkan.tensor import Parameter, Tensor

REPORTED_PARAMS = 3.02e6
REPORTED_FLOPS = 7.72e9


@pytest.fixture(scope="module")
def base_net():
    return model.build(config.preset_config("base"))


@pytest.fixture(scope="module")
def tiny_net():
    return model.build(config.preset_config("tiny")).eval()


def allocated_scalars(root):
    """Walk every attribute reachable from root and sum distinct Parameter sizes"""
    seen, stack, total = set(), [root], 0
    while stack:
        obj = stack.pop()
        if id(obj) in seen:
            continue
        seen.add(id(obj))
        if isinstance(obj, Parameter):
            total += obj.size
        elif isinstance(obj, Module):
            stack.extend(vars(obj).values())
        elif isinstance(obj, (list, tuple)):
            stack.extend(obj)
    return total


def test_base_and_small_presets_build(base_net):
    assert isinstance(base_net, GroupKanNet)
    small = model.build(config.preset_config("s"))
    assert small.num_parameters() < base_net.num_parameters()


def test_indivisible_channels_fail_to_configure():
    with pytest.raises(pydantic.ValidationError, match="c2=100"):
        config.GroupKanConfig(c2=100, gkt_groups=16)


def test_forward_shape_64(tiny_net):
    out = model.forward(tiny_net, Tensor(np.zeros((1, 3, 64, 64))))
    assert out.shape == (1, 1, 64, 64)


def test_forward_shape_base_64(base_net):
    base_net.eval()
    x = np.random.default_rng(0).uniform(size=(1, 3, 64, 64))
    assert model.forward(base_net, Tensor(x)).shape == (1, 1, 64, 64)


def test_forward_shape_256(tiny_net):
    out = model.forward(tiny_net, Tensor(np.zeros((2, 3, 256, 256))))
    assert out.shape == (2, 1, 256, 256)


@pytest.mark.parametrize("height,width", [(32, 32), (32, 96), (64, 32)])
def test_output_matches_input_spatial(tiny_net, height, width):
    out = tiny_net(Tensor(np.zeros((1, 3, height, width))))
    assert out.shape[2:] == (height, width)


def test_forward_is_deterministic(tiny_net):
    x = np.random.default_rng(1).uniform(size=(2, 3, 32, 32))
    first = tiny_net(Tensor(x)).data
    second = tiny_net(Tensor(x)).data
    assert first.tobytes() == second.tobytes()


def test_same_seed_builds_same_weights():
    cfg = config.preset_config("tiny", seed=5)
    a, b = model.build(cfg), model.build(cfg)
    for (name, pa, _), (_, pb, _) in zip(a.named_parameters(), b.named_parameters()):
        assert pa.data.tobytes() == pb.data.tobytes(), name


@pytest.mark.parametrize("shape", [(1, 3, 48, 64), (1, 3, 64, 40)])
def test_indivisible_resolution(tiny_net, shape):
    with pytest.raises(DimensionError, match="32"):
        tiny_net(Tensor(np.zeros(shape)))


def test_wrong_input_channels(tiny_net):
    with pytest.raises(DimensionError):
        tiny_net(Tensor(np.zeros((1, 1, 32, 32))))


def test_bottleneck_features_shape(tiny_net):
    features = tiny_net.bottleneck_features(Tensor(np.zeros((1, 3, 64, 64))))
    assert features.shape == (1, 16, 2, 2)


def test_param_total_equals_allocation_walk(base_net):
    params = count_params(base_net)
    assert params.total == allocated_scalars(base_net)
    assert params.total == base_net.num_parameters()


def test_every_parameter_is_tagged(base_net):
    untagged = [name for name, _, component in base_net.named_parameters() if component is None]
    assert untagged == []


def test_base_params_near_reported(base_net, caplog):
    with caplog.at_level(logging.INFO, logger="groupkan.model"):
        params, _ = model.log_profile(base_net, 512, 512)
    assert abs(params.total - REPORTED_PARAMS) / REPORTED_PARAMS <= 0.15
    assert "g=5 k=3" in caplog.text


def test_base_flops_near_reported(base_net):
    flops = count_flops(base_net, 512, 512)
    assert abs(flops.total - REPORTED_FLOPS) / REPORTED_FLOPS <= 0.20


def test_flops_indivisible_resolution(base_net):
    with pytest.raises(DimensionError):
        count_flops(base_net, 500, 512)


def expected_gkt_spline(cfg, groups):
    per_layer = 2 * cfg.c2 ** 2 + 2 * cfg.c3 ** 2
    return cfg.gkt_layers * per_layer * (cfg.grid.num_basis + 1) // groups


@pytest.mark.parametrize("groups", [1, 2, 4, 8, 16])
def test_gkt_spline_params_scale_with_groups(groups):
    cfg = config.preset_config("s", gkt_groups=groups, gka_groups=groups)
    spline = count_params(model.build(cfg)).gkt_spline
    assert spline * groups == expected_gkt_spline(cfg, 1)


def test_gkt_spline_sixteenth_of_ungrouped():
    grouped = count_params(model.build(config.preset_config("s", gkt_groups=16))).gkt_spline
    full = count_params(model.build(config.preset_config("s", gkt_groups=1))).gkt_spline
    assert grouped * 16 == full


def test_gkt_spline_flops_sixteenth_of_ungrouped():
    grouped = model.build(config.preset_config("tiny", gkt_groups=16, gka_groups=16))
    full = model.build(config.preset_config("tiny", gkt_groups=1, gka_groups=16))
    assert count_flops(grouped, 64, 64).gkt_spline * 16 == count_flops(full, 64, 64).gkt_spline


def test_doubling_channels_quadruples_spline_params():
    small = count_params(model.build(config.preset_config("s"))).gkt_spline
    cfg = config.preset_config("s", c1=128, c2=192, c3=256)
    ratio = count_params(model.build(cfg)).gkt_spline / small
    assert 3.9 <= ratio <= 4.1


def test_mlp_layers_move_params_to_mlp():
    cfg = config.preset_config("tiny", layer_kinds=["mlp", "gkt", "gkt"])
    params = count_params(model.build(cfg))
    # four ToK-KAN blocks with one 16 -> 16 Linear each
    assert params.mlp == 4 * (16 * 16 + 16)


def test_breakdown_rejects_wrong_total():
    with pytest.raises(pydantic.ValidationError):
        Breakdown(encoder=1, total=2)
    with pytest.raises(ValueError):
        Breakdown.from_counts({"attention": 1})

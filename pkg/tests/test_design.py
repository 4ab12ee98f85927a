import pytest
from hypothesis import given, settings, strategies as st

from hbmflow.design import (DesignConfig, balance, design_all_hbm, design_hybrid, layer_cycles,
                            need_parallelism, split_parallelism, tensor_blocks)
from hbmflow.hbm import HbmConfig
from hbmflow.network import LayerKind, LayerSpec, builtin_network
from hbmflow.planner import check_plan

NETS = ("resnet18", "resnet50", "vgg16")


@pytest.fixture(scope="module")
def hbm():
    return HbmConfig()


@settings(max_examples=200, deadline=None)
@given(ci=st.integers(1, 256), co=st.integers(1, 256), oh=st.integers(1, 56),
       target=st.integers(1, 200_000))
def test_need_parallelism_is_minimal(ci, co, oh, target):
    layer = LayerSpec(0, LayerKind.STANDARD, 3, 3, ci, co, 1, oh, oh, oh, oh)
    p = need_parallelism(layer, target)
    if p is None:
        assert layer_cycles(layer, min(ci * co, -(-layer.weight_count // 10))) > target
    else:
        assert layer_cycles(layer, p) <= target
        assert p == 1 or layer_cycles(layer, p - 1) > target


@settings(max_examples=200, deadline=None)
@given(ci=st.integers(1, 512), co=st.integers(1, 512), p=st.integers(1, 4096))
def test_split_covers_requested_chains(ci, co, p):
    p = min(p, ci * co)
    layer = LayerSpec(0, LayerKind.STANDARD, 3, 3, ci, co, 1, 8, 8, 8, 8)
    p_i, p_o = split_parallelism(layer, p)
    assert p_i * p_o >= p and p_i <= ci and p_o <= co


@pytest.mark.parametrize("name", NETS)
def test_hybrid_design_respects_budgets(name, hbm):
    cfg = DesignConfig()
    tuned, plan = design_hybrid(builtin_network(name), hbm, cfg)
    check_plan(plan, tuned, hbm)
    assert plan.onchip_bits_used <= cfg.onchip_budget_bits
    assert sum(tensor_blocks(l) for l in tuned.layers) <= cfg.tensor_blocks
    assert plan.policy in ("hybrid", "hybrid-memory-bound")
    assert plan.offloaded


@pytest.mark.parametrize("name", NETS)
def test_all_hbm_design_respects_budgets(name, hbm):
    cfg = DesignConfig()
    tuned, plan = design_all_hbm(builtin_network(name), hbm, cfg)
    check_plan(plan, tuned, hbm)
    assert len(plan.offloaded) == len(tuned.layers)
    assert plan.hbm_bw_words_used <= 3 * len(hbm.usable_pcs)
    assert sum(tensor_blocks(l) for l in tuned.layers) <= cfg.tensor_blocks


def test_balance_equalizes_layer_time():
    net = builtin_network("resnet18")
    target = 60_000
    ps = balance(net, target)
    assert all(layer_cycles(l, p) <= target for l, p in zip(net.layers, ps))


def test_design_is_deterministic(hbm):
    net = builtin_network("resnet18")
    assert design_hybrid(net, hbm) == design_hybrid(net, hbm)

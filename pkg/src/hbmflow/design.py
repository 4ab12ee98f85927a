"""Design flows that pick per-layer parallelism before planning.

The builtin descriptors carry p_i = p_o = 1. A real accelerator spreads a
fixed budget of tensor blocks over the layers so that every layer takes about
the same number of cycles per image; the flows below do that, then place the
weights. Tensor-block cost of a layer is one block per three output columns
per chain.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

from hbmflow.hbm import HbmConfig, read_efficiency
from hbmflow.network import LayerSpec, NetworkModel
from hbmflow.planner import (OffloadPlan, PlannerConstants, PlanError, assign_pseudo_channels,
                             layer_score, onchip_usage_bits, plan_from_offload_set,
                             select_offloaded)

DEVICE_TENSOR_BLOCKS = 3960
DEFAULT_TB_SHARE = 0.35


@dataclass(frozen=True)
class DesignConfig:
    tensor_blocks: int = int(DEVICE_TENSOR_BLOCKS * DEFAULT_TB_SHARE)
    onchip_budget_bits: int = 140_000_000
    burst_length: int = 8
    core_clock_hz: int = 300_000_000
    # burst length whose efficiency sizes the extra chains of offloaded layers
    provision_burst: int = 8


def tensor_blocks(layer: LayerSpec, p: int | None = None) -> int:
    p = layer.parallelism if p is None else p
    return p * -(-layer.output_width // 3)


def layer_cycles(layer: LayerSpec, p: int) -> int:
    return layer.output_height * -(-layer.weight_count // (10 * p))


def need_parallelism(layer: LayerSpec, cycles: float) -> int | None:
    """Smallest chain count that finishes one image within ``cycles``; None if impossible."""
    w = layer.weight_count
    max_p = min(layer.c_i * layer.c_o, -(-w // 10))
    if layer_cycles(layer, max_p) > cycles:
        return None
    lo, hi = 1, max_p
    while lo < hi:  # layer_cycles is non-increasing in p
        mid = (lo + hi) // 2
        if layer_cycles(layer, mid) <= cycles:
            hi = mid
        else:
            lo = mid + 1
    return lo


def split_parallelism(layer: LayerSpec, p: int) -> tuple[int, int]:
    p_o = min(p, layer.c_o)
    return -(-p // p_o), p_o


def with_chains(net: NetworkModel, chains) -> NetworkModel:
    return net.with_parallelism(split_parallelism(l, p) for l, p in zip(net.layers, chains))


def balance(net: NetworkModel, cycles: float) -> list[int] | None:
    out = []
    for l in net.layers:
        p = need_parallelism(l, cycles)
        if p is None:
            return None
        out.append(p)
    return out


def smallest_cycles(net: NetworkModel, accept) -> int:
    """Bisect the per-image cycle target for the fastest balanced design ``accept`` allows."""
    lo, hi = 0, max(layer_cycles(l, 1) for l in net.layers)
    if not accept(balance(net, hi)):
        raise PlanError("no balanced design satisfies the resource limits")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        ps = balance(net, mid)
        if ps is not None and accept(ps):
            hi = mid
        else:
            lo = mid
    return hi


def design_all_hbm(net: NetworkModel, hbm: HbmConfig, cfg: DesignConfig = DesignConfig(),
                   consts: PlannerConstants = PlannerConstants()) -> tuple[NetworkModel, OffloadPlan]:
    """Every layer streams its weights; chains bounded by channel capacity and tensor blocks."""
    cap = consts.chains_per_pc * len(hbm.usable_pcs)

    def ok(ps):
        return (sum(ps) <= cap and
                sum(tensor_blocks(l, p) for l, p in zip(net.layers, ps)) <= cfg.tensor_blocks)

    c = smallest_cycles(net, ok)
    tuned = with_chains(net, balance(net, c))
    plan = plan_from_offload_set(tuned, range(len(net.layers)), hbm, cfg.burst_length, consts,
                                 cfg.core_clock_hz, policy="all-hbm")
    return tuned, assign_pseudo_channels(plan, tuned, hbm, consts)


def _provision(net, chains, offloaded, scores, free_bw, eff, cfg, consts):
    """Give offloaded layers extra chains so memory efficiency does not make them the bottleneck.

    When channels run short, the lowest-score offloaded layer returns on chip if
    memory allows. Otherwise the design stays memory-bound.
    """
    off = set(offloaded)
    on_times = [layer_cycles(l, chains[l.id]) for l in net.layers if l.id not in off]
    ref = max(on_times) if on_times else max(layer_cycles(l, chains[l.id]) for l in net.layers)
    while off:
        want = {l: max(chains[l], need_parallelism(net.layers[l], ref * eff) or chains[l])
                for l in off}
        extra = sum(want[l] - chains[l] for l in off)
        if extra <= free_bw:
            for l, p in want.items():
                chains[l] = p
            return off, True
        victim = min(off, key=lambda i: (scores[i], -i))
        trial = off - {victim}
        trial_net = with_chains(net, chains)
        if onchip_usage_bits(trial_net, trial, cfg.burst_length, consts) > cfg.onchip_budget_bits:
            return off, False
        off = trial
        free_bw += chains[victim]
    return off, True


def design_hybrid(net: NetworkModel, hbm: HbmConfig, cfg: DesignConfig = DesignConfig(),
                  consts: PlannerConstants = PlannerConstants(),
                  step: float = 1.01) -> tuple[NetworkModel, OffloadPlan]:
    """Fastest balanced design whose weights fit on chip once the greedy offload is applied."""
    budget_tb = cfg.tensor_blocks
    cap = consts.chains_per_pc * len(hbm.usable_pcs)
    eff = read_efficiency(hbm, cfg.provision_burst)

    def tb_ok(ps):
        return sum(tensor_blocks(l, p) for l, p in zip(net.layers, ps)) <= budget_tb

    c = smallest_cycles(net, tb_ok)
    ceiling = max(layer_cycles(l, 1) for l in net.layers)
    while True:
        chains = balance(net, c)
        if chains is not None and tb_ok(chains):
            tuned = with_chains(net, chains)
            scores = [layer_score(l, consts) for l in tuned.layers]
            flags = select_offloaded(scores, chains, len(hbm.usable_pcs), consts.chains_per_pc)
            off = [i for i, f in enumerate(flags) if f]
            if onchip_usage_bits(tuned, off, cfg.burst_length, consts) <= cfg.onchip_budget_bits:
                free_bw = cap - sum(chains[i] for i in off)
                off, provisioned = _provision(tuned, chains, off, scores, free_bw, eff, cfg, consts)
                if tb_ok(chains):
                    tuned = with_chains(net, chains)
                    policy = "hybrid" if provisioned else "hybrid-memory-bound"
                    plan = plan_from_offload_set(tuned, sorted(off), hbm, cfg.burst_length,
                                                 consts, cfg.core_clock_hz, policy=policy)
                    return tuned, assign_pseudo_channels(plan, tuned, hbm, consts)
        if c >= ceiling:
            break
        c = min(ceiling, int(c * step) + 1)
    raise PlanError("no hybrid design fits the on-chip budget")


def with_burst_length(plan: OffloadPlan, net: NetworkModel, hbm: HbmConfig, burst_length: int,
                      consts: PlannerConstants = PlannerConstants(),
                      core_clock_hz: int = 300_000_000) -> OffloadPlan:
    """Same placement, FIFOs resized for another burst length."""
    from hbmflow.planner import size_fifos
    fifo = size_fifos(burst_length, core_clock_hz, hbm.worst_latency_ns(), consts)
    n_dc = len(plan.pc_load())
    used = onchip_usage_bits(net, plan.offloaded, burst_length, consts, n_dcfifos=n_dc)
    return replace(plan, burst_length=burst_length, fifo=fifo, onchip_bits_used=used)

"""Weight placement: layer scoring, greedy offload, pseudo-channel map, FIFO sizing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

from hbmflow.hbm import HbmConfig
from hbmflow.network import (M20K_BITS, LayerSpec, NetworkModel, activation_m20ks,
                             skip_buffer_m20ks, weight_m20ks, weight_memory_bits)


class PlanError(ValueError):
    pass


class PlanInfeasible(PlanError):
    """On-chip memory demand of a plan exceeds the budget."""

    def __init__(self, plan: "OffloadPlan", budget_bits: int):
        self.plan = plan
        self.budget_bits = budget_bits
        self.shortfall_bits = plan.onchip_bits_used - budget_bits
        super().__init__(
            f"plan needs {plan.onchip_bits_used / 1e6:.2f} Mb on chip, budget is "
            f"{budget_bits / 1e6:.2f} Mb (short by {self.shortfall_bits / 1e6:.2f} Mb)")


@dataclass(frozen=True)
class PlannerConstants:
    m20k_bits: int = M20K_BITS
    replacement_m20ks: int = 2
    chains_width_divisor: int = 18
    weight_word_bits: int = 80
    chains_per_pc: int = 3
    last_stage_depth_words: int = 512
    pc_data_bits: int = 256

    def __post_init__(self):
        if self.chains_per_pc * self.weight_word_bits > self.pc_data_bits:
            raise PlanError("chains_per_pc * weight_word_bits exceeds the pseudo-channel width")


@dataclass(frozen=True)
class FifoSpec:
    required_cycles: int
    last_stage_words: int
    burst_match_words: int  # 256-bit words per consumer
    dcfifo_words: int  # 256-bit words per pseudo-channel


@dataclass(frozen=True)
class Placement:
    layer: int
    on_chip: bool
    # (pc_id, chains) pairs; more than one pair means the layer spans channels
    segments: tuple[tuple[int, int], ...] = ()

    @property
    def pcs(self) -> tuple[int, ...]:
        return tuple(pc for pc, _ in self.segments)


@dataclass(frozen=True)
class OffloadPlan:
    network: str
    parallelism: tuple[tuple[int, int], ...]
    placements: tuple[Placement, ...]
    burst_length: int
    fifo: FifoSpec
    scores: tuple[Fraction, ...]
    onchip_bits_used: int
    policy: str = "alg1"

    @property
    def offloaded(self) -> tuple[int, ...]:
        return tuple(p.layer for p in self.placements if not p.on_chip)

    @property
    def hbm_bw_words_used(self) -> int:
        return sum(self.parallelism[l][0] * self.parallelism[l][1] for l in self.offloaded)

    @property
    def credits_init(self) -> tuple[int, ...]:
        return tuple(0 if p.on_chip else
                     self.fifo.last_stage_words * sum(c for _, c in p.segments)
                     for p in self.placements)

    @property
    def assigned(self) -> bool:
        return all(p.on_chip or p.segments for p in self.placements)

    @property
    def spanning(self) -> tuple[int, ...]:
        return tuple(p.layer for p in self.placements if len(p.segments) > 1)

    def pc_load(self) -> dict[int, int]:
        load: dict[int, int] = {}
        for p in self.placements:
            for pc, c in p.segments:
                load[pc] = load.get(pc, 0) + c
        return load


def layer_score(layer: LayerSpec, consts: PlannerConstants = PlannerConstants()) -> Fraction:
    """M20Ks saved by offloading, per 80-bit word of HBM bandwidth demanded; clamped at 0."""
    m20ks = -(-weight_memory_bits(layer) // consts.m20k_bits)
    dup = -(-layer.output_width // consts.chains_width_divisor)
    saved = (m20ks - consts.replacement_m20ks) * dup
    if saved <= 0:
        return Fraction(0)
    return Fraction(saved, layer.parallelism * consts.weight_word_bits)


def size_fifos(burst_length: int, core_clock_hz: int = 300_000_000,
               worst_latency_ns: float = 1214.0,
               consts: PlannerConstants = PlannerConstants()) -> FifoSpec:
    if core_clock_hz <= 0:
        raise PlanError("core clock must be positive")
    # exact ceil(ns * Hz / 1e9) without float round-off
    required = math.ceil(Fraction(str(worst_latency_ns)) * core_clock_hz / 10**9)
    depth = 1 << max(0, required - 1).bit_length()
    return FifoSpec(required_cycles=required, last_stage_words=depth,
                    burst_match_words=2 * burst_length, dcfifo_words=2 * burst_length)


def select_offloaded(scores, parallelism, n_pc: int, chains_per_pc: int = 3) -> list[bool]:
    """Greedy selection: highest score first while pseudo-channel bandwidth remains."""
    n = len(scores)
    offload = [False] * n
    order = sorted(range(n), key=lambda l: (-scores[l], l))
    free_bw = n_pc * chains_per_pc
    idx = 0
    while free_bw != 0 and idx < n:
        l = order[idx]
        if scores[l] <= 0:
            break  # nothing left that saves memory
        if parallelism[l] <= free_bw:
            offload[l] = True
            free_bw -= parallelism[l]
        idx += 1
    return offload


def _fifo_m20ks(bits: int, consts: PlannerConstants) -> int:
    return -(-bits // consts.m20k_bits)


def onchip_usage_bits(net: NetworkModel, offloaded, burst_length: int,
                      consts: PlannerConstants = PlannerConstants(),
                      n_dcfifos: int | None = None) -> int:
    """Weights kept on chip, activation and skip buffers, and the HBM-side FIFOs."""
    off = set(offloaded)
    m20ks = 0
    for l in net.layers:
        m20ks += activation_m20ks(l)
        if l.id in off:
            m20ks += consts.replacement_m20ks * l.duplication
            m20ks += _fifo_m20ks(2 * burst_length * consts.pc_data_bits, consts)
        else:
            m20ks += weight_m20ks(l)
    for a, b in net.skip_edges:
        m20ks += skip_buffer_m20ks(net, a, b)
    if n_dcfifos is None:
        demand = sum(net.layers[l].parallelism for l in off)
        n_dcfifos = -(-demand // consts.chains_per_pc) if demand else 0
    m20ks += n_dcfifos * _fifo_m20ks(2 * burst_length * consts.pc_data_bits, consts)
    return m20ks * consts.m20k_bits


def plan_from_offload_set(net: NetworkModel, offloaded, hbm: HbmConfig, burst_length: int,
                          consts: PlannerConstants = PlannerConstants(),
                          core_clock_hz: int = 300_000_000, policy: str = "alg1") -> OffloadPlan:
    off = set(offloaded)
    fifo = size_fifos(burst_length, core_clock_hz, hbm.worst_latency_ns(), consts)
    return OffloadPlan(
        network=net.name,
        parallelism=tuple((l.p_i, l.p_o) for l in net.layers),
        placements=tuple(Placement(l.id, l.id not in off) for l in net.layers),
        burst_length=burst_length,
        fifo=fifo,
        scores=tuple(layer_score(l, consts) for l in net.layers),
        onchip_bits_used=onchip_usage_bits(net, off, burst_length, consts),
        policy=policy,
    )


def plan_offload(net: NetworkModel, hbm: HbmConfig, onchip_budget_bits: int = 140_000_000,
                 consts: PlannerConstants = PlannerConstants(), burst_length: int = 8,
                 core_clock_hz: int = 300_000_000, check_budget: bool = True) -> OffloadPlan:
    """Score layers, offload greedily under the pseudo-channel budget, check on-chip fit.

    Raises PlanInfeasible (carrying the plan) when the on-chip budget is exceeded.
    """
    if onchip_budget_bits < 0:
        raise PlanError("on-chip budget must be non-negative")
    if not hbm.usable_pcs:
        raise PlanError("no usable pseudo-channels")
    scores = [layer_score(l, consts) for l in net.layers]
    flags = select_offloaded(scores, [l.parallelism for l in net.layers],
                             len(hbm.usable_pcs), consts.chains_per_pc)
    plan = plan_from_offload_set(net, [i for i, f in enumerate(flags) if f], hbm,
                                 burst_length, consts, core_clock_hz)
    if check_budget and plan.onchip_bits_used > onchip_budget_bits:
        raise PlanInfeasible(plan, onchip_budget_bits)
    return plan


def clockwise_order(hbm: HbmConfig) -> list[int]:
    """0..15 along one stack, then 31..16 back along the other, skipping unusable PCs."""
    per = hbm.pcs_per_stack
    order = list(range(per))
    for stack in range(1, hbm.n_stacks):
        seq = range(per * (stack + 1) - 1, per * stack - 1, -1)
        order.extend(seq if stack % 2 else range(per * stack, per * (stack + 1)))
    usable = set(hbm.usable_pcs)
    return [pc for pc in order if pc in usable]


def assign_pseudo_channels(plan: OffloadPlan, net: NetworkModel, hbm: HbmConfig,
                           consts: PlannerConstants = PlannerConstants()) -> OffloadPlan:
    """First-fit in clockwise channel order, layers taken from network input to output.

    A layer goes whole into the first channel with room for all its chains;
    only when no channel has room is it split across channels in order.
    """
    order = clockwise_order(hbm)
    room = {pc: consts.chains_per_pc for pc in order}
    placements = list(plan.placements)
    for idx, pl in enumerate(placements):
        if pl.on_chip:
            continue
        need = net.layers[pl.layer].parallelism
        whole = next((pc for pc in order if room[pc] >= need), None)
        if whole is not None:
            room[whole] -= need
            segs = [(whole, need)]
        else:
            segs = []
            for pc in order:
                if need == 0:
                    break
                take = min(room[pc], need)
                if take:
                    segs.append((pc, take))
                    room[pc] -= take
                    need -= take
            if need:
                raise PlanError(f"layer {pl.layer}: pseudo-channel capacity exhausted "
                                f"({need} chains unassigned)")
        placements[idx] = replace(pl, segments=tuple(segs))
    n_dc = sum(1 for pc in order if room[pc] < consts.chains_per_pc)
    used = onchip_usage_bits(net, plan.offloaded, plan.burst_length, consts, n_dcfifos=n_dc)
    return replace(plan, placements=tuple(placements), onchip_bits_used=used)


def select_burst_length(throughputs: dict[int, float], tolerance: float = 0.005) -> int:
    """Smallest burst length within ``tolerance`` of the best throughput."""
    if not throughputs:
        raise PlanError("no burst-length candidates")
    best = max(throughputs.values())
    return min(bl for bl, t in throughputs.items() if t >= best * (1 - tolerance))


def check_plan(plan: OffloadPlan, net: NetworkModel, hbm: HbmConfig,
               consts: PlannerConstants = PlannerConstants()):
    """Raise PlanError unless the plan matches the network and respects channel budgets."""
    if len(plan.placements) != len(net.layers):
        raise PlanError(f"plan has {len(plan.placements)} layers, network has {len(net.layers)}")
    par = tuple((l.p_i, l.p_o) for l in net.layers)
    if par != plan.parallelism:
        raise PlanError("plan was made for different layer parallelism")
    if plan.hbm_bw_words_used > consts.chains_per_pc * len(hbm.usable_pcs):
        raise PlanError("offloaded bandwidth exceeds pseudo-channel budget")
    usable = set(hbm.usable_pcs)
    for pl in plan.placements:
        if pl.on_chip:
            continue
        if sum(c for _, c in pl.segments) != net.layers[pl.layer].parallelism:
            raise PlanError(f"layer {pl.layer}: segment chains do not cover its parallelism")
        if any(pc not in usable for pc in pl.pcs):
            raise PlanError(f"layer {pl.layer}: assigned to an unusable pseudo-channel")
    for pc, load in plan.pc_load().items():
        if load > consts.chains_per_pc:
            raise PlanError(f"pseudo-channel {pc} carries {load} chains")


# -- plan file ---------------------------------------------------------------

def serialize_plan(plan: OffloadPlan) -> str:
    f = plan.fifo
    lines = [f"plan network={plan.network} policy={plan.policy} burst={plan.burst_length} "
             f"required_cycles={f.required_cycles} last_stage={f.last_stage_words} "
             f"burst_match={f.burst_match_words} dcfifo={f.dcfifo_words} "
             f"onchip_bits={plan.onchip_bits_used}"]
    credits = plan.credits_init
    for pl, (pi, po), score in zip(plan.placements, plan.parallelism, plan.scores):
        head = f"layer {pl.layer} pi={pi} po={po} score={score}"
        if pl.on_chip:
            lines.append(f"{head} place=onchip")
        else:
            segs = ",".join(f"{pc}:{c}" for pc, c in pl.segments) or "-"
            lines.append(f"{head} place=hbm pcs={segs} credits={credits[pl.layer]}")
    return "\n".join(lines) + "\n"


def parse_plan(text: str) -> OffloadPlan:
    header = None
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kv = dict(t.split("=", 1) for t in tok[1 + (tok[0] == "layer"):] if "=" in t)
        if tok[0] == "plan":
            header = kv
        elif tok[0] == "layer":
            rows.append((int(tok[1]), kv, lineno))
        else:
            raise PlanError(f"line {lineno}: unknown record {tok[0]!r}")
    if header is None:
        raise PlanError("missing plan header")
    try:
        fifo = FifoSpec(int(header["required_cycles"]), int(header["last_stage"]),
                        int(header["burst_match"]), int(header["dcfifo"]))
        placements, par, scores = [], [], []
        for i, (lid, kv, lineno) in enumerate(rows):
            if lid != i:
                raise PlanError(f"line {lineno}: layer records out of order")
            par.append((int(kv["pi"]), int(kv["po"])))
            scores.append(Fraction(kv["score"]))
            if kv["place"] == "onchip":
                placements.append(Placement(lid, True))
            elif kv["place"] == "hbm":
                segs = () if kv["pcs"] == "-" else tuple(
                    tuple(int(x) for x in s.split(":")) for s in kv["pcs"].split(","))
                placements.append(Placement(lid, False, segs))
            else:
                raise PlanError(f"line {lineno}: unknown placement {kv['place']!r}")
        return OffloadPlan(header["network"], tuple(par), tuple(placements),
                           int(header["burst"]), fifo, tuple(scores),
                           int(header["onchip_bits"]), header.get("policy", "alg1"))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, PlanError):
            raise
        raise PlanError(f"malformed plan file: {exc}") from None

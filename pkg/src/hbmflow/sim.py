"""Cycle-level simulation of the HBM weight-distribution network and layer pipeline.

Two clock domains share one tick counter at the combined rate of both clocks.
On HBM-domain ticks each pseudo-channel runs its prefetcher and controller:
it picks the next consumer round-robin, throttles through the efficiency
token bucket, and schedules the data return after a sampled latency.
Returned 256-bit words (three 80-bit weight words for one consumer) go into
the channel's clock-crossing FIFO. On core-domain ticks that FIFO drains one
word per cycle into the owning consumer's burst-match FIFO. A serializer
feeds the last-stage FIFO through the daisy-chain delay, and layer engines
consume one weight word per chain per cycle.

A consumer segment is one layer's chains on one pseudo-channel. Layers that
span channels have several segments and advance only when all have words.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction

import numpy as np

from hbmflow import _kernel
from hbmflow.bounds import roofline
from hbmflow.hbm import TOKEN_SCALE, UNSATURATED_MAX_NS, HbmConfig, efficiency_tokens, read_efficiency
from hbmflow.network import LayerKind, LayerSpec, NetworkModel, same_out
from hbmflow.planner import (OffloadPlan, PlanError, Placement, PlannerConstants, check_plan,
                             plan_from_offload_set)


class FlowMode(str, Enum):
    CREDIT = "credit"
    READY_VALID = "ready_valid"


class SimError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    core_clock_hz: int = 300_000_000
    # the fabric side of each controller is modeled at the core clock; see README
    hbm_clock_hz: int = 300_000_000
    n_images: int = 4
    flow_mode: FlowMode = FlowMode.CREDIT
    freeze_threshold_words: int | None = None  # per layer; default 2 * p_i * p_o
    daisy_chain_group: int = 6
    seed: int = 0
    deadlock_window_cycles: int | None = None  # default 4x worst latency in core cycles
    ideal_memory: bool = False
    random_accept: bool = False
    max_outstanding: int = 64
    trace: bool = False
    trace_limit: int = 2_000_000
    max_cycles: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "flow_mode", FlowMode(self.flow_mode))
        if self.core_clock_hz <= 0 or self.hbm_clock_hz <= 0:
            raise SimError("clocks must be positive")
        if self.n_images < 1:
            raise SimError("n_images must be >= 1")
        if self.daisy_chain_group < 1 or self.max_outstanding < 1:
            raise SimError("daisy_chain_group and max_outstanding must be >= 1")


@dataclass(frozen=True)
class LayerStats:
    busy_cycles: int
    freeze_cycles: int
    starve_cycles: int


@dataclass(frozen=True)
class PcStats:
    pc: int
    requests: int
    accepted: int
    utilization: float
    words_in: int
    words_out: int
    residual_words: int


@dataclass(frozen=True)
class FifoStats:
    name: str
    capacity: int
    min: int
    mean: float
    max: int


@dataclass(frozen=True)
class DeadlockReport:
    cycle: int
    blocked_resources: tuple[str, ...]
    head_of_line_owner: int | None


@dataclass(frozen=True)
class SimReport:
    network: str
    flow_mode: str
    burst_length: int
    n_images: int
    completed: bool
    throughput_im_s: float
    steady_state_im_s: float
    total_cycles: int
    image_done_cycles: tuple[int, ...]
    layers: tuple[LayerStats, ...]
    pcs: tuple[PcStats, ...]
    fifos: tuple[FifoStats, ...]
    weight_words_consumed: tuple[int, ...]
    bound_im_s: float
    deadlock: DeadlockReport | None = None
    trace_rows: tuple = field(default=(), repr=False, compare=True)

    @property
    def within_bound(self) -> bool:
        return self.throughput_im_s <= self.bound_im_s * (1 + 1e-9)


# -- activation line mapping ---------------------------------------------------

def _pad_top(layer: LayerSpec) -> int:
    if layer.output_height != same_out(layer.input_height, layer.stride):
        return 0  # valid padding
    total = max((layer.output_height - 1) * layer.stride + layer.k_h - layer.input_height, 0)
    return total // 2


def line_windows(prod: LayerSpec, cons: LayerSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per consumer output row: producer rows that must exist, and rows no longer needed."""
    pad = _pad_top(cons)
    ratio = Fraction(prod.output_height, cons.input_height)
    need = np.empty(cons.output_height, np.int64)
    free = np.empty(cons.output_height, np.int64)
    for r in range(cons.output_height):
        hi = min(cons.input_height, r * cons.stride - pad + cons.k_h)
        lo = max(0, r * cons.stride - pad)
        need[r] = min(prod.output_height, math.ceil(hi * ratio))
        free[r] = min(need[r], math.floor(lo * ratio))
    return need, free


def edge_capacity(prod: LayerSpec, cons: LayerSpec, bypassed: tuple[LayerSpec, ...] = ()) -> int:
    """Producer rows the inter-layer buffer can hold.

    A chain buffer holds 2*(k_h + stride) consumer input lines. A skip buffer
    must also cover every row still travelling down the bypassed layers, or
    the shortcut and the main path throttle each other.
    """
    need, free = line_windows(prod, cons)
    window = int((need - free).max()) + 1
    ratio = Fraction(prod.output_height, cons.input_height)
    chain = max(window, math.ceil((2 * cons.k_h + 2 * cons.stride) * ratio))
    if not bypassed:
        return chain
    in_flight = sum(math.ceil((2 * l.k_h + l.stride) * Fraction(prod.output_height, l.input_height))
                    for l in bypassed)
    return max(window, 2 * prod.output_height) + chain + in_flight


def _ancestors(net: NetworkModel, idx: int) -> set[int]:
    seen, stack = {idx}, [idx]
    while stack:
        for p in net.predecessors(stack.pop()):
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return seen


def _bypassed(net: NetworkModel, a: int, b: int) -> tuple[LayerSpec, ...]:
    """Layers running in parallel with edge a->b when b joins several inputs."""
    preds = net.predecessors(b)
    if len(preds) < 2 or a == max(preds):
        return ()
    common = set.intersection(*(_ancestors(net, p) for p in preds))
    fork = max(common)
    return tuple(l for l in net.layers[fork + 1:b] if l.id != a)


# -- simulation ------------------------------------------------------------------

def _latency_params(hbm: HbmConfig, bl: int, ideal: bool):
    if ideal:
        return 0.0, 0.0, 0.0, 0.0
    lo, avg, hi = hbm.latency_envelope[bl]
    return lo, 3 * avg - lo - hi, hi, min(hi, UNSATURATED_MAX_NS)


def simulate(net: NetworkModel, plan: OffloadPlan, hbm: HbmConfig,
             cfg: SimConfig = SimConfig(),
             consts: PlannerConstants = PlannerConstants()) -> SimReport:
    """Run the pipeline until ``cfg.n_images`` leave every sink layer or the watchdog fires."""
    check_plan(plan, net, hbm, consts)
    if not plan.assigned:
        raise PlanError("offloaded layers lack pseudo-channel assignments")
    bl = plan.burst_length
    L = len(net.layers)
    n = cfg.n_images

    # layers and activation edges
    l_outh = np.array([l.output_height for l in net.layers], np.int64)
    l_cpr = np.array([l.cycles_per_row for l in net.layers], np.int64)
    l_onchip = np.array([cfg.ideal_memory or p.on_chip for p in plan.placements], np.int64)
    l_total = l_outh * n
    l_sink = np.array([len(net.edges[i]) == 0 for i in range(L)], np.int64)
    edges = [(a, b) for a in range(L) for b in net.edges[a]]
    e_src = np.array([a for a, _ in edges], np.int64)
    e_src_outh = np.array([net.layers[a].output_height for a, _ in edges], np.int64)
    need_parts, free_parts, offs, caps = [], [], [], []
    off = 0
    for a, b in edges:
        nd, fr = line_windows(net.layers[a], net.layers[b])
        need_parts.append(nd)
        free_parts.append(fr)
        offs.append(off)
        off += len(nd)
        caps.append(edge_capacity(net.layers[a], net.layers[b], _bypassed(net, a, b)))
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0, np.int64)
    need_tab, free_tab = cat(need_parts), cat(free_parts)
    e_tab_off = np.array(offs, np.int64)
    e_cap = np.array(caps, np.int64)
    ie_ptr, ie_edge = _csr(L, [(b, i) for i, (_, b) in enumerate(edges)])
    oe_ptr, oe_edge = _csr(L, [(a, i) for i, (a, _) in enumerate(edges)])

    # consumer segments, grouped by layer
    seg_rows = []
    l_seg_ptr = [0]
    for pl in plan.placements:
        layer = net.layers[pl.layer]
        if not l_onchip[pl.layer]:
            thr = cfg.freeze_threshold_words
            thr = 2 * layer.parallelism if thr is None else thr
            if thr < layer.parallelism:
                raise SimError("freeze threshold below per-cycle consumption")
            groups = -(-layer.output_width // 3)
            for pc, chains in pl.segments:
                seg_rows.append((pl.layer, pc, chains,
                                 plan.fifo.last_stage_words * chains,
                                 plan.fifo.burst_match_words * 3,
                                 max(1, -(-groups * chains // cfg.daisy_chain_group)),
                                 n * layer.output_height * layer.cycles_per_row * chains,
                                 -(-thr * chains // layer.parallelism)))
        l_seg_ptr.append(len(seg_rows))
    seg = np.array(seg_rows, np.int64).reshape(-1, 8)
    used_pcs = sorted({int(pc) for pc in seg[:, 1]})
    pc_index = {pc: i for i, pc in enumerate(used_pcs)}
    p_seg_ptr, p_seg = _csr(len(used_pcs), [(pc_index[int(pc)], s) for s, pc in enumerate(seg[:, 1])])

    g = math.gcd(cfg.core_clock_hz, cfg.hbm_clock_hz)
    core_div, hbm_div = cfg.hbm_clock_hz // g, cfg.core_clock_hz // g
    eff = 1.0 if cfg.ideal_memory else read_efficiency(hbm, bl)
    lat = _latency_params(hbm, bl, cfg.ideal_memory)
    worst_core = math.ceil(hbm.worst_latency_ns() * cfg.core_clock_hz / 1e9)
    watchdog = cfg.deadlock_window_cycles or 4 * worst_core
    if cfg.max_cycles is not None:
        max_cycles = cfg.max_cycles
    else:
        per_image = max(int(l_outh[i] * l_cpr[i]) for i in range(L))
        words = int(seg[:, 6].sum()) if len(seg) else 0
        max_cycles = 20 * (n + 2) * per_image + 4 * words + 100 * watchdog
    refresh_period = refresh_stall = 0
    if hbm.refresh_enabled and not cfg.ideal_memory:
        refresh_period = math.ceil(hbm.refresh_period_ns * cfg.hbm_clock_hz / 1e9)
        refresh_stall = math.ceil(hbm.refresh_stall_ns * cfg.hbm_clock_hz / 1e9)

    out = _kernel.run(
        l_outh, l_cpr, l_onchip, l_total, np.array(l_seg_ptr, np.int64), l_sink,
        ie_ptr, ie_edge, oe_ptr, oe_edge,
        e_src, e_tab_off, e_src_outh, e_cap, need_tab, free_tab,
        seg[:, 0].copy(), seg[:, 1].copy(), seg[:, 2].copy(), seg[:, 3].copy(),
        seg[:, 4].copy(), seg[:, 5].copy(), seg[:, 6].copy(), seg[:, 7].copy(),
        p_seg_ptr, p_seg,
        bl, plan.fifo.dcfifo_words, cfg.max_outstanding, core_div, hbm_div,
        efficiency_tokens(eff), TOKEN_SCALE, cfg.random_accept,
        lat[0], lat[1], lat[2], lat[3], cfg.hbm_clock_hz / 1e9,
        refresh_period, refresh_stall,
        cfg.flow_mode is FlowMode.CREDIT, cfg.seed, n, watchdog, max_cycles,
        cfg.trace_limit if cfg.trace else 0,
    )
    (status, cc, hc, violations, busy, freeze, starve, started, produced, img_done,
     credits, fetched, consumed, ls, bm, dly_sum, ls_sum, ls_min, ls_max, bm_sum, bm_min, bm_max,
     requests, accepted, words_in, words_out, dc_n, dc_head, dc_seg, dc_words, dc_sum, dc_min,
     dc_max,
     inf_n, rq_n, trace, n_trace) = out

    if violations:
        raise SimError(f"credit or FIFO capacity violated {violations} times")
    if status == _kernel.TIMEOUT:
        raise SimError(f"no completion after {cc} core cycles (raise max_cycles?)")

    completed = status == _kernel.DONE
    seg_layer = seg[:, 0]
    deadlock = None
    if not completed:
        deadlock = detect_deadlock(net, plan, seg, used_pcs, l_onchip, l_total, started, produced, ls, bm,
                                   fetched, dc_n, dc_head, dc_seg, ie_ptr, ie_edge, oe_ptr, oe_edge,
                                   e_src, e_cap, need_tab, e_tab_off, e_src_outh, cc)

    thr = n * cfg.core_clock_hz / cc if completed else 0.0
    report = SimReport(
        network=net.name,
        flow_mode=cfg.flow_mode.value,
        burst_length=bl,
        n_images=n,
        completed=completed,
        throughput_im_s=thr,
        steady_state_im_s=_steady(img_done, cfg.core_clock_hz) if completed else 0.0,
        total_cycles=int(cc),
        image_done_cycles=tuple(int(x) for x in img_done),
        layers=tuple(LayerStats(int(b), int(f), int(s)) for b, f, s in zip(busy, freeze, starve)),
        pcs=tuple(PcStats(pc, int(requests[i]), int(accepted[i]),
                          float(accepted[i] * bl / hc) if hc else 0.0,
                          int(words_in[i]), int(words_out[i]),
                          _ring_words(dc_words[i], dc_head[i], dc_n[i]))
                  for i, pc in enumerate(used_pcs)),
        fifos=_fifo_stats(net, seg, used_pcs, plan, cc, ls_sum, ls_min, ls_max, bm_sum, bm_min,
                          bm_max, dc_sum, dc_min, dc_max),
        weight_words_consumed=tuple(int(consumed[seg_layer == i].sum()) for i in range(L)),
        bound_im_s=_bound(net, plan, hbm, cfg),
        deadlock=deadlock,
        trace_rows=tuple(map(tuple, trace.tolist())),
    )
    return report


def _bound(net, plan, hbm, cfg) -> float:
    rep = roofline(net, plan, hbm, cfg.core_clock_hz, cfg.hbm_clock_hz)
    return rep.unlimited_hbm_im_s if cfg.ideal_memory else rep.bound_im_s


def _ring_words(buf: np.ndarray, head: int, count: int) -> int:
    idx = (head + np.arange(count)) % len(buf)
    return int(buf[idx].sum())


def _csr(n: int, pairs) -> tuple[np.ndarray, np.ndarray]:
    """Group (key, value) pairs by key, keeping insertion order inside each group."""
    buckets = [[] for _ in range(n)]
    for k, v in pairs:
        buckets[k].append(v)
    ptr = np.zeros(n + 1, np.int64)
    for i, b in enumerate(buckets):
        ptr[i + 1] = ptr[i] + len(b)
    flat = np.array([v for b in buckets for v in b], np.int64)
    return ptr, flat


def _steady(img_done: np.ndarray, core_hz: int) -> float:
    """Rate over the second half of the run, after the pipeline has filled."""
    n = len(img_done)
    if n == 1:
        return core_hz / img_done[0]
    first = n // 2 if n >= 3 else 0
    span = img_done[-1] - img_done[first - 1] if first else img_done[-1]
    k = n - first
    return float(k * core_hz / span) if span > 0 else math.inf


def _fifo_stats(net, seg, used_pcs, plan, cc, ls_sum, ls_min, ls_max, bm_sum, bm_min, bm_max,
                dc_sum, dc_min, dc_max) -> tuple[FifoStats, ...]:
    out = []
    for i, pc in enumerate(used_pcs):
        out.append(FifoStats(f"dcfifo[pc{pc}]", plan.fifo.dcfifo_words, int(dc_min[i]),
                             float(dc_sum[i] / cc), int(dc_max[i])))
    for s, row in enumerate(seg):
        layer, pc = int(row[0]), int(row[1])
        out.append(FifoStats(f"burst_match[layer{layer}@pc{pc}]", int(row[4]), int(bm_min[s]),
                             float(bm_sum[s] / cc), int(bm_max[s])))
        out.append(FifoStats(f"last_stage[layer{layer}@pc{pc}]", int(row[3]), int(ls_min[s]),
                             float(ls_sum[s] / cc), int(ls_max[s])))
    return tuple(out)


def detect_deadlock(net, plan, seg, used_pcs, l_onchip, l_total, started, produced, ls, bm, fetched,
                    dc_n, dc_head, dc_seg, ie_ptr, ie_edge, oe_ptr, oe_edge, e_src, e_cap,
                    need_tab, e_tab_off, e_src_outh, cycle) -> DeadlockReport:
    """Name every blocked FIFO and stalled engine in the final simulator state."""
    blocked = []
    hol = None
    for i, pc in enumerate(used_pcs):
        if dc_n[i] == 0:
            continue
        s = int(dc_seg[i, dc_head[i]])
        owner = int(seg[s, 0])
        if bm[s] + 3 > seg[s, 4]:
            blocked.append(f"dcfifo[pc{pc}] head word for layer {owner} cannot enter its full "
                           f"burst-match FIFO")
            hol = owner if hol is None else hol
    for s, row in enumerate(seg):
        layer, pc = int(row[0]), int(row[1])
        if bm[s] + 3 > row[4]:
            blocked.append(f"burst_match[layer{layer}@pc{pc}] full ({int(bm[s])}/{int(row[4])})")
        if ls[s] >= row[3]:
            blocked.append(f"last_stage[layer{layer}@pc{pc}] full ({int(ls[s])}/{int(row[3])})")
        elif ls[s] < row[2] and fetched[s] < row[6]:
            blocked.append(f"last_stage[layer{layer}@pc{pc}] empty ({int(ls[s])} words)")
    for l, layer in enumerate(net.layers):
        if produced[l] >= l_total[l]:
            continue
        if started[l] > produced[l]:
            if not l_onchip[l]:
                blocked.append(f"layer {l} frozen: no weights available")
            continue
        g = int(started[l])
        img, r = divmod(g, layer.output_height)
        waits = []
        for q in range(ie_ptr[l], ie_ptr[l + 1]):
            e = ie_edge[q]
            need = img * e_src_outh[e] + need_tab[e_tab_off[e] + r]
            if produced[e_src[e]] < need:
                waits.append(int(e_src[e]))
        if waits:
            blocked.append(f"layer {l} waiting on activations from layer(s) "
                           f"{', '.join(map(str, waits))}")
    return DeadlockReport(int(cycle), tuple(blocked), hol)


# -- head-of-line scenario -------------------------------------------------------

SHARED_NETWORK = """network shared
layer 0 kind=standard-conv kh=3 kw=3 ci=64 co=64 stride=1 in=8x8 out=8x8 pi=1 po=1
layer 1 kind=pointwise-conv kh=1 kw=1 ci=64 co=1 stride=1 in=8x8 out=8x8 pi=1 po=1
layer 2 kind=standard-conv kh=3 kw=3 ci=1 co=64 stride=1 in=8x8 out=8x8 pi=1 po=1
"""


def shared_setup(shared: bool = True, burst_length: int = 8,
                 hbm: HbmConfig | None = None) -> tuple[NetworkModel, OffloadPlan, HbmConfig]:
    """Three consecutive layers streaming weights through one pseudo-channel.

    The middle layer's whole weight stream fits in its last-stage FIFO, so
    only the third layer (id 2) can fill its burst-match FIFO while it waits
    for activations that the weight-starved first layer never produces.
    """
    from hbmflow.network import parse_network
    hbm = hbm or HbmConfig()
    net = parse_network(SHARED_NETWORK)
    plan = plan_from_offload_set(net, range(3), hbm, burst_length, policy="scenario")
    pcs = (0, 0, 0) if shared else (0, 1, 2)
    placements = tuple(Placement(i, False, ((pc, 1),)) for i, pc in enumerate(pcs))
    return net, replace(plan, placements=placements), hbm


def run_shared_scenario(mode: FlowMode | str, shared: bool = True, n_images: int = 2,
                        seed: int = 0) -> SimReport:
    net, plan, hbm = shared_setup(shared)
    return simulate(net, plan, hbm, SimConfig(flow_mode=FlowMode(mode), n_images=n_images,
                                              seed=seed))


# -- output ------------------------------------------------------------------------

_EVENT_NAMES = {_kernel.EV_ISSUE: "issue", _kernel.EV_ARRIVE: "arrive", _kernel.EV_ROW: "row_done",
                _kernel.EV_IMAGE: "image_done", _kernel.EV_DEADLOCK: "deadlock"}


def trace_csv(report: SimReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cycle", "resource", "event"])
    for cyc, kind, a, b in report.trace_rows:
        if kind in (_kernel.EV_ISSUE, _kernel.EV_ARRIVE):
            w.writerow([cyc, f"pc{a}", f"{_EVENT_NAMES[kind]} layer{b}"])
        elif kind == _kernel.EV_ROW:
            w.writerow([cyc, f"layer{a}", f"row_done {b}"])
        elif kind == _kernel.EV_IMAGE:
            w.writerow([cyc, f"layer{b}", f"image_done {a}"])
        else:
            w.writerow([cyc, "watchdog", "deadlock"])
    return buf.getvalue()


def report_text(rep: SimReport) -> str:
    lines = [
        f"network              {rep.network}",
        f"flow_mode            {rep.flow_mode}",
        f"burst_length         {rep.burst_length}",
        f"n_images             {rep.n_images}",
        f"completed            {'yes' if rep.completed else 'no'}",
        f"total_cycles         {rep.total_cycles}",
        f"throughput_im_s      {rep.throughput_im_s:.3f}",
        f"steady_state_im_s    {rep.steady_state_im_s:.3f}",
        f"roofline_im_s        {rep.bound_im_s:.3f}",
        f"within_bound         {'yes' if rep.within_bound else 'NO'}",
        "",
        f"{'layer':>5} {'busy':>10} {'freeze':>10} {'starve':>10} {'words':>12}",
    ]
    for i, (st, w) in enumerate(zip(rep.layers, rep.weight_words_consumed)):
        lines.append(f"{i:>5} {st.busy_cycles:>10} {st.freeze_cycles:>10} "
                     f"{st.starve_cycles:>10} {w:>12}")
    if rep.pcs:
        lines += ["", f"{'pc':>4} {'requests':>10} {'accepted':>10} {'util':>7} "
                      f"{'words_in':>10} {'words_out':>10} {'residual':>9}"]
        for p in rep.pcs:
            lines.append(f"{p.pc:>4} {p.requests:>10} {p.accepted:>10} {p.utilization:>7.4f} "
                         f"{p.words_in:>10} {p.words_out:>10} {p.residual_words:>9}")
    if rep.fifos:
        lines += ["", f"{'fifo':<32} {'cap':>6} {'min':>6} {'mean':>9} {'max':>6}"]
        for f in rep.fifos:
            lines.append(f"{f.name:<32} {f.capacity:>6} {f.min:>6} {f.mean:>9.2f} {f.max:>6}")
    if rep.deadlock:
        d = rep.deadlock
        lines += ["", f"DEADLOCK at cycle {d.cycle}",
                  f"head_of_line_owner   {'-' if d.head_of_line_owner is None else d.head_of_line_owner}"]
        lines += [f"  blocked: {b}" for b in d.blocked_resources]
    return "\n".join(lines) + "\n"

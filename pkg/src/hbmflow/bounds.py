"""Analytic throughput bounds: HBM traffic bound, per-layer compute bound, roofline."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

from hbmflow.hbm import HbmConfig, effective_bandwidth, read_efficiency
from hbmflow.network import NetworkModel, layer_traffic_bytes, weight_traffic_per_image
from hbmflow.planner import OffloadPlan


class BoundError(ValueError):
    pass


HBM_BANDWIDTH = "hbm-bandwidth"
ON_CHIP_COMPUTE = "on-chip-compute"


@dataclass(frozen=True)
class RooflineReport:
    hbm_bound_im_s: float
    compute_bound_im_s: float
    per_layer_bound_im_s: tuple[float, ...]
    per_layer_kind: tuple[str, ...]
    bottleneck_layer: int
    bottleneck_kind: str
    unlimited_hbm_im_s: float

    @property
    def bound_im_s(self) -> float:
        return min(self.hbm_bound_im_s, min(self.per_layer_bound_im_s))


def layer_cycles_per_image(layer) -> int:
    return layer.output_height * layer.cycles_per_row


def hbm_throughput_bound(net: NetworkModel, hbm: HbmConfig,
                         core_clock_hz: int = 300_000_000) -> float:
    """Effective weight bandwidth divided by the per-image weight traffic."""
    total = weight_traffic_per_image(net).total_bytes
    if total <= 0:
        raise BoundError("network has no weight traffic")
    return effective_bandwidth(hbm, 240, core_clock_hz) / total


def compute_throughput_bound(net: NetworkModel, plan: OffloadPlan | None = None,
                             core_clock_hz: int = 300_000_000):
    """Returns (bound_im_s, per_layer_im_s, bottleneck_layer, bottleneck_on_chip)."""
    per = [core_clock_hz / layer_cycles_per_image(l) for l in net.layers]
    worst = min(range(len(per)), key=lambda i: (per[i], i))
    on_chip = True if plan is None else plan.placements[worst].on_chip
    return per[worst], per, worst, on_chip


def pc_supply_words(hbm: HbmConfig, burst_length: int, core_clock_hz: int,
                    hbm_clock_hz: int | None = None) -> float:
    """Weight words per core cycle one pseudo-channel can hand to the fabric."""
    hz = core_clock_hz if hbm_clock_hz is None else hbm_clock_hz
    return 3 * min(1.0, read_efficiency(hbm, burst_length) * hz / core_clock_hz)


def roofline(net: NetworkModel, plan: OffloadPlan, hbm: HbmConfig,
             core_clock_hz: int = 300_000_000, hbm_clock_hz: int | None = None) -> RooflineReport:
    if len(plan.placements) != len(net.layers):
        raise BoundError("plan does not match network")
    _, compute, _, _ = compute_throughput_bound(net, plan, core_clock_hz)
    supply = pc_supply_words(hbm, plan.burst_length, core_clock_hz, hbm_clock_hz)

    # weight words per image each pseudo-channel must deliver
    demand: dict[int, float] = {}
    offloaded_bytes = 0
    for pl in plan.placements:
        if pl.on_chip:
            continue
        layer = net.layers[pl.layer]
        words = layer_traffic_bytes(layer) / 10
        offloaded_bytes += layer_traffic_bytes(layer)
        for pc, chains in pl.segments:
            demand[pc] = demand.get(pc, 0.0) + words * chains / layer.parallelism

    per, kinds = [], []
    for pl, c in zip(plan.placements, compute):
        bound, kind = c, ON_CHIP_COMPUTE
        if not pl.on_chip:
            if pl.segments:
                cap = min(supply * core_clock_hz / demand[pc] for pc in pl.pcs)
            else:
                # not yet mapped: the layer's own share of a channel, p of 3 chains
                layer = net.layers[pl.layer]
                cap = (supply * layer.parallelism / 3 * core_clock_hz /
                       (layer_traffic_bytes(layer) / 10))
            if cap < bound:
                bound, kind = cap, HBM_BANDWIDTH
        per.append(bound)
        kinds.append(kind)

    hbm_bound = (effective_bandwidth(hbm, 240, core_clock_hz) / offloaded_bytes
                 if offloaded_bytes else math.inf)
    worst = min(range(len(per)), key=lambda i: (per[i], i))
    kind = kinds[worst]
    if hbm_bound < per[worst]:
        off = [i for i, pl in enumerate(plan.placements) if not pl.on_chip]
        worst = min(off, key=lambda i: (per[i], i))
        kind = HBM_BANDWIDTH
    return RooflineReport(
        hbm_bound_im_s=hbm_bound,
        compute_bound_im_s=min(compute),
        per_layer_bound_im_s=tuple(per),
        per_layer_kind=tuple(kinds),
        bottleneck_layer=worst,
        bottleneck_kind=kind,
        unlimited_hbm_im_s=min(compute),
    )


def roofline_text(rep: RooflineReport) -> str:
    lines = [
        f"hbm_bound_im_s       {rep.hbm_bound_im_s:.3f}",
        f"compute_bound_im_s   {rep.compute_bound_im_s:.3f}",
        f"roofline_im_s        {rep.bound_im_s:.3f}",
        f"unlimited_hbm_im_s   {rep.unlimited_hbm_im_s:.3f}",
        f"bottleneck_layer     {rep.bottleneck_layer}",
        f"bottleneck_kind      {rep.bottleneck_kind}",
        "",
        f"{'layer':>5}  {'bound_im_s':>14}  kind",
    ]
    for i, (b, k) in enumerate(zip(rep.per_layer_bound_im_s, rep.per_layer_kind)):
        lines.append(f"{i:>5}  {b:>14.3f}  {k}")
    return "\n".join(lines) + "\n"


def roofline_csv(rep: RooflineReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "bound_im_s", "kind"])
    for i, (b, k) in enumerate(zip(rep.per_layer_bound_im_s, rep.per_layer_kind)):
        w.writerow([i, f"{b:.6f}", k])
    return buf.getvalue()

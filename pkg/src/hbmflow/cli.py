"""hbmflow command line: plan, simulate, sweep, bound, characterize, rerun.

Exit codes: 0 success, 2 usage or validation error, 3 deadlock, 4 infeasible plan.
Reports go to --out, or to $HBMFLOW_OUT (default: current directory) under a
name derived from the command. A ``.manifest.json`` is written next to every
report; ``hbmflow rerun <manifest>`` reproduces the report byte for byte.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from hbmflow import __version__
from hbmflow.bounds import (BoundError, hbm_throughput_bound, roofline, roofline_csv,
                            roofline_text)
from hbmflow.design import DesignConfig, design_all_hbm, design_hybrid, with_burst_length
from hbmflow.hbm import (HbmConfig, HbmError, characterize, effective_bandwidth,
                         load_calibration)
from hbmflow.network import (NetworkError, builtin_network, parse_network, serialize_network,
                             weight_m20ks)
from hbmflow.planner import (PlanError, PlanInfeasible, assign_pseudo_channels, parse_plan,
                             plan_from_offload_set, plan_offload, select_burst_length,
                             serialize_plan)
from hbmflow.sim import (FlowMode, SimConfig, SimError, shared_setup, report_text, simulate,
                         trace_csv)

EXIT_OK, EXIT_USAGE, EXIT_DEADLOCK, EXIT_INFEASIBLE = 0, 2, 3, 4
OUT_ENV = "HBMFLOW_OUT"


class UsageError(Exception):
    pass


# -- shared helpers ------------------------------------------------------------

def _out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "."))


def _out_path(args, default_name: str) -> Path:
    return Path(args.out) if args.out else _out_dir() / default_name


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_network(args):
    if getattr(args, "builtin", None):
        return builtin_network(args.builtin), None
    if not getattr(args, "network", None):
        raise UsageError("give a network file or --builtin NAME")
    path = Path(args.network)
    if not path.is_file():
        raise UsageError(f"network file not found: {path}")
    return parse_network(path.read_text(), name=path.stem), str(path)


def _hbm(args) -> HbmConfig:
    base = HbmConfig()
    if getattr(args, "calibration", None):
        base = load_calibration(args.calibration, base)
    n = getattr(args, "pcs", None)
    if n is not None:
        if not 0 <= n <= len(HbmConfig().usable_pcs):
            raise UsageError(f"--pcs must be between 0 and {len(HbmConfig().usable_pcs)}")
        base = replace(base, usable_pcs=HbmConfig().usable_pcs[:n])
    return base


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _manifest(args, argv, outputs, inputs, config: dict):
    report = Path(outputs[0])
    data = {
        "command": args.cmd,
        "argv": list(argv),
        "inputs": {p: _sha256(p) for p in inputs if p},
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "outputs": [str(p) for p in outputs],
    }
    _write(report.with_name(report.name + ".manifest.json"),
           json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


def _plan_table(net, plan) -> str:
    lines = [f"{'layer':>5} {'kind':<15} {'p':>4} {'score':>10} {'m20k':>7} {'place':<7} pcs"]
    for pl, layer, score in zip(plan.placements, net.layers, plan.scores):
        where = "onchip" if pl.on_chip else "hbm"
        pcs = ",".join(f"{pc}:{c}" for pc, c in pl.segments) or "-"
        lines.append(f"{layer.id:>5} {layer.kind.value:<15} {layer.parallelism:>4} "
                     f"{float(score):>10.3f} {weight_m20ks(layer):>7} {where:<7} {pcs}")
    f = plan.fifo
    lines += [
        "",
        f"policy               {plan.policy}",
        f"burst_length         {plan.burst_length}",
        f"offloaded_layers     {len(plan.offloaded)}",
        f"hbm_bw_words_used    {plan.hbm_bw_words_used}",
        f"spanning_layers      {','.join(map(str, plan.spanning)) or '-'}",
        f"onchip_bits_used     {plan.onchip_bits_used} ({plan.onchip_bits_used / 1e6:.2f} Mb)",
        f"last_stage_words     {f.last_stage_words} (latency cover {f.required_cycles} cycles)",
        f"burst_match_words    {f.burst_match_words}",
        f"dcfifo_words         {f.dcfifo_words}",
    ]
    return "\n".join(lines) + "\n"


# -- commands ------------------------------------------------------------------

def cmd_plan(args, argv) -> int:
    net, src = _load_network(args)
    hbm = _hbm(args)
    budget = int(round(args.onchip_mb * 1e6))
    cfg = DesignConfig(tensor_blocks=args.tensor_blocks, onchip_budget_bits=budget,
                       burst_length=args.burst, core_clock_hz=int(args.core_mhz * 1e6))
    out = _out_path(args, f"plan-{net.name}.plan")
    status = EXIT_OK
    if args.design == "hybrid":
        net, plan = design_hybrid(net, hbm, cfg)
    elif args.design == "all-hbm":
        net, plan = design_all_hbm(net, hbm, cfg)
    else:
        try:
            plan = plan_offload(net, hbm, budget, burst_length=args.burst,
                                core_clock_hz=cfg.core_clock_hz)
        except PlanInfeasible as exc:
            plan, status = exc.plan, EXIT_INFEASIBLE
        plan = assign_pseudo_channels(plan, net, hbm)
    net_out = out.with_suffix(".net")
    _write(out, serialize_plan(plan))
    _write(net_out, serialize_network(net))
    summary = _plan_table(net, plan)
    if status == EXIT_INFEASIBLE:
        short = plan.onchip_bits_used - budget
        summary += f"INFEASIBLE: on-chip demand exceeds budget by {short} bits ({short / 1e6:.2f} Mb)\n"
    sys.stdout.write(summary)
    _manifest(args, argv, [out, net_out], [src],
              {"onchip_budget_bits": budget, "pcs": list(hbm.usable_pcs),
               "design": asdict(cfg), "mode": args.design})
    return status


def _sim_config(args) -> SimConfig:
    return SimConfig(core_clock_hz=int(args.core_mhz * 1e6), hbm_clock_hz=int(args.hbm_mhz * 1e6),
                     n_images=args.images, flow_mode=FlowMode(args.flow.replace("-", "_")),
                     seed=args.seed, ideal_memory=args.ideal, random_accept=args.random_accept,
                     trace=bool(args.trace))


def cmd_simulate(args, argv) -> int:
    inputs = []
    if args.scenario == "shared":
        net, plan, hbm = shared_setup(shared=not args.unshared)
    else:
        net, src = _load_network(args)
        if not args.plan:
            raise UsageError("simulate needs --plan (or --scenario shared)")
        if not Path(args.plan).is_file():
            raise UsageError(f"plan file not found: {args.plan}")
        plan = parse_plan(Path(args.plan).read_text())
        hbm = _hbm(args)
        inputs = [src, args.plan]
    cfg = _sim_config(args)
    rep = simulate(net, plan, hbm, cfg)
    out = _out_path(args, f"sim-{net.name}.txt")
    text = report_text(rep)
    _write(out, text)
    outputs = [out]
    if args.trace:
        _write(Path(args.trace), trace_csv(rep))
        outputs.append(Path(args.trace))
    sys.stdout.write(text)
    _manifest(args, argv, outputs, inputs, {"sim": asdict(cfg), "pcs": list(hbm.usable_pcs)})
    return EXIT_OK if rep.completed else EXIT_DEADLOCK


def _sweep_point(job):
    name_or_text, is_builtin, mode, bl, cfg_dict, design_dict = job
    net = builtin_network(name_or_text) if is_builtin else parse_network(name_or_text)
    hbm = HbmConfig()
    dcfg = DesignConfig(**design_dict)
    tuned, plan = (design_hybrid if mode == "hybrid" else design_all_hbm)(net, hbm, dcfg)
    plan = with_burst_length(plan, tuned, hbm, bl)
    cfg = SimConfig(**cfg_dict)
    rep = simulate(tuned, plan, hbm, cfg)
    roof = roofline(tuned, plan, hbm, cfg.core_clock_hz, cfg.hbm_clock_hz)
    busy = sum(l.busy_cycles for l in rep.layers)
    frz = sum(l.freeze_cycles for l in rep.layers)
    return {"mode": mode, "burst": bl, "throughput_im_s": rep.throughput_im_s,
            "steady_state_im_s": rep.steady_state_im_s, "roofline_im_s": roof.bound_im_s,
            "bottleneck_kind": roof.bottleneck_kind,
            "freeze_fraction": frz / (busy + frz) if busy + frz else 0.0}


def cmd_sweep(args, argv) -> int:
    try:
        bursts = [int(b) for b in args.burst.split(",")]
    except ValueError:
        raise UsageError(f"--burst expects comma-separated integers, got {args.burst!r}") from None
    modes = args.mode.split(",")
    for m in modes:
        if m not in ("hybrid", "all-hbm"):
            raise UsageError(f"unknown mode {m!r}")
    net, src = _load_network(args)
    payload, is_builtin = (args.builtin, True) if args.builtin else (serialize_network(net), False)
    cfg = SimConfig(n_images=args.images, seed=args.seed)
    cfg_dict = {k: v for k, v in asdict(cfg).items()}
    dcfg = DesignConfig(tensor_blocks=args.tensor_blocks)
    jobs = [(payload, is_builtin, m, bl, cfg_dict, asdict(dcfg)) for m in modes for bl in bursts]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "burst", "throughput_im_s", "steady_state_im_s", "roofline_im_s",
                "bottleneck_kind", "freeze_fraction"])
    for r in rows:
        w.writerow([r["mode"], r["burst"], f"{r['throughput_im_s']:.3f}",
                    f"{r['steady_state_im_s']:.3f}", f"{r['roofline_im_s']:.3f}",
                    r["bottleneck_kind"], f"{r['freeze_fraction']:.4f}"])
    for m in modes:
        best = select_burst_length({r["burst"]: r["steady_state_im_s"] for r in rows
                                    if r["mode"] == m})
        buf.write(f"# recommended burst length ({m}): {best}\n")
    out = _out_path(args, f"sweep-{net.name}.csv")
    _write(out, buf.getvalue())
    sys.stdout.write(buf.getvalue())
    _manifest(args, argv, [out], [src], {"sim": cfg_dict, "design": asdict(dcfg),
                                         "bursts": bursts, "modes": modes})
    return EXIT_OK


def cmd_bound(args, argv) -> int:
    net, src = _load_network(args)
    hbm = _hbm(args)
    core = int(args.core_mhz * 1e6)
    inputs = [src]
    if args.plan:
        if not Path(args.plan).is_file():
            raise UsageError(f"plan file not found: {args.plan}")
        plan = parse_plan(Path(args.plan).read_text())
        inputs.append(args.plan)
    else:
        # no plan: every layer streams from HBM, as in the all-HBM bound
        plan = plan_from_offload_set(net, range(len(net.layers)), hbm, 8, core_clock_hz=core,
                                     policy="all-hbm")
    hbm_bound = hbm_throughput_bound(net, hbm, core)
    rep = roofline(net, plan, hbm, core)
    if args.format == "csv":
        text = roofline_csv(rep)
    else:
        text = (f"effective_bandwidth  {effective_bandwidth(hbm, 240, core):.1f} B/s\n"
                f"all_hbm_bound_im_s   {hbm_bound:.3f}\n" + roofline_text(rep))
    out = _out_path(args, f"bound-{net.name}.{'csv' if args.format == 'csv' else 'txt'}")
    _write(out, text)
    sys.stdout.write(text)
    _manifest(args, argv, [out], inputs, {"core_clock_hz": core, "pcs": list(hbm.usable_pcs)})
    return EXIT_OK


def cmd_characterize(args, argv) -> int:
    hbm = _hbm(args)
    st = characterize(hbm, n_txn=args.txns, burst_length=args.bl, pattern=args.pattern,
                      seed=args.seed, random_accept=args.random_accept)
    fields = asdict(st)
    if args.format == "csv":
        text = ",".join(fields) + "\n" + ",".join(str(v) for v in fields.values()) + "\n"
    else:
        text = "".join(f"{k:<20} {v}\n" for k, v in fields.items())
    out = _out_path(args, f"characterize-bl{args.bl}.{'csv' if args.format == 'csv' else 'txt'}")
    _write(out, text)
    sys.stdout.write(text)
    _manifest(args, argv, [out], [args.calibration],
              {"burst_length": args.bl, "txns": args.txns, "pattern": args.pattern,
               "random_accept": args.random_accept})
    return EXIT_OK


def cmd_rerun(args, argv) -> int:
    path = Path(args.manifest)
    if not path.is_file():
        raise UsageError(f"manifest not found: {path}")
    data = json.loads(path.read_text())
    return main(data["argv"])


# -- parser ------------------------------------------------------------------------

def _net_args(p, positional=True):
    if positional:
        p.add_argument("network", nargs="?", help="network descriptor file")
    p.add_argument("--builtin", choices=("resnet18", "resnet50", "vgg16"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hbmflow", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("plan", help="place weights on chip or in HBM")
    _net_args(p)
    p.add_argument("--onchip-mb", type=float, default=140.0)
    p.add_argument("--pcs", type=int, default=None, help="number of usable pseudo-channels")
    p.add_argument("--burst", type=int, default=8, choices=(1, 2, 4, 8, 16, 32))
    p.add_argument("--design", choices=("none", "hybrid", "all-hbm"), default="none",
                   help="rebalance layer parallelism before planning")
    p.add_argument("--tensor-blocks", type=int, default=DesignConfig().tensor_blocks)
    p.add_argument("--core-mhz", type=float, default=300.0)
    p.add_argument("--calibration")
    p.add_argument("--out")

    p = sub.add_parser("simulate", help="cycle-level simulation of a plan")
    _net_args(p)
    p.add_argument("--plan")
    p.add_argument("--scenario", choices=("shared",))
    p.add_argument("--unshared", action="store_true", help="shared: one pseudo-channel per layer")
    p.add_argument("--images", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--flow", choices=("credit", "ready-valid"), default="credit")
    p.add_argument("--trace", metavar="CSV", help="write a per-event trace")
    p.add_argument("--ideal", action="store_true", help="HBM layers behave as if on chip")
    p.add_argument("--random-accept", action="store_true")
    p.add_argument("--core-mhz", type=float, default=300.0)
    p.add_argument("--hbm-mhz", type=float, default=300.0)
    p.add_argument("--pcs", type=int, default=None)
    p.add_argument("--calibration")
    p.add_argument("--out")

    p = sub.add_parser("sweep", help="burst-length sweep of designed plans")
    _net_args(p)
    p.add_argument("--burst", default="8,16,32")
    p.add_argument("--mode", default="hybrid", help="hybrid, all-hbm, or both comma-separated")
    p.add_argument("--images", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tensor-blocks", type=int, default=DesignConfig().tensor_blocks)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")

    p = sub.add_parser("bound", help="analytic throughput bounds")
    _net_args(p)
    p.add_argument("--plan")
    p.add_argument("--pcs", type=int, default=None)
    p.add_argument("--core-mhz", type=float, default=300.0)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--calibration")
    p.add_argument("--out")

    p = sub.add_parser("characterize", help="traffic-generator run against the HBM model")
    p.add_argument("--bl", type=int, default=8)
    p.add_argument("--txns", type=int, default=10_000)
    p.add_argument("--pattern", choices=("random", "sequential"), default="random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--random-accept", action="store_true")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--calibration")
    p.add_argument("--out")

    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("manifest")
    return ap


COMMANDS = {"plan": cmd_plan, "simulate": cmd_simulate, "sweep": cmd_sweep, "bound": cmd_bound,
            "characterize": cmd_characterize, "rerun": cmd_rerun}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.cmd](args, argv)
    except UsageError as exc:
        print(f"hbmflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PlanInfeasible as exc:
        print(f"hbmflow: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NetworkError, PlanError, HbmError, BoundError, SimError, OSError) as exc:
        print(f"hbmflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

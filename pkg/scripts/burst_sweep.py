"""Burst-length sweep of the designed hybrid and all-HBM plans for the builtin networks.

    python scripts/burst_sweep.py --jobs 4 --images 6
"""
import argparse
from concurrent.futures import ProcessPoolExecutor

from hbmflow.bounds import roofline
from hbmflow.design import design_all_hbm, design_hybrid, with_burst_length
from hbmflow.hbm import HbmConfig
from hbmflow.network import builtin_network
from hbmflow.planner import select_burst_length
from hbmflow.sim import SimConfig, simulate


def run(job):
    name, mode, bl, images = job
    hbm = HbmConfig()
    flow = design_hybrid if mode == "hybrid" else design_all_hbm
    net, plan = flow(builtin_network(name), hbm)
    plan = with_burst_length(plan, net, hbm, bl)
    rep = simulate(net, plan, hbm, SimConfig(n_images=images))
    roof = roofline(net, plan, hbm)
    return name, mode, bl, rep.throughput_im_s, rep.steady_state_im_s, roof.bound_im_s, roof.bottleneck_kind


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--networks", default="resnet18,resnet50,vgg16")
    ap.add_argument("--modes", default="hybrid,all-hbm")
    ap.add_argument("--bursts", default="8,16,32")
    ap.add_argument("--images", type=int, default=6)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    jobs = [(n, m, int(b), args.images) for n in args.networks.split(",")
            for m in args.modes.split(",") for b in args.bursts.split(",")]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(run, jobs))
    else:
        rows = [run(j) for j in jobs]

    print(f"{'network':<9} {'mode':<8} {'BL':>3} {'im/s':>9} {'steady':>9} {'roofline':>9}  bottleneck")
    for name, mode, bl, thr, steady, bound, kind in rows:
        print(f"{name:<9} {mode:<8} {bl:>3} {thr:>9.1f} {steady:>9.1f} {bound:>9.1f}  {kind}")
    print()
    groups = {}
    for name, mode, bl, _, steady, _, _ in rows:
        groups.setdefault((name, mode), {})[bl] = steady
    for (name, mode), by_bl in groups.items():
        print(f"recommended burst length {name} {mode}: {select_burst_length(by_bl)}")
    for name in args.networks.split(","):
        if (name, "hybrid") in groups and (name, "all-hbm") in groups:
            h = max(groups[(name, "hybrid")].values())
            a = max(groups[(name, "all-hbm")].values())
            print(f"hybrid / all-HBM {name}: {h / a:.2f}")


if __name__ == "__main__":
    main()

"""Analytic bounds for the builtin networks: all-HBM traffic bound, designed-plan rooflines.

    python scripts/bounds_table.py > bounds.csv
"""
import argparse
import csv
import sys

from hbmflow.bounds import hbm_throughput_bound, roofline
from hbmflow.design import DesignConfig, design_all_hbm, design_hybrid
from hbmflow.hbm import HbmConfig
from hbmflow.network import builtin_network, weight_traffic_per_image


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tensor-blocks", type=int, default=DesignConfig().tensor_blocks)
    ap.add_argument("--burst", type=int, default=8)
    args = ap.parse_args()
    hbm = HbmConfig()
    cfg = DesignConfig(tensor_blocks=args.tensor_blocks, burst_length=args.burst)

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["network", "traffic_mb", "all_hbm_traffic_bound", "mode", "roofline",
                "unlimited_hbm", "bottleneck_layer", "bottleneck_kind"])
    for name in ("resnet18", "resnet50", "vgg16"):
        net = builtin_network(name)
        traffic = weight_traffic_per_image(net).total_bytes / 1e6
        traffic_bound = hbm_throughput_bound(net, hbm)
        for mode, flow in (("hybrid", design_hybrid), ("all-hbm", design_all_hbm)):
            tuned, plan = flow(net, hbm, cfg)
            rep = roofline(tuned, plan, hbm)
            w.writerow([name, f"{traffic:.2f}", f"{traffic_bound:.1f}", mode,
                        f"{rep.bound_im_s:.1f}", f"{rep.unlimited_hbm_im_s:.1f}",
                        rep.bottleneck_layer, rep.bottleneck_kind])


if __name__ == "__main__":
    main()

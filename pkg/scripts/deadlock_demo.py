"""Head-of-line blocking on a shared pseudo-channel, and how often it bites random configurations.

    python scripts/deadlock_demo.py --configs 200
"""
import argparse
import random

from hbmflow.randnet import random_shared_setup
from hbmflow.sim import FlowMode, SimConfig, report_text, run_shared_scenario, simulate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--configs", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    for mode in FlowMode:
        rep = run_shared_scenario(mode)
        print(f"== three layers on one channel, {mode.value} ==")
        print(report_text(rep))

    rng = random.Random(args.seed)
    seeds = [rng.randrange(2**31) for _ in range(args.configs)]
    for mode in FlowMode:
        stuck = sum(not simulate(*random_shared_setup(s),
                                 SimConfig(n_images=2, seed=s, flow_mode=mode)).completed
                    for s in seeds)
        print(f"{mode.value:<12} deadlocked in {stuck}/{len(seeds)} random shared-channel configurations")


if __name__ == "__main__":
    main()

"""Train and linearly probe desk-scale runs over variants, normalizations, and seeds.

Example:
    python scripts/desk_sweep.py --variants byol ccsl cssl --seeds 0 1 2
    python scripts/desk_sweep.py --variants byol --norms bn ln+ws gn+ws --steps 2000

Refinement variants fine-tune from a BYOL warm start (``--warm-steps``,
0 for cold start) within the same total step budget. Prints one JSON line
per run and a median-accuracy table at the end.
"""

import argparse
import json
import statistics
from collections import defaultdict
from dataclasses import asdict

from byolsl.experiments import DESK_STEPS, NORMS, VARIANTS, WARM_STEPS, desk_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--variants", nargs="+", default=["byol", "ccsl", "cssl"], choices=VARIANTS)
    p.add_argument("--norms", nargs="+", default=["bn"], choices=sorted(NORMS))
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--steps", type=int, default=DESK_STEPS, help="total step budget per run")
    p.add_argument("--warm-steps", type=int, default=WARM_STEPS, help="BYOL steps before a refinement loss starts")
    p.add_argument("--output", help="keep run directories under this path")
    args = p.parse_args()

    acc = defaultdict(list)
    for variant in args.variants:
        for norm in args.norms:
            for seed in args.seeds:
                out = f"{args.output}/{variant}_{norm}_s{seed}" if args.output else None
                s = desk_experiment(variant, seed, norm, args.steps, args.warm_steps, out)
                row = asdict(s)
                row.pop("collapse_trace")
                print(json.dumps(row), flush=True)
                acc[variant, norm].append(s.accuracy)
    print(f"{'variant':<22}{'norm':<8}median accuracy")
    for (variant, norm), values in acc.items():
        print(f"{variant:<22}{norm:<8}{statistics.median(values):.3f}  {values}")


if __name__ == "__main__":
    main()

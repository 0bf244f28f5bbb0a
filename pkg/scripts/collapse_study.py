"""Compare the collapse metric of the three-term loss (with repulsion) and CCSL.

Example:
    python scripts/collapse_study.py --seeds 0 1 2 --steps 2000
    python scripts/collapse_study.py --warm-steps 0     # cold start

For each seed prints the initial metric, its minimum and final ratio to the
initial value, and the mean absolute cosine between final predictions
(near 1 when every prediction lies on one line, whatever the sign).
"""

import argparse
from dataclasses import replace

import numpy as np

from byolsl import tensor as T
from byolsl.experiments import DESK_STEPS, WARM_STEPS, desk_config, warm_checkpoint
from byolsl.train import load_training_data, prepare_views, train_run


def mean_abs_cosine(result, seed: int) -> float:
    cfg = result.config
    rng = np.random.default_rng(seed)
    data = load_training_data(cfg)
    idx = rng.choice(len(data), cfg.train.batch_size, replace=False)
    v1, _ = prepare_views(data.images[idx], cfg, rng, T.get_default_dtype())
    with T.no_grad():
        q = T.l2_normalize(result.pair.forward_online(T.Tensor(v1)).prediction).data
    s = q @ q.T
    return float(np.abs(s[~np.eye(len(s), dtype=bool)]).mean())


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--steps", type=int, default=DESK_STEPS, help="total step budget, warm start included")
    p.add_argument("--warm-steps", type=int, default=WARM_STEPS, help="BYOL steps before the loss under study starts")
    p.add_argument("--variants", nargs="+", default=["ccsl-with-repulsion", "ccsl"])
    args = p.parse_args()
    print(f"{'variant':<22}{'seed':>5}{'initial':>10}{'min ratio':>11}{'final ratio':>13}{'mean |cos|':>12}")
    for variant in args.variants:
        for seed in args.seeds:
            cfg = desk_config(variant, seed, steps=args.steps - args.warm_steps)
            warm = str(warm_checkpoint(seed, steps=args.warm_steps)[0]) if args.warm_steps else ""
            cfg = cfg.replace(train=replace(cfg.train, log_every=1, warm_start=warm))
            res = train_run(cfg, None)
            final = np.mean([m.collapse for m in res.metrics[-20:]])
            print(f"{variant:<22}{seed:>5}{res.initial_collapse:>10.4f}{res.min_collapse / res.initial_collapse:>11.3f}"
                  f"{final / res.initial_collapse:>13.3f}{mean_abs_cosine(res, seed):>12.3f}", flush=True)


if __name__ == "__main__":
    main()

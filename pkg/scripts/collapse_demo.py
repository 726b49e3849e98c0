"""Fixed full batch versus the doubling batch scheduler: does training collapse?

Trains the embedding with the global batch-hard triplet term only and reports,
per seed and arm, the final loss, the mean embedding norm, the spread around
the mean embedding and the collapse flag.

    python scripts/collapse_demo.py --seeds 1,2,3
    python scripts/collapse_demo.py --label-noise 0.4 --epochs 20
"""
import argparse
import dataclasses

from reidadapt.collapse import CollapseConfig, collapse_run


def main() -> None:
    base = CollapseConfig()
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="1,2,3,4,5")
    for f in dataclasses.fields(CollapseConfig):
        flag = "--" + f.name.replace("_", "-")
        ap.add_argument(flag, type=type(getattr(base, f.name)), default=getattr(base, f.name))
    args = ap.parse_args()
    cfg = CollapseConfig(**{f.name: getattr(args, f.name) for f in dataclasses.fields(CollapseConfig)})
    print(f"{cfg}\nfixed batch = {cfg.full_batch}")
    print(f"{'seed':>4} {'arm':>9} {'collapsed':>9} {'loss':>7} {'norm':>7} {'spread':>7}  batch sizes")
    counts = {False: 0, True: 0}
    for seed in (int(s) for s in args.seeds.split(",")):
        for arm in (False, True):
            r = collapse_run(seed, arm, cfg)
            counts[arm] += r.collapsed
            sizes = sorted(set(r.batch_sizes))
            print(f"{seed:>4} {'scheduler' if arm else 'fixed':>9} {str(r.collapsed):>9} "
                  f"{r.loss_history[-1]:7.4f} {r.final_norm:7.4f} {r.final_spread:7.4f}  {sizes}")
    print(f"collapsed: fixed {counts[False]}, scheduler {counts[True]}")


if __name__ == "__main__":
    main()

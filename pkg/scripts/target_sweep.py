"""Frozen FLOPs fraction reached for a range of target fractions (search only).

    python3 scripts/target_sweep.py --dense runs/toy/dense.spvt --targets 0.4 0.6 0.8
"""
import argparse
from dataclasses import replace

from spvit.config import load_config
from spvit.cost import build_cost_table
from spvit.data import generate_synthetic
from spvit.pipeline import load
from spvit.search import run_search


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/toy.json")
    ap.add_argument("--dense", required=True, help="pretrained dense checkpoint")
    ap.add_argument("--targets", type=float, nargs="+", default=[0.4, 0.5, 0.6, 0.7, 0.8])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = load_config(args.config)
    train_set = generate_synthetic(cfg.data.synthetic, "train")
    dense = build_cost_table(cfg.model).dense_total
    print("target,frozen_fraction,epochs,converged,ops,ffn_kept")
    for frac in args.targets:
        model = load(args.dense).model
        res = run_search(model, train_set, replace(cfg.search, target_fraction=frac, seed=args.seed))
        d = res.descriptor
        print(f"{frac},{d.flops / dense:.4f},{res.epochs},{res.converged},"
              f"{'/'.join(b.umsa for b in d.blocks)},{'/'.join(str(b.ffn_kept) for b in d.blocks)}",
              flush=True)


if __name__ == "__main__":
    main()

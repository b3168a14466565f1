"""Toy search + fine-tune over several seeds; writes summary.json.

One dense model is pretrained from the config seed. Each search seed then
searches from it and fine-tunes the result twice, with and without the dense
teacher.

    python3 scripts/toy_experiment.py --config configs/toy.json --seeds 0 1 2 --out runs/exp
"""
import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from spvit.config import load_config
from spvit.cost import build_cost_table
from spvit.data import generate_synthetic
from spvit.model import build_model
from spvit.pipeline import TeacherHandle, evaluate, finetune, load, materialize, save, train
from spvit.search import run_search


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/toy.json")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/experiment")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--no-finetune", action="store_true")
    args = ap.parse_args()

    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = cfg.data.synthetic
    train_set, val_set = generate_synthetic(task, "train"), generate_synthetic(task, "val")
    table = build_cost_table(cfg.model)

    dense_path = out / "dense.spvt"
    if dense_path.exists():
        print(f"reusing {dense_path}")
    else:
        model = build_model(cfg.model, np.random.default_rng(cfg.seed), cfg.search.theta_init)
        train(model, train_set, cfg.pretrain.epochs, cfg.pretrain.lr, cfg.pretrain.batch_size,
              seed=cfg.seed, mode="dense", log=lambda s: print(f"pretrain {s}", flush=True))
        save(model, dense_path, provenance={"seed": cfg.seed, "stage": "pretrain"})
    dense = load(dense_path).model
    summary = {"config": cfg.to_dict(), "dense_top1": evaluate(dense, val_set, mode="dense")[0],
               "runs": {}}
    teacher = TeacherHandle.from_model(dense, str(dense_path))

    for seed in args.seeds:
        t = time.perf_counter()
        model = load(dense_path).model
        res = run_search(model, train_set, replace(cfg.search, seed=seed))
        desc = res.descriptor
        save(model, out / f"search_{seed}.spvt", desc)
        run = {"ops": [b.umsa for b in desc.blocks], "ffn_kept": [b.ffn_kept for b in desc.blocks],
               "fraction": desc.flops / table.dense_total, "epochs": res.epochs,
               "converged": res.converged, "search_secs": time.perf_counter() - t}
        if not args.no_finetune:
            for distill in (True, False):
                student = materialize(load(out / f"search_{seed}.spvt").model, desc)
                ft = cfg.finetune
                finetune(student, train_set, teacher if distill else None, ft.lam_dist,
                         ft.epochs, ft.lr, ft.batch_size, seed=seed)
                run["top1_distill" if distill else "top1_plain"] = evaluate(student, val_set)[0]
        summary["runs"][seed] = run
        print(f"seed {seed}: " + json.dumps(run), flush=True)

    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"dense top1 {summary['dense_top1']:.4f}; summary in {out / 'summary.json'}")


if __name__ == "__main__":
    main()

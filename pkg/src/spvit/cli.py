"""``spvit`` command line: search, finetune, eval, report, verify.

Exit codes: 0 success, 1 verification failure, 2 usage error (bad flags,
missing files, malformed config or checkpoint).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .cost import build_cost_table
from .data import Dataset, generate_synthetic, load_raw_dir
from .model import build_model
from .pipeline import (
    FormatError,
    IntegrityError,
    TeacherHandle,
    evaluate,
    finetune,
    load,
    materialize,
    save,
    train,
)
from .search import ArchitectureDescriptor, freeze, run_search
from .verify import SUITES, run_suites

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2

DENSE_CKPT = "dense.spvt"
SEARCH_CKPT = "search.spvt"
FINETUNED_CKPT = "finetuned.spvt"
DESCRIPTOR = "descriptor.json"


class UsageError(Exception):
    pass


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.data.source == "synthetic":
        task = cfg.data.synthetic
        return generate_synthetic(task, "train"), generate_synthetic(task, "val")
    if cfg.data.source == "raw":
        if not cfg.data.raw_dir:
            raise UsageError("data.source=raw needs data.raw_dir")
        if not Path(cfg.data.raw_dir, "manifest.json").exists():
            raise UsageError(f"no manifest.json in {cfg.data.raw_dir}")
        return load_raw_dir(cfg.data.raw_dir, "train"), load_raw_dir(cfg.data.raw_dir, "val")
    raise UsageError(f"unknown data.source {cfg.data.source!r}")


def _check_data(cfg: RunConfig, data: Dataset) -> None:
    m = cfg.model
    want = (m.image_size, m.image_size, m.in_chans)
    if data.images.shape[1:] != want:
        raise UsageError(f"images have shape {data.images.shape[1:]}, model expects {want}")
    if data.n_classes != m.n_classes:
        raise UsageError(f"data has {data.n_classes} classes, model.n_classes={m.n_classes}")


def _load_ckpt(path: Path):
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load(path)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def pretrain_dense(cfg: RunConfig, train_set: Dataset, out: Path, log=print) -> Path:
    """Train (or reuse) the dense model that seeds the search and serves as teacher."""
    path = out / DENSE_CKPT
    if cfg.pretrain.checkpoint:
        src = Path(cfg.pretrain.checkpoint)
        ck = _load_ckpt(src)
        if ck.model.config != cfg.model:
            raise UsageError(f"{src}: model config differs from the run config")
        if src.resolve() != path.resolve():
            save(ck.model, path, provenance=ck.provenance)
        return path
    model = build_model(cfg.model, np.random.default_rng(cfg.seed), cfg.search.theta_init)
    train(model, train_set, cfg.pretrain.epochs, cfg.pretrain.lr, cfg.pretrain.batch_size,
          seed=cfg.seed, mode="dense", log=lambda s: log(f"pretrain {s}"))
    save(model, path, provenance={"seed": cfg.seed, "stage": "pretrain"})
    return path


def cmd_search(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    train_set, _ = load_data(cfg)
    _check_data(cfg, train_set)
    dense = pretrain_dense(cfg, train_set, out)
    model = load(dense).model
    lines = []

    def log(s):
        lines.append(s)
        print(s, flush=True)

    result = run_search(model, train_set, cfg.search, log=log)
    (out / "search.csv").write_text("\n".join(lines) + "\n")
    desc = result.descriptor
    (out / DESCRIPTOR).write_text(desc.dumps() + "\n")
    save(model, out / SEARCH_CKPT, desc,
         provenance={"seed": cfg.search.seed, "config_hash": cfg.search.digest(),
                     "converged": result.converged})
    table = build_cost_table(cfg.model)
    print(f"converged={result.converged} epochs={result.epochs} "
          f"frozen_flops={desc.flops} fraction={desc.flops / table.dense_total:.4f}")
    return EXIT_OK


def _read_descriptor(path: Path) -> ArchitectureDescriptor:
    if not path.exists():
        raise UsageError(f"descriptor not found: {path}")
    try:
        return ArchitectureDescriptor.from_json(json.loads(path.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise UsageError(f"{path}: malformed descriptor: {e}") from None


def cmd_finetune(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / SEARCH_CKPT
    desc_path = Path(args.descriptor) if args.descriptor else out / DESCRIPTOR
    desc = _read_descriptor(desc_path)
    model = materialize(_load_ckpt(ckpt).model, desc)
    train_set, val_set = load_data(cfg)
    _check_data(cfg, train_set)
    ft = cfg.finetune
    teacher = None
    if ft.distill:
        teacher_path = Path(args.teacher) if args.teacher else out / DENSE_CKPT
        teacher = TeacherHandle.from_model(_load_ckpt(teacher_path).model, str(teacher_path))
    finetune(model, train_set, teacher, ft.lam_dist, ft.epochs, ft.lr, ft.batch_size,
             seed=cfg.seed, log=lambda s: print(f"finetune {s}", flush=True))
    save(model, out / FINETUNED_CKPT, freeze(model, desc.seed, desc.config_hash),
         provenance={"seed": cfg.seed, "teacher": teacher.identity if teacher else None})
    top1, top5 = evaluate(model, val_set)
    print(f"top1={top1:.6f} top5={top5:.6f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / FINETUNED_CKPT
    model = _load_ckpt(ckpt).model
    _, val_set = load_data(cfg)
    _check_data(cfg, val_set)
    top1, top5 = evaluate(model, val_set)
    print(f"top1={top1:.6f} top5={top5:.6f}")
    return EXIT_OK


def report_rows(desc: ArchitectureDescriptor, cfg) -> list[dict]:
    table = build_cost_table(cfg)
    rows = []
    for i, (b, costs, per_dim) in enumerate(zip(desc.blocks, table.blocks, table.ffn_per_dim)):
        flops = costs[b.umsa] + per_dim * b.ffn_kept
        rows.append({"block": i, "op": b.umsa, "ffn_kept": b.ffn_kept,
                     "alpha_prime": b.alpha_prime, "flops": flops, "share": flops / desc.flops})
    return rows


def cmd_report(cfg: RunConfig, args) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / SEARCH_CKPT
    ck = _load_ckpt(ckpt)
    desc = ck.descriptor if ck.descriptor is not None else freeze(ck.model)
    mcfg = ck.model.config
    dense = build_cost_table(mcfg).dense_total
    print(f"{'block':>5}  {'op':<6} {'ffn_kept':>8} {'alpha_prime':>11} {'flops':>12} {'share':>7}")
    for r in report_rows(desc, mcfg):
        print(f"{r['block']:>5}  {r['op']:<6} {r['ffn_kept']:>8} {r['alpha_prime']:>11.4f} "
              f"{r['flops']:>12} {r['share']:>7.2%}")
    print(f"total flops={desc.flops} params={desc.params} dense={dense} "
          f"fraction={desc.flops / dense:.4f}")
    print(desc.dumps())
    return EXIT_OK


def cmd_verify(cfg: RunConfig, args) -> int:
    results = run_suites(args.suite or None, seed=cfg.seed)
    for r in results:
        print(f"{r.name:<14} {'PASS' if r.passed else 'FAIL'}  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {
    "search": cmd_search,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "report": cmd_report,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spvit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="RunConfig JSON file", required=name in ("search", "finetune"))
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. search.lambda_comp=10")
        s.add_argument("--seed", type=int, help="run seed (model init, search sampling, shuffling)")
        s.add_argument("--out", help="output directory (overrides out_dir)")
        if name in ("finetune", "eval", "report"):
            s.add_argument("--checkpoint", help="checkpoint to read")
        if name == "finetune":
            s.add_argument("--descriptor", help="descriptor JSON (default: <out>/descriptor.json)")
            s.add_argument("--teacher", help="teacher checkpoint (default: <out>/dense.spvt)")
        if name == "verify":
            s.add_argument("--suite", action="append", choices=list(SUITES),
                           help="run only this suite (repeatable)")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.search.seed = args.seed
        if args.out:
            cfg.out_dir = args.out
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, FormatError, IntegrityError) as e:
        print(f"spvit {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

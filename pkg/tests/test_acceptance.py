"""Acceptance criteria 1-10, one PASS/FAIL line each (see the summary section).

Criteria 7-9 share one toy run: a dense model pretrained once, then for each
of three seeds a search followed by fine-tuning with and without the dense
teacher. Set ``SPVIT_ACCEPTANCE_DIR`` to keep the checkpoints of that run.
"""
import os
import statistics
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from spvit.config import load_config
from spvit.cost import DEIT, build_cost_table
from spvit.data import generate_synthetic
from spvit.model import build_model
from spvit.pipeline import (
    FormatError,
    TeacherHandle,
    evaluate,
    finetune,
    load,
    materialize,
    save,
    train,
)
from spvit.search import run_search
from spvit.verify import (
    PUBLISHED_FFN_BASE,
    PUBLISHED_GMACS,
    suite_equivalence,
    suite_gate_algebra,
    suite_gradients,
    suite_materialization,
    suite_rank,
    table_matches_reference,
)

TOY = Path(__file__).resolve().parents[1] / "configs" / "toy.json"
SEEDS = (0, 1, 2)
pytestmark = pytest.mark.filterwarnings("ignore:all hidden dimensions pruned")


def timed(fn, *args, **kwargs):
    t = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t


def test_criterion_01_cost_model(criterion):
    t = time.perf_counter()
    parts, ok = [], True
    for name, (ref, tol) in PUBLISHED_GMACS.items():
        table = build_cost_table(DEIT[name])
        ok &= not table_matches_reference(table, DEIT[name])
        err = table.dense_total / 1e9 / ref - 1
        ok &= abs(err) <= tol
        parts.append(f"{name} {table.dense_total / 1e9:.3f}G ({err:+.1%})")
    ref, tol = PUBLISHED_FFN_BASE
    ffn = build_cost_table(DEIT["deit_base"]).ffn_total / 1e9
    ok &= abs(ffn / ref - 1) <= tol
    parts.append(f"deit_base ffn {ffn:.3f}G ({ffn / ref - 1:+.1%})")
    secs = time.perf_counter() - t
    ok &= secs < 1.0
    assert criterion(1, ok, ", ".join(parts) + f"; {secs:.3f}s")


@pytest.mark.parametrize("n, suite, budget", [
    (2, lambda: suite_equivalence(cases=100), 30.0),
    (3, lambda: suite_materialization(batches=20), 30.0),
    (4, suite_gate_algebra, None),
    (5, lambda: suite_gradients(instances=20, composed=20), 120.0),
    (6, lambda: suite_rank(cases=20), None),
], ids=["02_equivalence", "03_materialization", "04_gate_algebra", "05_gradients", "06_rank"])
def test_property_criteria(criterion, n, suite, budget):
    r, secs = timed(suite)
    ok = r.passed and (budget is None or secs < budget)
    assert criterion(n, ok, f"{r.detail}; {secs:.1f}s")


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    cfg = load_config(TOY)
    out = Path(os.environ.get("SPVIT_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("acceptance"))
    out.mkdir(parents=True, exist_ok=True)
    task = cfg.data.synthetic
    train_set, val_set = generate_synthetic(task, "train"), generate_synthetic(task, "val")

    dense = build_model(cfg.model, np.random.default_rng(cfg.seed), cfg.search.theta_init)
    _, pre_secs = timed(train, dense, train_set, cfg.pretrain.epochs, cfg.pretrain.lr,
                        cfg.pretrain.batch_size, seed=cfg.seed, mode="dense")
    save(dense, out / "dense.spvt")
    teacher = TeacherHandle.from_model(load(out / "dense.spvt").model, "dense")
    runs = {}
    for seed in SEEDS:
        model = load(out / "dense.spvt").model
        res, search_secs = timed(run_search, model, train_set, replace(cfg.search, seed=seed))
        save(model, out / f"search_{seed}.spvt", res.descriptor)
        top1, ft_secs = {}, 0.0
        for distill in (True, False):
            student = materialize(load(out / f"search_{seed}.spvt").model, res.descriptor)
            ft = cfg.finetune
            _, secs = timed(finetune, student, train_set, teacher if distill else None,
                            ft.lam_dist, ft.epochs, ft.lr, ft.batch_size, seed=seed)
            ft_secs += secs
            top1[distill] = evaluate(student, val_set)[0]
        runs[seed] = dict(result=res, search_secs=search_secs, finetune_secs=ft_secs,
                          top1=top1)
    return dict(cfg=cfg, out=out, train=train_set, dense_top1=evaluate(dense, val_set, mode="dense")[0],
                pretrain_secs=pre_secs, runs=runs, table=build_cost_table(cfg.model))


def test_criterion_07_search_steers_flops(toy, criterion):
    cfg, table = toy["cfg"], toy["table"]
    run = toy["runs"][0]
    desc = run["result"].descriptor
    target = cfg.search.target(table)
    rel = desc.flops / target - 1
    again = run_search(load(toy["out"] / "dense.spvt").model, toy["train"],
                       replace(cfg.search, seed=0)).descriptor
    same = again.dumps() == desc.dumps()
    secs = run["search_secs"]
    ok = abs(rel) <= 0.10 and run["result"].epochs <= 15 and same and secs <= 20 * 60
    assert criterion(7, ok, f"frozen {desc.flops / table.dense_total:.4f} of dense "
                            f"({rel:+.1%} vs target) after {run['result'].epochs} epochs, "
                            f"rerun identical={same}, search {secs:.0f}s "
                            f"(+{toy['pretrain_secs']:.0f}s pretrain)")


def test_criterion_08_locality_preference(toy, criterion):
    ops = [[b.umsa for b in toy["runs"][s]["result"].descriptor.blocks] for s in SEEDS]
    shallow = statistics.median(o[0] == "msa" for o in ops)
    deep = statistics.median(o[-1] == "msa" for o in ops)
    ok = deep > shallow
    assert criterion(8, ok, f"median msa retained: deepest {deep:.0f}, shallowest {shallow:.0f}; "
                            f"ops per seed {ops}")


def test_criterion_09_distillation_benefit(toy, criterion):
    runs = toy["runs"]
    gains = [runs[s]["top1"][True] - runs[s]["top1"][False] for s in SEEDS]
    with_t = statistics.median(runs[s]["top1"][True] for s in SEEDS)
    dense = toy["dense_top1"]
    secs = sum(runs[s]["finetune_secs"] for s in SEEDS)
    ok = statistics.median(gains) >= 0 and with_t >= dense - 0.05 and secs <= 30 * 60
    detail = ", ".join(f"seed {s}: {runs[s]['top1'][True]:.4f} vs {runs[s]['top1'][False]:.4f}"
                       for s in SEEDS)
    assert criterion(9, ok, f"distill vs plain top1 {detail}; median distilled {with_t:.4f}, "
                            f"dense {dense:.4f}; fine-tuning {secs:.0f}s")


def test_criterion_10_serialization(toy, criterion, tmp_path):
    val = generate_synthetic(toy["cfg"].data.synthetic, "val")
    src = toy["out"] / "search_0.spvt"
    ck = load(src)
    model = materialize(ck.model, ck.descriptor)
    save(model, tmp_path / "a.spvt", ck.descriptor)
    before = evaluate(model, val)
    after = evaluate(load(tmp_path / "a.spvt").model, val)
    raw = (tmp_path / "a.spvt").read_bytes()
    rejected = 0
    cuts = [0, 3, 8, 20, len(raw) // 2, len(raw) - 1]
    for i, bad in enumerate([b"NOPE" + raw[4:], raw + b"\0", *(raw[:c] for c in cuts)]):
        (tmp_path / f"bad{i}.spvt").write_bytes(bad)
        try:
            load(tmp_path / f"bad{i}.spvt")
        except FormatError:
            rejected += 1
    total = 2 + len(cuts)
    ok = before == after and rejected == total
    assert criterion(10, ok, f"metrics {before} -> {after}, {rejected}/{total} corruptions rejected")

import json
import re

import pytest

from spvit.cli import main

TINY = {
    "model": {"image_size": 8, "patch_size": 2, "in_chans": 3, "n_blocks": 2,
              "embed_dim": 8, "n_heads": 2, "mlp_ratio": 2, "n_classes": 8},
    "data": {"synthetic": {"n_train": 64, "n_val": 32, "image_size": 8, "patch_size": 2,
                           "sign_cell": 1, "noise": 0.5}},
    "pretrain": {"epochs": 1, "lr": 0.003},
    "search": {"epochs": 2, "lambda_comp": 50.0, "lr_gates": 0.3, "target_fraction": 0.6},
    "finetune": {"epochs": 1, "lr": 0.001},
}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps({**TINY, "out_dir": str(root / "out")}))
    assert main(["search", "--config", str(cfg)]) == 0
    return cfg, root / "out"


def test_search_writes_artifacts(run_dir):
    _, out = run_dir
    for name in ("dense.spvt", "search.spvt", "descriptor.json", "search.csv"):
        assert (out / name).exists(), name
    assert (out / "search.csv").read_text().startswith("epoch,loss,ce,comp")
    desc = json.loads((out / "descriptor.json").read_text())
    assert len(desc["blocks"]) == 2 and desc["provenance"]["seed"] == 0


def test_report_fraction_matches_descriptor(run_dir, capsys):
    cfg, out = run_dir
    assert main(["report", "--config", str(cfg)]) == 0
    text = capsys.readouterr().out
    m = re.search(r"total flops=(\d+) params=(\d+) dense=(\d+) fraction=([\d.]+)", text)
    flops, _, dense, frac = int(m[1]), int(m[2]), int(m[3]), float(m[4])
    desc = json.loads((out / "descriptor.json").read_text())
    assert flops == desc["totals"]["flops"]
    assert frac == pytest.approx(flops / dense, abs=1e-4)
    assert text.count("\n") >= 4


def test_dense_checkpoint_reports_full_cost(run_dir, capsys):
    cfg, out = run_dir
    assert main(["report", "--config", str(cfg), "--checkpoint", str(out / "dense.spvt")]) == 0
    text = capsys.readouterr().out
    assert "fraction=1.0000" in text
    assert text.count(" msa ") == 2


def test_finetune_then_eval(run_dir, capsys):
    cfg, out = run_dir
    assert main(["finetune", "--config", str(cfg)]) == 0
    first = capsys.readouterr().out.strip().splitlines()[-1]
    assert re.fullmatch(r"top1=\d\.\d{6} top5=\d\.\d{6}", first)
    assert main(["eval", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out.strip() == first


def test_finetune_without_distillation(run_dir, capsys):
    cfg, out = run_dir
    assert main(["finetune", "--config", str(cfg), "--set", "finetune.distill=false",
                 "--teacher", "/nonexistent"]) == 0
    assert "top1=" in capsys.readouterr().out


@pytest.mark.parametrize("argv, message", [
    (["search", "--config", "/nonexistent.json"], "not found"),
    (["search", "--config", "{cfg}", "--set", "search.bogus=1"], "unknown keys"),
    (["search", "--config", "{cfg}", "--set", "novalue"], "key=value"),
    (["eval", "--config", "{cfg}", "--checkpoint", "/nonexistent.spvt"], "not found"),
    (["finetune", "--config", "{cfg}", "--descriptor", "/nonexistent.json"], "not found"),
    (["search", "--config", "{cfg}", "--set", "model.n_classes=5"], "classes"),
    (["search", "--config", "{cfg}", "--set", "data.source=raw"], "raw_dir"),
])
def test_usage_errors_exit_2(run_dir, capsys, argv, message):
    cfg, _ = run_dir
    assert main([a.format(cfg=cfg) for a in argv]) == 2
    assert message in capsys.readouterr().err


def test_corrupt_checkpoint_exits_2(run_dir, tmp_path, capsys):
    cfg, out = run_dir
    bad = tmp_path / "bad.spvt"
    bad.write_bytes((out / "search.spvt").read_bytes()[:100])
    assert main(["report", "--config", str(cfg), "--checkpoint", str(bad)]) == 2
    assert "truncated" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["verify", "--suite", "nope"], ["search"]])
def test_bad_invocations_exit_2(argv):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 2


def test_verify_single_suite(capsys):
    assert main(["verify", "--suite", "gate_algebra", "--suite", "cost"]) == 0
    out = capsys.readouterr().out
    assert "gate_algebra" in out and "2/2 suites passed" in out

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spvit.cost import build_cost_table
from spvit.data import SyntheticTask, generate_synthetic
from spvit.model import ModelConfig, build_model
from spvit.search import (
    ArchitectureDescriptor,
    BlockChoice,
    SearchConfig,
    SearchDivergedError,
    descriptors_match,
    freeze,
    make_optimizer,
    run_search,
    search_loss,
    search_step,
)

CFG = ModelConfig(image_size=8, patch_size=2, in_chans=3, n_blocks=2, embed_dim=8,
                  n_heads=2, mlp_ratio=2, n_classes=8)
TASK = SyntheticTask(n_train=64, n_val=32, image_size=8, patch_size=2, sign_cell=1)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(TASK, "train")


def fresh(seed=0):
    return build_model(CFG, np.random.default_rng(seed))


def test_strong_pressure_toward_zero_lowers_expected_flops(data):
    model = fresh()
    cfg = SearchConfig(lambda_comp=1e4, target_flops=0.0, lr_gates=0.05, batch_size=16)
    table = build_cost_table(CFG)
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng(0)
    batch = (data.images[:16], data.labels[:16])
    flops = [search_step(model, batch, cfg, rng, opt, table).flops for _ in range(40)]
    assert all(b < a for a, b in zip(flops, flops[1:]))
    assert freeze(model).flops < 0.8 * table.dense_total


def test_target_at_dense_keeps_dense_architecture(data):
    model = fresh()
    r = run_search(model, data, SearchConfig(target_fraction=1.0, lambda_comp=10.0, epochs=2,
                                             lr_gates=0.05, batch_size=16))
    d = r.descriptor
    assert [b.umsa for b in d.blocks] == ["msa"] * CFG.n_blocks
    assert all(b.ffn_kept == CFG.hidden for b in d.blocks)
    assert d.flops == build_cost_table(CFG).dense_total


def test_same_seed_same_descriptor(data):
    cfg = SearchConfig(lambda_comp=50.0, target_fraction=0.5, lr_gates=0.2, epochs=3,
                       batch_size=16, seed=4)
    a = run_search(fresh(1), data, cfg)
    b = run_search(fresh(1), data, cfg)
    assert a.descriptor.key() == b.descriptor.key()
    assert a.descriptor.dumps() == b.descriptor.dumps()
    assert a.history == b.history


def test_search_logs_csv(data):
    lines = []
    r = run_search(fresh(), data, SearchConfig(epochs=2, min_epochs=5, batch_size=32),
                   log=lines.append)
    assert lines[0].split(",")[0] == "epoch"
    assert len(lines) == 1 + r.epochs == 3
    assert not r.converged and not r.descriptor.converged


def test_nonfinite_loss_raises(data):
    model = fresh()
    model.head_w.value[0, 0] = np.nan
    cfg = SearchConfig(batch_size=16)
    with pytest.raises(SearchDivergedError, match="gate logits"):
        search_step(model, (data.images[:16], data.labels[:16]), cfg, np.random.default_rng(0),
                    make_optimizer(model, cfg), build_cost_table(CFG))


def test_config_validation_and_digest():
    with pytest.raises(ValueError):
        SearchConfig(lambda_comp=-1)
    with pytest.raises(ValueError):
        SearchConfig(target_fraction=0.0)
    assert SearchConfig().digest() == SearchConfig().digest()
    assert SearchConfig(seed=1).digest() != SearchConfig().digest()
    table = build_cost_table(CFG)
    assert SearchConfig(target_flops=123.0).target(table) == 123.0
    assert SearchConfig(target_fraction=None).target(table) == table.dense_total


def test_gate_and_weight_groups_use_their_own_rates():
    model = fresh()
    opt = make_optimizer(model, SearchConfig(lr_gates=0.3, lr_weights=0.01))
    gates, weights = opt.groups
    assert gates["lr"] == 0.3 and weights["lr"] == 0.01
    assert len(gates["params"]) == 2 * CFG.n_blocks


ops = st.sampled_from(["skip", "conv1", "conv3", "msa"])
block_choices = st.builds(
    lambda op, dims: BlockChoice(op, sorted(dims), len(dims) / 8),
    ops, st.sets(st.integers(0, 15), max_size=16),
)


@given(st.lists(block_choices, min_size=1, max_size=4), st.integers(0, 10**9),
       st.integers(0, 10**7), st.one_of(st.none(), st.integers(0, 100)))
def test_descriptor_json_round_trip(blocks, flops, params, seed):
    d = ArchitectureDescriptor(blocks, flops, params, seed, "abc123")
    back = ArchitectureDescriptor.from_json(json.loads(d.dumps()))
    assert back == d and back.key() == d.key()


def test_descriptor_rejects_inconsistent_counts():
    doc = json.loads(ArchitectureDescriptor([BlockChoice("msa", [0, 1], 0.25)], 1, 1).dumps())
    doc["blocks"][0]["ffn_kept"] = 3
    with pytest.raises(ValueError):
        ArchitectureDescriptor.from_json(doc)


@given(st.lists(block_choices, min_size=1, max_size=3), st.sets(st.integers(0, 15)))
def test_descriptors_match_slack(blocks, flip):
    a = ArchitectureDescriptor(blocks, 0, 0)
    moved = [BlockChoice(b.umsa, sorted(set(b.ffn_dims) ^ flip), 0.0) for b in blocks]
    b = ArchitectureDescriptor(moved, 0, 0)
    assert descriptors_match(a, a, 16)
    assert descriptors_match(a, b, 16, ffn_slack=len(flip) / 16)
    assert descriptors_match(a, b, 16, 0.0) == (not flip)
    other = [BlockChoice("skip" if x.umsa != "skip" else "msa", x.ffn_dims, 0.0) for x in blocks]
    assert not descriptors_match(a, ArchitectureDescriptor(other, 0, 0), 16, 1.0)


def test_freeze_reads_thresholds():
    model = fresh()
    model.blocks[0].attn.theta.value[...] = [0.3, -1.0, -0.2]
    model.blocks[1].attn.theta.value[...] = [-1.0, -1.0, -1.0]
    model.blocks[0].ffn.theta.value[...] = -1.0
    model.blocks[0].ffn.theta.value[[2, 5]] = 0.0
    d = freeze(model, seed=3, config_hash="h")
    assert [b.umsa for b in d.blocks] == ["conv1", "skip"]
    assert d.blocks[0].ffn_dims == [2, 5] and d.blocks[0].alpha_prime == 2 / 8
    assert d.blocks[1].ffn_kept == CFG.hidden
    assert (d.seed, d.config_hash) == (3, "h")



def fresh_with_closed():
    model = fresh()
    model.blocks[0].ffn.theta.value[:5] = -0.1
    return model


def test_frozen_cost_mode_shares_gradient_direction(data):
    table = build_cost_table(CFG)
    batch = data.images[:8], data.labels[:8]
    grads, comps = [], []
    for mode in ("expected", "frozen"):
        model = fresh_with_closed()
        cfg = SearchConfig(comp_flops=mode, target_fraction=0.5, lambda_comp=10.0)
        loss, _, comp, _ = search_loss(model, *batch, cfg, table, np.random.default_rng(0))
        loss.backward()
        grads.append(model.blocks[0].ffn.theta.grad.copy())
        comps.append(float(comp.value))
    gap = (freeze(fresh_with_closed()).flops - 0.5 * table.dense_total) / table.dense_total
    assert comps[1] == pytest.approx(gap ** 2)
    assert comps[0] != pytest.approx(comps[1])
    assert np.all(np.sign(grads[0]) == np.sign(grads[1]))
    with pytest.raises(ValueError):
        SearchConfig(comp_flops="sampled")

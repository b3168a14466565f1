import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import reference
from spvit.model import (
    ModelConfig,
    build_model,
    count_params,
    forward,
    patchify,
    sample_model_gates,
)
from spvit.numerics import Var
from spvit.pipeline import materialize
from spvit.search import freeze
from spvit.umsa import ConfigurationError
from spvit.verify import SMALL, randomize_model

seeds = st.integers(0, 2**31 - 1)


def random_images(cfg, n, seed=0):
    return np.random.default_rng(seed).standard_normal((n, cfg.image_size, cfg.image_size, cfg.in_chans))


@settings(max_examples=8, deadline=None)
@given(st.booleans(), st.booleans(), seeds)
def test_dense_forward_matches_numpy_reference(pre_norm, class_token, seed):
    cfg = ModelConfig(image_size=8, patch_size=2, in_chans=2, n_blocks=2, embed_dim=8,
                      n_heads=2, mlp_ratio=2, n_classes=3, pre_norm=pre_norm,
                      class_token=class_token)
    model = build_model(cfg, np.random.default_rng(seed))
    randomize_model(model, np.random.default_rng(seed + 1))
    x = random_images(cfg, 3, seed)
    got = forward(model, x, mode="dense").value
    np.testing.assert_allclose(got, reference.dense_vit(model, x), atol=1e-10)


def test_fresh_model_frozen_equals_dense():
    # theta starts at +1.5: every gate is open, so freezing keeps MSA and all dims
    model = build_model(SMALL, np.random.default_rng(0))
    x = random_images(SMALL, 2)
    np.testing.assert_allclose(forward(model, x, mode="frozen").value,
                               forward(model, x, mode="dense").value, atol=1e-12)


def test_search_mode_with_all_msa_and_all_dims_equals_dense():
    model = build_model(SMALL, np.random.default_rng(1))
    randomize_model(model, np.random.default_rng(2))
    for blk in model.blocks:
        blk.attn.theta.value[...] = 50.0
        blk.ffn.theta.value[...] = 50.0
    x = random_images(SMALL, 2)
    gates = sample_model_gates(model, np.random.default_rng(0))
    np.testing.assert_allclose(forward(model, x, gates, "search").value,
                               forward(model, x, mode="dense").value, atol=1e-12)


def test_search_mode_requires_gates():
    model = build_model(SMALL, np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward(model, random_images(SMALL, 1), None, "search")
    with pytest.raises(ValueError):
        forward(model, random_images(SMALL, 1), mode="bogus")


def test_image_shape_checked():
    model = build_model(SMALL, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        forward(model, np.zeros((1, 6, 6, 3)), mode="dense")


def test_patchify_row_major():
    img = np.arange(4 * 4 * 1, dtype=float).reshape(1, 4, 4, 1)
    p = patchify(img, 2)
    np.testing.assert_array_equal(p[0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(p[0, 1], [2, 3, 6, 7])
    np.testing.assert_array_equal(p[0, 2], [8, 9, 12, 13])


def test_toy_config_shapes():
    cfg = ModelConfig()
    assert cfg.grid == (8, 8) and cfg.n_tokens == 65 and cfg.hidden == 256
    assert cfg.head_dim == 16 and cfg.patch_dim == 48


def test_bad_config_rejected():
    with pytest.raises(ConfigurationError):
        ModelConfig(image_size=30, patch_size=4)
    with pytest.raises(ConfigurationError):
        ModelConfig(embed_dim=10, n_heads=4)


def expected_dense_params(cfg):
    c, h = cfg.embed_dim, cfg.hidden
    block = 4 * c * c + 4 * c + (c * h + h + h * c + c) + 4 * c
    fixed = cfg.patch_dim * c + c + cfg.n_tokens * c + c * cfg.n_classes + cfg.n_classes
    return cfg.n_blocks * block + fixed + (c if cfg.class_token else 0)


def test_dense_param_count_by_hand():
    cfg = ModelConfig()
    model = build_model(cfg, np.random.default_rng(0))
    assert count_params(model) == expected_dense_params(cfg) == 207_816


@settings(max_examples=10, deadline=None)
@given(seeds)
def test_param_count_matches_materialized_tensors(seed):
    rng = np.random.default_rng(seed)
    model = build_model(SMALL, rng)
    for blk in model.blocks:
        blk.attn.theta.value[...] = rng.standard_normal(3) * 2
        blk.ffn.theta.value[...] = rng.standard_normal(blk.ffn.hidden)
    desc = freeze(model)
    pruned = materialize(model, desc)
    held = sum(v.value.size for v in pruned.weights().values())
    assert count_params(model, desc) == held == count_params(pruned) == desc.params


def test_gate_logits_separate_from_weights():
    model = build_model(SMALL, np.random.default_rng(0))
    gates = model.gate_logits()
    assert len(gates) == 2 * SMALL.n_blocks
    ids = {id(v) for v in model.weights().values()}
    assert not ids & {id(v) for v in gates.values()}
    assert all(isinstance(v, Var) for v in gates.values())

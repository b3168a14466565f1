"""Oracle suites behind ``spvit verify``; the test-suite reuses the checkers."""
from __future__ import annotations

import itertools
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .cost import CostTable, build_cost_table, complexity_loss, expected_flops
from .model import BlockGates, ModelConfig, build_model, forward
from .numerics import Var
from .umsa import (
    GateState,
    UmsaParams,
    _project,
    attention_forward,
    bconv_forward,
    border_bias,
    cumulative_gates,
    cumulative_gates_var,
    deterministic_gates,
    head_ensemble,
    local_aggregate,
    profile_kernel,
)

# ---------------------------------------------------------------------------
# finite differences


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6,
                 index: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x`` (mutated in place, restored).

    With ``index`` only those entries are perturbed; the rest of the result is 0.
    """
    g = np.zeros_like(x)
    entries = index if index is not None else list(np.ndindex(x.shape))
    for i in entries:
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|)`` in the 2-norm (0 when both vanish)."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale < 1e-12 else float(np.linalg.norm(a - b) / scale)


def check_grad(fn: Callable[..., Var], arrays: Sequence[np.ndarray], eps: float = 1e-6,
               seed: int = 0) -> float:
    """Relative error between backprop and finite differences.

    ``fn`` maps leaf Vars to a Var; the scalar checked is ``sum(fn(...) * w)``
    for a fixed random ``w`` so every output element matters. The error is
    taken over all inputs' gradients at once, so a structurally zero slice
    (a key bias under softmax, say) is judged against the whole gradient.
    """
    leaves = [Var(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    w = np.random.default_rng(seed).standard_normal(out.shape)
    (out * w).sum().backward()
    analytic = np.concatenate([v.grad.ravel() for v in leaves])

    def scalar():
        with nx.no_grad():
            return float((fn(*leaves).value * w).sum())

    numeric = np.concatenate([numeric_grad(scalar, v.value, eps).ravel() for v in leaves])
    return rel_err(analytic, numeric)


# ---------------------------------------------------------------------------
# suites


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def random_umsa(rng, c_in: int, n_h: int, kernels=(1, 3), bias: bool = True) -> UmsaParams:
    p = UmsaParams.init(c_in, n_h, rng, kernels)
    for v in p.weights().values():
        v.value[...] = rng.standard_normal(v.shape) * (0.3 if bias else 1.0)
    if not bias:
        for name in ("b_qry", "b_key", "b_val", "b_o"):
            getattr(p, name).value[...] = 0.0
    return p


def equivalence_case(rng, n_h: int, c_in: int, grid: int, k: int, batch: int = 2) -> float:
    """Max |local_aggregate(V) - (conv2d(X, profiled W) + border bias)|."""
    p = random_umsa(rng, c_in, n_h, (k,))
    X = Var(rng.standard_normal((batch, grid * grid, c_in)))
    with nx.no_grad():
        V = _project(X, p.W_val, p.b_val).reshape((batch, grid, grid, n_h, c_in // n_h))
        via_v = local_aggregate(V, head_ensemble(p.z[k])).value
        prof = profile_kernel(p, k)
        Xs = X.reshape((batch, grid, grid, c_in))
        via_conv = (nx.conv2d(Xs, prof.W) + border_bias(prof.bias_taps, (grid, grid))).value
    return float(np.abs(via_v - via_conv).max())


def suite_equivalence(seed: int = 0, cases: int = 100) -> SuiteResult:
    rng = np.random.default_rng(seed)
    grid_pts = list(itertools.product((2, 4, 8), (16, 32, 64), (1, 3)))
    worst = 0.0
    for i in range(cases):
        n_h, c_in, k = grid_pts[i % len(grid_pts)]
        worst = max(worst, equivalence_case(rng, n_h, c_in, int(rng.integers(4, 11)), k))
    return SuiteResult("equivalence", worst <= 1e-10, f"{cases} cases, max abs diff {worst:.2e}")


SMALL = ModelConfig(image_size=8, patch_size=2, in_chans=3, n_blocks=3, embed_dim=16,
                    n_heads=2, kernels=(1, 3), mlp_ratio=2, n_classes=4)


def randomize_model(model, rng, scale: float = 0.3) -> None:
    """Replace every weight with O(scale) noise and give batch norms non-trivial running stats."""
    for name, v in model.weights().items():
        if name.endswith(("gamma", "ln1.gamma", "ln2.gamma")):
            v.value[...] = 1.0 + 0.1 * rng.standard_normal(v.shape)
        else:
            v.value[...] = scale * rng.standard_normal(v.shape)
    for blk in model.blocks:
        if isinstance(blk.attn, UmsaParams):
            for st in blk.attn.bn_state.values():
                st.running_mean[...] = 0.1 * rng.standard_normal(st.running_mean.shape)
                st.running_var[...] = 0.5 + rng.random(st.running_var.shape)


def random_descriptor_logits(model, rng) -> None:
    """Random frozen architecture: each op (or skip) equally likely, random FFN subset."""
    for blk in model.blocks:
        n = blk.attn.theta.shape[0]
        choice = int(rng.integers(0, n + 1))  # n means skip
        theta = -np.abs(rng.standard_normal(n)) - 0.1
        if choice < n:
            theta[choice] = abs(rng.standard_normal()) + 0.1
            # gates above the choice stay closed; below may be open (they lose anyway)
            below = rng.random(choice) < 0.5
            theta[:choice][below] = 1.0
        blk.attn.theta.value[...] = theta
        blk.ffn.theta.value[...] = rng.standard_normal(blk.ffn.hidden)


def materialization_case(rng, train_mode: bool = False) -> float:
    from .pipeline import materialize
    from .search import freeze

    model = build_model(SMALL, rng)
    randomize_model(model, rng)
    random_descriptor_logits(model, rng)
    desc = freeze(model)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # empty FFN subsets are part of the sample space
        pruned = materialize(model, desc)
    images = rng.standard_normal((4, SMALL.image_size, SMALL.image_size, SMALL.in_chans))
    model.train(train_mode)
    pruned.train(train_mode)
    with nx.no_grad():
        a = forward(model, images, mode="frozen").value
        b = forward(pruned, images, mode="frozen").value
    return float(np.abs(a - b).max())


def suite_materialization(seed: int = 0, batches: int = 20) -> SuiteResult:
    rng = np.random.default_rng(seed + 1)
    worst = max(materialization_case(rng) for _ in range(batches))
    return SuiteResult("materialize", worst <= 1e-10, f"{batches} batches, max abs diff {worst:.2e}")


def max_index_rule(g) -> np.ndarray:
    out = np.zeros(len(g))
    open_ = [i for i, v in enumerate(g) if v]
    if open_:
        out[max(open_)] = 1.0
    return out


def suite_gate_algebra(seed: int = 0) -> SuiteResult:
    checked = 0
    for n in (2, 3, 4):
        for g in itertools.product((0.0, 1.0), repeat=n):
            gh = cumulative_gates(g)
            gv = cumulative_gates_var(Var(np.array(g))).value
            if not (np.array_equal(gh, max_index_rule(g)) and np.array_equal(gv, gh)):
                return SuiteResult("gate_algebra", False, f"mismatch at g={g}: {gh}")
            checked += 1
    rng = np.random.default_rng(seed)
    for _ in range(500):
        st = deterministic_gates(rng.standard_normal(int(rng.integers(2, 5))) * 3)
        if st.g_hat.sum() > 1:
            return SuiteResult("gate_algebra", False, f"frozen gates select {st.g_hat}")
    return SuiteResult("gate_algebra", True, f"{checked} binary vectors exhaustive, 500 frozen draws")


# --- gradients -------------------------------------------------------------

def _op_cases(rng) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One random instance per differentiable op (shapes drawn from ``rng``)."""
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    a, b = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    c = int(rng.integers(2, 5))
    labels = rng.integers(0, c, size=a)
    bn_state = nx.BatchNormState(c)
    k = int(rng.choice([1, 3]))
    n_h, c_h = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    grid = int(rng.integers(2, 4))
    umsa = random_umsa(rng, n_h * c_h, n_h, (k,))
    names = ("W_qry", "W_key", "W_val", "W_o", "b_qry", "b_key", "b_val", "b_o")

    def bconv(X, W_val, b_val, W_o, b_o, z, gamma, beta):
        p = UmsaParams(umsa.W_qry, umsa.W_key, W_val, W_o, umsa.b_qry, umsa.b_key, b_val, b_o,
                       {k: z}, umsa.theta, {k: gamma}, {k: beta},
                       {k: nx.BatchNormState(c_h)}, (k,))
        return bconv_forward(X, p, k, "search", (grid, grid), training=True)

    def attn(X, *ws):
        return attention_forward(X, type("P", (), dict(zip(names, ws)))())[0]

    pos = np.abs(r(a, b)) + 0.5
    return {
        "add": (lambda x, y: x + y, [r(a, b), r(b)]),
        "mul": (lambda x, y: x * y, [r(a, b), r(a, 1)]),
        "reciprocal": (nx.reciprocal, [pos]),
        "exp": (nx.exp, [r(a, b)]),
        "log": (nx.log, [pos]),
        "square": (nx.square, [r(a, b)]),
        "relu": (nx.relu, [np.where(np.abs(x := r(a, b)) < 0.05, 0.5, x)]),
        "sigmoid": (nx.sigmoid, [3 * r(a, b)]),
        "gelu": (nx.gelu, [2 * r(a, b)]),
        "reshape": (lambda x: nx.reshape(x, (b, a)), [r(a, b)]),
        "transpose": (lambda x: nx.transpose(x, (1, 0, 2)), [r(a, b, c)]),
        "getitem": (lambda x: x[:, [0, 0, -1]], [r(a, b)]),
        "concat": (lambda x, y: nx.concat([x, y], axis=1), [r(a, b), r(a, c)]),
        "sum": (lambda x: nx.sum_(x, axis=1), [r(a, b, c)]),
        "mean": (lambda x: nx.mean(x, axis=(0, 2)), [r(a, b, c)]),
        "matmul": (nx.matmul, [r(a, b), r(b, c)]),
        "matmul_batched": (nx.matmul, [r(2, a, b), r(b, c)]),
        "linear": (nx.linear, [r(2, a, b), r(b, c), r(c)]),
        "softmax": (lambda x: nx.softmax(x, axis=-1), [r(a, b)]),
        "log_softmax": (lambda x: nx.log_softmax(x, axis=-1), [r(a, b)]),
        "cross_entropy": (lambda x: nx.cross_entropy(x, labels), [r(a, c)]),
        "layernorm": (nx.layernorm, [r(a, b, c), 1 + r(c) * 0.1, r(c)]),
        "batchnorm": (lambda x, g_, b_: nx.batchnorm(x, g_, b_, bn_state, True),
                      [r(a + 2, 2, c), 1 + r(c) * 0.1, r(c)]),
        "conv2d": (nx.conv2d, [r(2, grid + 1, grid + 2, b), r(k, k, b, c)]),
        "local_aggregate": (local_aggregate, [r(2, grid, grid + 1, n_h, c_h), r(n_h, k, k)]),
        "head_ensemble": (head_ensemble, [r(n_h + 1, k, k)]),
        "attention": (attn, [r(2, grid * grid + 1, n_h * c_h)]
                      + [umsa.weights()[n].value.copy() for n in names]),
        "bconv": (bconv, [r(2, grid * grid + 1, n_h * c_h), umsa.W_val.value.copy(),
                          umsa.b_val.value.copy(), umsa.W_o.value.copy(), umsa.b_o.value.copy(),
                          r(n_h, k, k), 1 + r(c_h) * 0.1, r(c_h)]),
        "cumulative_gates": (cumulative_gates_var, [rng.random(int(rng.integers(2, 5)))]),
    }


OP_NAMES = tuple(_op_cases(np.random.default_rng(0)))


def op_gradient_errors(seed: int = 0, instances: int = 20) -> dict[str, float]:
    """Worst finite-difference relative error per op over ``instances`` random draws."""
    worst = {n: 0.0 for n in OP_NAMES}
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        for name, (fn, arrays) in _op_cases(rng).items():
            worst[name] = max(worst[name], check_grad(fn, arrays, seed=i))
    return worst


TINY = ModelConfig(image_size=6, patch_size=2, in_chans=2, n_blocks=2, embed_dim=4,
                   n_heads=2, kernels=(1, 3), mlp_ratio=2, n_classes=3)


def ste_case(rng, lam: float = 2.0, sample: str = "open") -> float:
    """Composed search loss: analytic theta-gradient vs the straight-through reference.

    Reference: sigmoid'(theta) * d(CE)/d(g) by finite differences on a relaxed
    gate, plus d(lam * comp)/d(theta) by finite differences on theta.
    """
    model = build_model(TINY, rng, theta_init=0.0)
    randomize_model(model, rng, scale=0.5)
    for blk in model.blocks:
        blk.attn.theta.value[...] = rng.standard_normal(blk.attn.theta.shape)
        blk.ffn.theta.value[...] = rng.standard_normal(blk.ffn.hidden)
    images = rng.standard_normal((3, TINY.image_size, TINY.image_size, TINY.in_chans))
    labels = rng.integers(0, TINY.n_classes, size=3)
    table = build_cost_table(TINY)
    target = 0.5 * table.dense_total

    def draw(shape):
        if sample == "open":
            return np.ones(shape)
        return (rng.random(shape) < 0.5).astype(float)

    g_u = [draw(b.attn.theta.shape) for b in model.blocks]
    g_f = [draw((b.ffn.hidden,)) for b in model.blocks]

    def comp_term():
        umsa = [b.attn.theta for b in model.blocks]
        ffn = [b.ffn.theta for b in model.blocks]
        return lam * complexity_loss(expected_flops(table, umsa, ffn), target, table.dense_total)

    # analytic: straight-through gates
    gates = []
    for blk, gu, gf in zip(model.blocks, g_u, g_f):
        st = GateState(gu, cumulative_gates(gu), nx.sigmoid_np(blk.attn.theta.value),
                       g_var := nx.straight_through(blk.attn.theta, gu), cumulative_gates_var(g_var))
        gates.append(BlockGates(st, nx.straight_through(blk.ffn.theta, gf)))
    loss = nx.cross_entropy(forward(model, images, gates, "search"), labels) + comp_term()
    for v in model.gate_logits().values():
        v.zero_grad()
    loss.backward()
    analytic = np.concatenate([np.concatenate([b.attn.theta.grad, b.ffn.theta.grad])
                               for b in model.blocks])

    # reference: relaxed gates are plain arrays perturbed in place
    relaxed = [(gu.copy(), gf.copy()) for gu, gf in zip(g_u, g_f)]

    def ce():
        gs = []
        for gu, gf in relaxed:
            gv = Var(gu)
            gs.append(BlockGates(GateState(gu, cumulative_gates(gu), gu, gv,
                                           cumulative_gates_var(gv)), Var(gf)))
        with nx.no_grad():
            return float(nx.cross_entropy(forward(model, images, gs, "search"), labels).value)

    def comp():
        with nx.no_grad():
            return float(comp_term().value)

    ref = []
    for blk, (gu, gf) in zip(model.blocks, relaxed):
        for theta, g in ((blk.attn.theta, gu), (blk.ffn.theta, gf)):
            p = nx.sigmoid_np(theta.value)
            ref.append(p * (1 - p) * numeric_grad(ce, g) + numeric_grad(comp, theta.value))
    return rel_err(analytic, np.concatenate(ref))


def suite_gradients(seed: int = 0, instances: int = 20, composed: int = 20) -> SuiteResult:
    errs = op_gradient_errors(seed, instances)
    bad = {k: v for k, v in errs.items() if v > 1e-5}
    rng = np.random.default_rng(seed + 7)
    ste = max(ste_case(rng, sample="open" if i % 2 == 0 else "random") for i in range(composed))
    ok = not bad and ste <= 1e-4
    worst_op = max(errs, key=errs.get)
    detail = (f"{len(errs)} ops x {instances} instances, worst {worst_op} {errs[worst_op]:.1e}; "
              f"composed STE x {composed}: {ste:.1e}")
    if bad:
        detail += f"; failing {sorted(bad)}"
    return SuiteResult("gradients", ok, detail)


def bottleneck_preactivation(rng, c_in: int, n_h: int, k: int, grid: int) -> tuple[np.ndarray, int]:
    """Conv(X) @ W_o_bar flattened to ``[positions, c_in]`` and its rank bound ``c_h``."""
    p = random_umsa(rng, c_in, n_h, (k,))
    X = Var(rng.standard_normal((1, grid * grid, c_in)))
    with nx.no_grad():
        prof = profile_kernel(p, k)
        conv = nx.conv2d(X.reshape((1, grid, grid, c_in)), prof.W) + border_bias(prof.bias_taps,
                                                                                 (grid, grid))
        out = conv.value.reshape(-1, c_in // n_h) @ prof.W_o_bar.value
    return out, c_in // n_h


def full_width_preactivation(rng, c_in: int, n_h: int, k: int, grid: int) -> np.ndarray:
    """Oracle: a conv whose kernel is the per-head W_val W_o sum (no bottleneck)."""
    p = random_umsa(rng, c_in, n_h, (k,))
    sigma = head_ensemble(p.z[k]).value
    W = np.einsum("hab,chd,dhe->abce", sigma, p.W_val.value, p.W_o.value)
    X = rng.standard_normal((1, grid, grid, c_in))
    return nx.conv2d(Var(X), Var(W)).value.reshape(-1, c_in)


def relative_tail(m: np.ndarray, start: int) -> float:
    s = np.linalg.svd(m, compute_uv=False)
    return float(s[start:].max() / s[0]) if s.size > start else 0.0


def suite_rank(seed: int = 0, cases: int = 20) -> SuiteResult:
    rng = np.random.default_rng(seed + 3)
    worst = 0.0
    for i in range(cases):
        n_h = (2, 4, 8)[i % 3]
        out, c_h = bottleneck_preactivation(rng, 32, n_h, (1, 3)[i % 2], 8)
        worst = max(worst, relative_tail(out, c_h))
    return SuiteResult("rank", worst <= 1e-8, f"{cases} cases, worst tail {worst:.1e}")


# --- cost ------------------------------------------------------------------

def reference_mult_adds(cfg: ModelConfig) -> dict[str, int]:
    """Independent layer-by-layer count (each matmul as rows x inner x cols)."""
    n, n_sp, c = cfg.n_tokens, cfg.n_spatial, cfg.embed_dim
    c_h, hid = cfg.head_dim, cfg.hidden
    mm = lambda rows, inner, cols: rows * inner * cols  # noqa: E731
    qkv_o = 4 * mm(n, c, c)
    scores = cfg.n_heads * mm(n, c_h, n)
    weighted = cfg.n_heads * mm(n, n, c_h)
    msa = qkv_o + scores + weighted
    ffn = mm(n, c, hid) + mm(n, hid, c)
    convs = {f"conv{k}": mm(n_sp, k * k * c, c_h) + n_sp * c_h + mm(n_sp, c_h, c)
             for k in cfg.kernels}
    fixed = mm(n_sp, cfg.patch_dim, c) + mm(1, c, cfg.n_classes)
    return {"msa": msa, "ffn": ffn, **convs, "fixed": fixed,
            "total": cfg.n_blocks * (msa + ffn) + fixed, "ffn_total": cfg.n_blocks * ffn}


PUBLISHED_GMACS = {  # model: (total GMult-Adds, tolerance)
    "deit_tiny": (1.3, 0.03),
    "deit_small": (4.6, 0.03),
    "deit_base": (17.5, 0.03),
}
PUBLISHED_FFN_BASE = (11.1, 0.02)


def table_matches_reference(table: CostTable, cfg: ModelConfig) -> list[str]:
    ref = reference_mult_adds(cfg)
    errs = []
    if table.dense_total != ref["total"]:
        errs.append(f"total {table.dense_total} != {ref['total']}")
    if table.ffn_total != ref["ffn_total"]:
        errs.append(f"ffn {table.ffn_total} != {ref['ffn_total']}")
    for op in table.ops:
        if table.blocks[0][op] != ref[op]:
            errs.append(f"{op} {table.blocks[0][op]} != {ref[op]}")
    if table.fixed != ref["fixed"]:
        errs.append(f"fixed {table.fixed} != {ref['fixed']}")
    return errs


def suite_cost(seed: int = 0) -> SuiteResult:
    """Exact agreement with the independent count; published totals reported alongside."""
    from .cost import DEIT

    errs, notes = [], []
    for name, cfg in [("toy", ModelConfig()), *DEIT.items()]:
        table = build_cost_table(cfg)
        errs += [f"{name}: {e}" for e in table_matches_reference(table, cfg)]
        if name in PUBLISHED_GMACS:
            ref, _ = PUBLISHED_GMACS[name]
            notes.append(f"{name} {table.dense_total / 1e9:.3f}G ({table.dense_total / 1e9 / ref - 1:+.1%}"
                         f" vs {ref}G)")
    detail = "exact vs layer-by-layer count; " + ", ".join(notes)
    if errs:
        detail = "; ".join(errs)
    return SuiteResult("cost", not errs, detail)


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "equivalence": suite_equivalence,
    "materialize": suite_materialization,
    "gate_algebra": suite_gate_algebra,
    "gradients": suite_gradients,
    "rank": suite_rank,
    "cost": suite_cost,
}


def run_suites(names: Sequence[str] | None = None, seed: int = 0) -> list[SuiteResult]:
    results = []
    for name in names or SUITES:
        if name not in SUITES:
            results.append(SuiteResult(name, False, f"unknown suite (known: {', '.join(SUITES)})"))
            continue
        t = time.perf_counter()
        try:
            r = SUITES[name](seed=seed)
        except Exception as e:  # a crashing suite is a failing suite
            r = SuiteResult(name, False, f"{type(e).__name__}: {e}")
        r.seconds = time.perf_counter() - t
        results.append(r)
    return results

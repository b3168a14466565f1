"""Unified MSA layer.

One parameter set yields the attention output and, by re-weighting the value
tensor over local windows, the outputs of every candidate bottleneck
convolution. Binary gates pick one of them (or none, i.e. a skip).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import BatchNormState, Var

DEFAULT_KERNELS = (1, 3)


class ConfigurationError(ValueError):
    """Layer inputs do not match the declared layout."""


def op_names(kernels=DEFAULT_KERNELS) -> list[str]:
    """Candidate operations ordered by ascending cost: conv-k..., msa."""
    return [f"conv{k}" for k in sorted(kernels)] + ["msa"]


def _init(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * std


@dataclass
class UmsaParams:
    W_qry: Var
    W_key: Var
    W_val: Var
    W_o: Var
    b_qry: Var
    b_key: Var
    b_val: Var
    b_o: Var
    z: dict[int, Var]
    theta: Var
    bn_gamma: dict[int, Var]
    bn_beta: dict[int, Var]
    bn_state: dict[int, BatchNormState]
    kernels: tuple[int, ...] = DEFAULT_KERNELS

    @classmethod
    def init(cls, c_in: int, n_h: int, rng: np.random.Generator,
             kernels=DEFAULT_KERNELS, theta_init: float = 1.5) -> "UmsaParams":
        if c_in % n_h:
            raise ConfigurationError(f"c_in={c_in} is not divisible by n_h={n_h}")
        c_h = c_in // n_h
        kernels = tuple(sorted(kernels))
        for k in kernels:
            nx.check_kernel(k)

        def w(shape):
            return Var(_init(rng, shape), requires_grad=True)

        def const(shape, v=0.0):
            return Var(np.full(shape, v), requires_grad=True)

        return cls(
            W_qry=w((c_in, n_h, c_h)), W_key=w((c_in, n_h, c_h)),
            W_val=w((c_in, n_h, c_h)), W_o=w((c_h, n_h, c_in)),
            b_qry=const((n_h, c_h)), b_key=const((n_h, c_h)),
            b_val=const((n_h, c_h)), b_o=const((c_in,)),
            z={k: const((n_h, k, k)) for k in kernels},
            theta=const((len(kernels) + 1,), theta_init),
            bn_gamma={k: const((c_h,), 1.0) for k in kernels},
            bn_beta={k: const((c_h,)) for k in kernels},
            bn_state={k: BatchNormState(c_h) for k in kernels},
            kernels=kernels,
        )

    @property
    def c_in(self) -> int:
        return self.W_val.shape[0]

    @property
    def n_h(self) -> int:
        return self.W_val.shape[1]

    @property
    def c_h(self) -> int:
        return self.W_val.shape[2]

    def weights(self) -> dict[str, Var]:
        out = {n: getattr(self, n) for n in
               ("W_qry", "W_key", "W_val", "W_o", "b_qry", "b_key", "b_val", "b_o")}
        for k in self.kernels:
            out[f"z{k}"] = self.z[k]
            out[f"bn{k}.gamma"] = self.bn_gamma[k]
            out[f"bn{k}.beta"] = self.bn_beta[k]
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.kernels:
            out[f"bn{k}.running_mean"] = self.bn_state[k].running_mean
            out[f"bn{k}.running_var"] = self.bn_state[k].running_var
        return out


# ---------------------------------------------------------------------------
# gates

@dataclass
class GateState:
    """Sampled gates ``g``, their cumulative form ``g_hat`` and open probabilities.

    ``g_var``/``g_hat_var`` carry the straight-through gradient path to the
    gate logits when the state was sampled (or forced) from a logit Var.
    """

    g: np.ndarray
    g_hat: np.ndarray
    probs: np.ndarray
    g_var: Var | None = field(default=None, repr=False)
    g_hat_var: Var | None = field(default=None, repr=False)

    @property
    def selected(self) -> int | None:
        """Index of the single open cumulative gate, or None for a skip."""
        idx = np.flatnonzero(self.g_hat)
        return int(idx[0]) if idx.size else None


def cumulative_gates(g) -> np.ndarray:
    """``g_hat[p] = g[p] * prod_{q>p} (1 - g[q])``: the highest open gate wins."""
    g = np.asarray(g, dtype=float)
    # reversed cumulative product of (1 - g) over strictly later entries
    later_closed = np.concatenate([np.cumprod((1.0 - g)[::-1])[::-1][1:], [1.0]])
    return g * later_closed


def cumulative_gates_var(g: Var) -> Var:
    n = g.shape[0]
    items = []
    for p in range(n):
        term = g[p]
        for q in range(p + 1, n):
            term = term * (1.0 - g[q])
        items.append(term.reshape(1))
    return nx.concat(items, axis=0)


def gates_from_sample(theta: Var, g: np.ndarray) -> GateState:
    """Gate state with the given binary sample and straight-through gradients."""
    g = np.asarray(g, dtype=float)
    g_var = nx.straight_through(theta, g)
    return GateState(
        g=g,
        g_hat=cumulative_gates(g),
        probs=nx.sigmoid_np(theta.value),
        g_var=g_var,
        g_hat_var=cumulative_gates_var(g_var),
    )


def sample_gates(theta: Var, rng: np.random.Generator) -> GateState:
    """Bernoulli(sigmoid(theta)) gates: open iff a uniform draw falls below the probability."""
    probs = nx.sigmoid_np(theta.value)
    g = (rng.random(probs.shape) < probs).astype(float)
    return gates_from_sample(theta, g)


def deterministic_gates(theta: Var | np.ndarray) -> GateState:
    """Fine-tuning gates: open iff sigmoid(theta) >= 0.5. No gradient path.

    Compared as ``theta >= 0`` so tiny negative logits are not rounded open.
    """
    t = theta.value if isinstance(theta, Var) else np.asarray(theta, dtype=float)
    probs = nx.sigmoid_np(t)
    g = (t >= 0).astype(float)
    return GateState(g=g, g_hat=cumulative_gates(g), probs=probs)


# ---------------------------------------------------------------------------
# attention

def _project(X: Var, W: Var, b: Var) -> Var:
    """X[..., N, c_in] @ W[c_in, n_h, c_h] -> [..., N, n_h, c_h]."""
    c_in, n_h, c_h = W.shape
    if X.shape[-1] != c_in:
        raise nx.ShapeError(f"input width {X.shape[-1]} != projection input {c_in}")
    y = nx.linear(X, W.reshape(c_in, n_h * c_h), b.reshape(n_h * c_h))
    return y.reshape(X.shape[:-1] + (n_h, c_h))


def output_projection(heads: Var, W_o: Var, b_o: Var) -> Var:
    """heads[..., N, n_h, c_h] projected by W_o[c_h, n_h, c_in] and summed over heads."""
    c_h, n_h, c_in = W_o.shape
    flat = heads.reshape(heads.shape[:-2] + (n_h * c_h,))
    W = W_o.transpose(1, 0, 2).reshape(n_h * c_h, c_in)
    return nx.linear(flat, W, b_o)


def attention_forward(X: Var, params) -> tuple[Var, Var]:
    """Multi-head self-attention over all tokens of ``X[..., N, c_in]``.

    Returns the layer output and the value tensor ``V[..., N, n_h, c_h]``.
    ``params`` needs W_qry/W_key/W_val/W_o and their biases.
    """
    X = nx.lift(X)
    Q = _project(X, params.W_qry, params.b_qry)
    K = _project(X, params.W_key, params.b_key)
    V = _project(X, params.W_val, params.b_val)
    nd = X.ndim + 1
    # [..., N, n_h, c_h] -> [..., n_h, N, c_h]
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    q, k, v = Q.transpose(perm), K.transpose(perm), V.transpose(perm)
    kt = k.transpose(tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = (q @ kt) * (1.0 / math.sqrt(params.W_qry.shape[2]))
    att = nx.softmax(scores, axis=-1)
    heads = (att @ v).transpose(perm)
    return output_projection(heads, params.W_o, params.b_o), V


# ---------------------------------------------------------------------------
# weight sharing

def head_ensemble(z: Var) -> Var:
    """Softmax over heads at each kernel position: ``z[n_h, k, k]`` -> sigma."""
    return nx.softmax(nx.lift(z), axis=0)


def local_aggregate(V: Var, sigma: Var) -> Var:
    """Head-ensembled local sum of the value tensor.

    ``out[..., i, j, :] = sum_h sum_(d1,d2) sigma[h, d1, d2] * V[..., i+d1, j+d2, h, :]``
    with zero contribution from positions outside the grid.
    ``V`` is ``[..., n_w, n_e, n_h, c_h]``, ``sigma`` is ``[n_h, k, k]``.
    """
    V, sigma = nx.lift(V), nx.lift(sigma)
    n_h, k, k2 = sigma.shape
    r = nx.check_kernel(k)
    if k2 != k or V.shape[-2] != n_h:
        raise nx.ShapeError(f"local_aggregate shape mismatch: V {V.shape}, sigma {sigma.shape}")
    H, W = V.shape[-4], V.shape[-3]
    widths = [(0, 0)] * V.ndim
    widths[-4] = widths[-3] = (r, r)
    Vp = np.pad(V.value, widths)
    s = sigma.value
    out = np.zeros(V.shape[:-2] + V.shape[-1:])
    for a in range(k):
        for b in range(k):
            out += np.einsum("...hc,h->...c", Vp[..., a:a + H, b:b + W, :, :], s[:, a, b])

    def back(g):
        gVp = np.zeros_like(Vp)
        gs = np.zeros_like(s)
        for a in range(k):
            for b in range(k):
                win = Vp[..., a:a + H, b:b + W, :, :]
                gVp[..., a:a + H, b:b + W, :, :] += g[..., None, :] * s[:, a, b][:, None]
                gs[:, a, b] = np.einsum(
                    "nhc,nc->h", win.reshape(-1, n_h, win.shape[-1]), g.reshape(-1, g.shape[-1])
                )
        gV = gVp[..., r:r + H, r:r + W, :, :]
        return gV, gs

    return nx.record(out, (V, sigma), back)


@dataclass
class ProfiledKernel:
    """Standalone bottleneck-convolution weights derived from shared parameters.

    ``W[a, b]`` is the tap for offset ``(a - r, b - r)`` (row-major arrangement).
    ``bias_taps`` carries the value bias per tap so border positions, which see
    fewer in-grid taps, get the right offset.
    """

    W: Var  # [k, k, c_in, c_h]
    bias_taps: Var  # [k, k, c_h]
    W_o_bar: Var  # [c_h, c_in]


def profile_kernel(params: UmsaParams, k: int) -> ProfiledKernel:
    sigma = head_ensemble(params.z[k])  # [n_h, k, k]
    c_in, n_h, c_h = params.W_val.shape
    s = sigma.reshape(n_h, k * k)
    wv = params.W_val.transpose(0, 2, 1).reshape(c_in * c_h, n_h)
    W = (wv @ s).reshape(c_in, c_h, k, k).transpose(2, 3, 0, 1)
    bias = (params.b_val.transpose(1, 0) @ s).reshape(c_h, k, k).transpose(1, 2, 0)
    return ProfiledKernel(W=W, bias_taps=bias, W_o_bar=profile_w_o_bar(params, sigma))


def spatial_tokens(X: Var, grid: tuple[int, int]) -> tuple[Var, int]:
    """Split ``X[..., N, c]`` into the ``[..., n_w, n_e, c]`` grid and the count of leading extra tokens."""
    n_w, n_e = grid
    extra = X.shape[-2] - n_w * n_e
    if extra not in (0, 1):
        raise ConfigurationError(
            f"{X.shape[-2]} tokens do not fit a {n_w}x{n_e} grid (with at most one class token)"
        )
    Xs = X[..., extra:, :] if extra else X
    return Xs.reshape(X.shape[:-2] + (n_w, n_e, X.shape[-1])), extra


def infer_grid(n_tokens: int) -> tuple[int, int]:
    """Square grid for ``n_tokens`` or ``n_tokens - 1`` (class token) tokens."""
    for n_sp in (n_tokens, n_tokens - 1):
        side = math.isqrt(max(n_sp, 0))
        if side and side * side == n_sp:
            return side, side
    raise ConfigurationError(f"cannot infer a square token grid from {n_tokens} tokens")


def border_bias(bias_taps: Var, grid: tuple[int, int]) -> Var:
    """Per-position value-bias offset: the taps summed over in-grid neighbours."""
    k, _, c_h = bias_taps.shape
    ones = Var(np.ones(grid + (1,)))
    return nx.conv2d(ones, bias_taps.reshape(k, k, 1, c_h))


def bconv_tail(conv: Var, gamma: Var, beta: Var, state: BatchNormState,
               W_o_bar: Var, b_o: Var, extra_tokens: int, training: bool) -> Var:
    """BN(ReLU(conv)) @ W_o_bar + b_o, flattened back to tokens.

    Leading non-spatial tokens (the class token) get a zero output so the
    residual passes them through unchanged.
    """
    h = nx.batchnorm(nx.relu(conv), gamma, beta, state, training)
    lead = conv.shape[:-3]
    n = conv.shape[-3] * conv.shape[-2]
    out = nx.linear(h.reshape(lead + (n, conv.shape[-1])), W_o_bar, b_o)
    if extra_tokens:
        pad = Var(np.zeros(lead + (extra_tokens, out.shape[-1])))
        out = nx.concat([pad, out], axis=-2)
    return out


def bconv_forward(X: Var, params: UmsaParams, k: int, mode: str = "search",
                  grid: tuple[int, int] | None = None, training: bool = True,
                  V: Var | None = None) -> Var:
    """Bottleneck convolution output ``BN(ReLU(Conv(X))) @ W_o_bar``.

    ``mode="search"`` indexes and scales ``V`` (computed here unless given);
    ``mode="materialized"`` profiles the kernel and runs an explicit convolution.
    """
    X = nx.lift(X)
    if grid is None:
        grid = infer_grid(X.shape[-2])
    sigma = head_ensemble(params.z[k])
    if mode == "search":
        if V is None:
            V = _project(X, params.W_val, params.b_val)
        Vs, extra = spatial_tokens(V.reshape(V.shape[:-2] + (-1,)), grid)
        Vs = Vs.reshape(Vs.shape[:-1] + (params.n_h, params.c_h))
        conv = local_aggregate(Vs, sigma)
        W_o_bar = profile_w_o_bar(params, sigma)
    elif mode == "materialized":
        prof = profile_kernel(params, k)
        Xs, extra = spatial_tokens(X, grid)
        conv = nx.conv2d(Xs, prof.W) + border_bias(prof.bias_taps, grid)
        W_o_bar = prof.W_o_bar
    else:
        raise ValueError(f"unknown bconv mode {mode!r}")
    return bconv_tail(conv, params.bn_gamma[k], params.bn_beta[k], params.bn_state[k],
                      W_o_bar, params.b_o, extra, training)


def profile_w_o_bar(params: UmsaParams, sigma: Var) -> Var:
    """Sum of output projections over heads and all k*k positions (mass k*k, not renormalised)."""
    n_h = params.n_h
    head_mass = sigma.reshape(n_h, -1).sum(axis=1)
    wo = params.W_o.transpose(1, 0, 2)
    return (wo * head_mass.reshape(n_h, 1, 1)).sum(axis=0)


# ---------------------------------------------------------------------------
# unified layer

def umsa_forward(X: Var, params: UmsaParams, gates: GateState, mode: str = "search",
                 grid: tuple[int, int] | None = None, training: bool = True) -> Var:
    """Gated sum of candidate outputs.

    ``mode="search"`` evaluates every candidate and weights them by the
    differentiable cumulative gates. ``mode="frozen"`` evaluates only the
    selected candidate (zeros when all gates are closed).
    """
    X = nx.lift(X)
    kernels = params.kernels
    if mode == "frozen":
        sel = gates.selected
        if sel is None:
            return Var(np.zeros(X.shape))
        if sel == len(kernels):
            return attention_forward(X, params)[0]
        return bconv_forward(X, params, kernels[sel], "search", grid, training)
    if mode != "search":
        raise ValueError(f"unknown umsa mode {mode!r}")
    if gates.g_hat_var is None:
        raise ValueError("search mode needs gates sampled from the logits")
    msa, V = attention_forward(X, params)
    outs = [bconv_forward(X, params, k, "search", grid, training, V=V) for k in kernels]
    outs.append(msa)
    total = None
    for p, o in enumerate(outs):
        term = o * gates.g_hat_var[p]
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# materialised layers

@dataclass
class MsaLayer:
    """Plain attention layer kept after search (conv-only parameters dropped)."""

    W_qry: Var
    W_key: Var
    W_val: Var
    W_o: Var
    b_qry: Var
    b_key: Var
    b_val: Var
    b_o: Var

    def weights(self) -> dict[str, Var]:
        return dict(vars(self))

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, X: Var, grid=None, training: bool = True) -> Var:
        return attention_forward(X, self)[0]


@dataclass
class BConvLayer:
    """Standalone bottleneck convolution profiled from shared attention parameters."""

    k: int
    W: Var  # [k, k, c_in, c_h]
    bias_taps: Var  # [k, k, c_h]
    W_o_bar: Var  # [c_h, c_in]
    b_o: Var
    bn_gamma: Var
    bn_beta: Var
    bn_state: BatchNormState

    def weights(self) -> dict[str, Var]:
        return {"W": self.W, "bias_taps": self.bias_taps, "W_o_bar": self.W_o_bar,
                "b_o": self.b_o, "bn.gamma": self.bn_gamma, "bn.beta": self.bn_beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"bn.running_mean": self.bn_state.running_mean,
                "bn.running_var": self.bn_state.running_var}

    def forward(self, X: Var, grid=None, training: bool = True) -> Var:
        X = nx.lift(X)
        grid = grid or infer_grid(X.shape[-2])
        Xs, extra = spatial_tokens(X, grid)
        conv = nx.conv2d(Xs, self.W) + border_bias(self.bias_taps, grid)
        return bconv_tail(conv, self.bn_gamma, self.bn_beta, self.bn_state,
                          self.W_o_bar, self.b_o, extra, training)


def _copy(v: Var) -> Var:
    return Var(v.value.copy(), requires_grad=True)


def materialize_msa(params: UmsaParams) -> MsaLayer:
    return MsaLayer(**{n: _copy(getattr(params, n)) for n in
                       ("W_qry", "W_key", "W_val", "W_o", "b_qry", "b_key", "b_val", "b_o")})


def materialize_bconv(params: UmsaParams, k: int) -> BConvLayer:
    with nx.no_grad():
        prof = profile_kernel(params, k)
    return BConvLayer(
        k=k, W=_copy(prof.W), bias_taps=_copy(prof.bias_taps), W_o_bar=_copy(prof.W_o_bar),
        b_o=_copy(params.b_o), bn_gamma=_copy(params.bn_gamma[k]),
        bn_beta=_copy(params.bn_beta[k]), bn_state=params.bn_state[k].copy(),
    )

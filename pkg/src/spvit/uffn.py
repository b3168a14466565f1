"""Unified FFN: one binary gate per hidden dimension."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Var


@dataclass
class UffnParams:
    W_fc1: Var  # [c_in, hidden]
    b_fc1: Var  # [hidden]
    W_fc2: Var  # [hidden, c_in]
    b_fc2: Var  # [c_in]
    theta: Var | None = None  # [hidden]; None once the layer is materialised

    @classmethod
    def init(cls, c_in: int, ratio: int, rng: np.random.Generator,
             theta_init: float = 1.5) -> "UffnParams":
        hidden = ratio * c_in

        def w(shape):
            return Var(np.clip(rng.standard_normal(shape), -2, 2) * 0.02, requires_grad=True)

        return cls(
            W_fc1=w((c_in, hidden)),
            b_fc1=Var(np.zeros(hidden), requires_grad=True),
            W_fc2=w((hidden, c_in)),
            b_fc2=Var(np.zeros(c_in), requires_grad=True),
            theta=Var(np.full(hidden, theta_init), requires_grad=True),
        )

    @property
    def c_in(self) -> int:
        return self.W_fc1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W_fc1.shape[1]

    def weights(self) -> dict[str, Var]:
        return {"W_fc1": self.W_fc1, "b_fc1": self.b_fc1, "W_fc2": self.W_fc2, "b_fc2": self.b_fc2}

    def n_params(self) -> int:
        return sum(v.value.size for v in self.weights().values())


def sample_dim_gates(theta: Var, rng: np.random.Generator) -> Var:
    """Bernoulli gate per hidden dimension with a straight-through path to ``theta``."""
    probs = nx.sigmoid_np(theta.value)
    return nx.straight_through(theta, (rng.random(probs.shape) < probs).astype(float))


def select_dims(theta) -> np.ndarray:
    """Kept hidden dimensions: ``sigmoid(theta) >= 0.5``, i.e. ``theta >= 0``."""
    t = theta.value if isinstance(theta, Var) else np.asarray(theta, dtype=float)
    return np.flatnonzero(t >= 0)


def alpha_prime(kept: int, c_in: int) -> float:
    return kept / c_in


def uffn_forward(X: Var, params: UffnParams, gates=None, mode: str = "search") -> Var:
    """``sum_t g_t * GeLU(X W1[:, t] + b1[t]) W2[t, :] + b2``.

    Search mode multiplies the hidden activations by ``gates`` (a Var for
    straight-through training or a plain 0/1 array; ``None`` keeps every
    dimension). Frozen mode evaluates only the dimensions kept by ``theta``.
    """
    X = nx.lift(X)
    if mode == "frozen":
        if params.theta is None:
            return uffn_forward(X, params, None, "search")
        keep = select_dims(params.theta)
        h = nx.gelu(nx.linear(X, params.W_fc1[:, keep], params.b_fc1[keep]))
        return nx.linear(h, params.W_fc2[keep, :], params.b_fc2)
    if mode != "search":
        raise ValueError(f"unknown uffn mode {mode!r}")
    h = nx.gelu(nx.linear(X, params.W_fc1, params.b_fc1))
    if gates is not None:
        if gates.shape[-1] != params.hidden:
            raise nx.ShapeError(f"{gates.shape[-1]} gates for {params.hidden} hidden dims")
        h = h * gates
    return nx.linear(h, params.W_fc2, params.b_fc2)


def materialize_ffn(params: UffnParams, keep) -> UffnParams:
    """Copy of the layer restricted to hidden dimensions ``keep``."""
    keep = np.asarray(keep, dtype=np.int64)
    if keep.size == 0:
        warnings.warn("all hidden dimensions pruned; FFN reduces to its output bias", stacklevel=2)

    def take(a):
        return Var(a.copy(), requires_grad=True)

    return UffnParams(
        W_fc1=take(params.W_fc1.value[:, keep]),
        b_fc1=take(params.b_fc1.value[keep]),
        W_fc2=take(params.W_fc2.value[keep, :]),
        b_fc2=take(params.b_fc2.value),
        theta=None,
    )

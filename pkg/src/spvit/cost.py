"""Mult-Add lookup table and the differentiable complexity loss."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import ModelConfig
from .numerics import Var
from .umsa import cumulative_gates_var, op_names


def op_flops(kind: str, n_tokens: int, c_in: int, c_h: int = 0, k: int = 1) -> int:
    """Mult-Adds of one candidate operation over ``n_tokens`` tokens.

    ``msa``: Q/K/V/O projections plus scores and weighted sum.
    ``bconv``: k*k conv to ``c_h`` channels, ReLU/BN, projection back to ``c_in``.
    ``ffn_dim``: one hidden dimension (its fc1 column and fc2 row).
    """
    n = n_tokens
    if kind == "skip":
        return 0
    if kind == "msa":
        return 4 * n * c_in * c_in + 2 * n * n * c_in
    if kind == "bconv":
        return k * k * n * c_in * c_h + n * c_h * c_in + n * c_h
    if kind == "ffn_dim":
        return 2 * n * c_in
    raise ValueError(f"unknown op kind {kind!r}")


@dataclass
class CostTable:
    ops: list[str]  # ordered gate candidates, e.g. conv1, conv3, msa
    blocks: list[dict[str, int]]  # per block: op -> Mult-Adds ("skip" -> 0)
    ffn_per_dim: list[int]
    ffn_dims: list[int]
    fixed: int  # patch embedding + classifier head

    @property
    def msa_total(self) -> int:
        return sum(b["msa"] for b in self.blocks)

    @property
    def ffn_total(self) -> int:
        return sum(p * d for p, d in zip(self.ffn_per_dim, self.ffn_dims))

    @property
    def dense_total(self) -> int:
        return self.msa_total + self.ffn_total + self.fixed

    def hard_total(self, choices: list[str], kept: list[int]) -> int:
        """Exact cost of a frozen architecture (op per block, kept FFN dims per block)."""
        total = self.fixed + sum(b[op] for b, op in zip(self.blocks, choices))
        return total + sum(p * n for p, n in zip(self.ffn_per_dim, kept))

    def to_json(self) -> dict:
        return {
            "ops": ["skip", *self.ops],
            "blocks": [
                {**b, "ffn_per_dim": p, "ffn_dims": d}
                for b, p, d in zip(self.blocks, self.ffn_per_dim, self.ffn_dims)
            ],
            "fixed": self.fixed,
            "msa_total": self.msa_total,
            "ffn_total": self.ffn_total,
            "dense_total": self.dense_total,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def build_cost_table(cfg: ModelConfig) -> CostTable:
    """Class token counts toward attention/FFN tokens but not convolution tokens."""
    n, n_sp, c, c_h = cfg.n_tokens, cfg.n_spatial, cfg.embed_dim, cfg.head_dim
    ops = op_names(cfg.kernels)
    per_block = {"skip": 0, "msa": op_flops("msa", n, c)}
    for k in cfg.kernels:
        per_block[f"conv{k}"] = op_flops("bconv", n_sp, c, c_h, k)
    fixed = n_sp * cfg.patch_dim * c + c * cfg.n_classes
    return CostTable(
        ops=ops,
        blocks=[dict(per_block) for _ in range(cfg.n_blocks)],
        ffn_per_dim=[op_flops("ffn_dim", n, c)] * cfg.n_blocks,
        ffn_dims=[cfg.hidden] * cfg.n_blocks,
        fixed=fixed,
    )


DEIT = {
    "deit_tiny": ModelConfig(224, 16, 3, 12, 192, 3, (1, 3), 4, 1000),
    "deit_small": ModelConfig(224, 16, 3, 12, 384, 6, (1, 3), 4, 1000),
    "deit_base": ModelConfig(224, 16, 3, 12, 768, 12, (1, 3), 4, 1000),
}


def expected_gate_mass(probs: Var) -> Var:
    """``E[g_hat_p] = P_p * prod_{q>p} (1 - P_q)`` for independent gates."""
    return cumulative_gates_var(probs)


def expected_flops(table: CostTable, umsa_logits: list[Var | None],
                   ffn_logits: list[Var | None], hard: bool = False) -> Var:
    """Expected Mult-Adds under independent Bernoulli(sigmoid(theta)) gates.

    ``None`` entries stand for blocks already fixed to MSA / full width.
    With ``hard=True`` the probabilities are replaced by the thresholded
    gates, which gives the exact cost of the frozen architecture.
    """
    total: Var = Var(float(table.fixed))
    for b, ut, ft, per_dim, dims in zip(table.blocks, umsa_logits, ffn_logits,
                                        table.ffn_per_dim, table.ffn_dims):
        costs = np.array([b[op] for op in table.ops], dtype=float)
        if ut is None:
            total = total + float(b["msa"])
        else:
            probs = _probs(ut, hard)
            total = total + (expected_gate_mass(probs) * costs).sum()
        if ft is None:
            total = total + float(per_dim * dims)
        else:
            total = total + _probs(ft, hard).sum() * float(per_dim)
    return total


def _probs(theta: Var, hard: bool) -> Var:
    if hard:
        return Var((theta.value >= 0).astype(float))
    return nx.sigmoid(theta)


def complexity_loss(flops: Var, target: float, dense: float) -> Var:
    """Squared gap to the target, normalised by the dense cost."""
    if dense <= 0:
        raise ValueError("dense cost must be positive")
    return nx.square((nx.lift(flops) - float(target)) * (1.0 / float(dense)))

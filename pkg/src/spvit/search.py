"""Joint gate/weight search under a FLOPs target, and freezing to a descriptor."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .cost import CostTable, build_cost_table, complexity_loss, expected_flops
from .data import Dataset, iterate_batches
from .model import ViTModel, count_params, forward, sample_model_gates
from .numerics import AdamW
from .uffn import select_dims
from .umsa import BConvLayer, UmsaParams, deterministic_gates


class SearchDivergedError(RuntimeError):
    """The search loss became non-finite."""


@dataclass
class SearchConfig:
    lambda_comp: float = 5.0
    target_fraction: float | None = 0.6
    target_flops: float | None = None
    lr_gates: float = 1e-3
    lr_weights: float = 1e-4
    theta_init: float = 1.5
    epochs: int = 15
    min_epochs: int = 2
    batch_size: int = 32
    weight_decay: float = 0.0
    converge_tol: float = 0.05
    ffn_slack: float = 0.02
    # "frozen": the loss value uses the thresholded cost, gradients still come
    # from the expectation (straight-through in value space)
    comp_flops: str = "expected"
    seed: int = 0

    def __post_init__(self):
        if self.lambda_comp < 0:
            raise ValueError("lambda_comp must be non-negative")
        if self.target_fraction is not None and not 0 < self.target_fraction <= 1:
            raise ValueError("target_fraction must lie in (0, 1]")
        if self.comp_flops not in ("expected", "frozen"):
            raise ValueError(f"comp_flops must be 'expected' or 'frozen', got {self.comp_flops!r}")

    def target(self, table: CostTable) -> float:
        if self.target_flops is not None:
            return float(self.target_flops)
        frac = 1.0 if self.target_fraction is None else self.target_fraction
        return frac * table.dense_total

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class BlockChoice:
    umsa: str  # "skip", "conv<k>" or "msa"
    ffn_dims: list[int]
    alpha_prime: float

    @property
    def ffn_kept(self) -> int:
        return len(self.ffn_dims)


@dataclass
class ArchitectureDescriptor:
    blocks: list[BlockChoice]
    flops: int
    params: int
    seed: int | None = None
    config_hash: str = ""
    converged: bool = field(default=True, compare=False)

    @classmethod
    def with_totals(cls, blocks: list[BlockChoice], model: ViTModel, seed=None,
                    config_hash: str = "", converged: bool = True) -> "ArchitectureDescriptor":
        table = build_cost_table(model.config)
        flops = table.hard_total([b.umsa for b in blocks], [b.ffn_kept for b in blocks])
        desc = cls(blocks, flops, 0, seed, config_hash, converged)
        desc.params = count_params(model, desc)
        return desc

    def key(self) -> tuple:
        return tuple((b.umsa, tuple(b.ffn_dims)) for b in self.blocks)

    def to_json(self) -> dict:
        return {
            "blocks": [
                {"umsa": b.umsa, "ffn_kept": b.ffn_kept, "alpha_prime": b.alpha_prime,
                 "ffn_dims": list(map(int, b.ffn_dims))}
                for b in self.blocks
            ],
            "totals": {"flops": int(self.flops), "params": int(self.params)},
            "provenance": {"seed": self.seed, "config_hash": self.config_hash},
        }

    @classmethod
    def from_json(cls, d: dict) -> "ArchitectureDescriptor":
        blocks = []
        for b in d["blocks"]:
            dims = [int(x) for x in b["ffn_dims"]]
            if len(dims) != b["ffn_kept"]:
                raise ValueError(f"ffn_kept={b['ffn_kept']} but {len(dims)} dims listed")
            blocks.append(BlockChoice(b["umsa"], dims, float(b["alpha_prime"])))
        prov = d.get("provenance", {})
        return cls(blocks, int(d["totals"]["flops"]), int(d["totals"]["params"]),
                   prov.get("seed"), prov.get("config_hash", ""))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def freeze(model: ViTModel, seed=None, config_hash: str = "", converged: bool = True
           ) -> ArchitectureDescriptor:
    """Threshold every gate at sigmoid(theta) >= 0.5 and record the architecture."""
    c = model.config.embed_dim
    blocks = []
    for blk in model.blocks:
        a = blk.attn
        if isinstance(a, UmsaParams):
            sel = deterministic_gates(a.theta).selected
            ops = [f"conv{k}" for k in a.kernels] + ["msa"]
            op = "skip" if sel is None else ops[sel]
        elif a is None:
            op = "skip"
        elif isinstance(a, BConvLayer):
            op = f"conv{a.k}"
        else:
            op = "msa"
        dims = (select_dims(blk.ffn.theta) if blk.ffn.theta is not None
                else np.arange(blk.ffn.hidden))
        blocks.append(BlockChoice(op, [int(d) for d in dims], len(dims) / c))
    return ArchitectureDescriptor.with_totals(blocks, model, seed, config_hash, converged)


def descriptors_match(a: ArchitectureDescriptor, b: ArchitectureDescriptor,
                      hidden: int, ffn_slack: float = 0.0) -> bool:
    """Same op per block, and kept FFN sets differing in at most ``ffn_slack * hidden`` dims."""
    if [x.umsa for x in a.blocks] != [x.umsa for x in b.blocks]:
        return False
    return all(len(set(x.ffn_dims) ^ set(y.ffn_dims)) <= ffn_slack * hidden
               for x, y in zip(a.blocks, b.blocks))


def gate_logits(model: ViTModel) -> tuple[list, list]:
    umsa = [b.attn.theta if isinstance(b.attn, UmsaParams) else None for b in model.blocks]
    ffn = [b.ffn.theta for b in model.blocks]
    return umsa, ffn


def make_optimizer(model: ViTModel, config: SearchConfig) -> AdamW:
    return AdamW([
        {"params": list(model.gate_logits().values()), "lr": config.lr_gates},
        {"params": list(model.weights().values()), "lr": config.lr_weights,
         "weight_decay": config.weight_decay},
    ])


@dataclass
class StepStats:
    loss: float
    ce: float
    comp: float
    flops: float


def search_loss(model: ViTModel, images, labels, config: SearchConfig, table: CostTable,
                rng: np.random.Generator, gates=None):
    """(loss, ce, comp, expected flops) Vars for one batch with freshly sampled gates."""
    if gates is None:
        gates = sample_model_gates(model, rng)
    ce = nx.cross_entropy(forward(model, images, gates, "search"), labels)
    logits = gate_logits(model)
    flops = expected_flops(table, *logits)
    f = flops
    if config.comp_flops == "frozen":
        f = flops + (float(expected_flops(table, *logits, hard=True).value) - float(flops.value))
    comp = complexity_loss(f, config.target(table), table.dense_total)
    return ce + config.lambda_comp * comp, ce, comp, flops


def search_step(model: ViTModel, batch, config: SearchConfig, rng: np.random.Generator,
                opt: AdamW, table: CostTable) -> StepStats:
    images, labels = batch
    loss, ce, comp, flops = search_loss(model, images, labels, config, table, rng)
    if not math.isfinite(float(loss.value)):
        dump = {n: v.value.tolist() for n, v in model.gate_logits().items()}
        raise SearchDivergedError(f"non-finite search loss; gate logits: {json.dumps(dump)}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return StepStats(float(loss.value), float(ce.value), float(comp.value), float(flops.value))


@dataclass
class SearchResult:
    descriptor: ArchitectureDescriptor
    converged: bool
    epochs: int
    history: list[dict]


CSV_HEADER = "epoch,loss,ce,comp,expected_flops,frozen_flops,frozen_fraction"


def run_search(model: ViTModel, data: Dataset, config: SearchConfig,
               log: Callable[[str], None] | None = None) -> SearchResult:
    """Search until the frozen architecture holds still from one epoch to the next.

    "Still" means identical ops per block and kept FFN sets that moved by at
    most ``ffn_slack`` of the hidden width. Convergence additionally needs
    ``min_epochs`` elapsed and the frozen cost within ``converge_tol``
    (fraction of dense) of the target.
    """
    table = build_cost_table(model.config)
    target = config.target(table)
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(model, config)
    model.train()
    history: list[dict] = []
    if log:
        log(CSV_HEADER)
    prev = freeze(model)
    converged = False
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(4)
        n = 0
        for batch in iterate_batches(data, config.batch_size, rng):
            st = search_step(model, batch, config, rng, opt, table)
            sums += [st.loss, st.ce, st.comp, st.flops]
            n += 1
        desc = freeze(model)
        stable = descriptors_match(prev, desc, model.config.hidden, config.ffn_slack)
        prev = desc
        row = dict(zip(("loss", "ce", "comp", "expected_flops"), sums / n))
        row.update(epoch=epoch, frozen_flops=desc.flops, frozen_fraction=desc.flops / table.dense_total)
        history.append(row)
        if log:
            log(f"{epoch},{row['loss']:.6f},{row['ce']:.6f},{row['comp']:.6e},"
                f"{row['expected_flops']:.1f},{desc.flops},{row['frozen_fraction']:.4f}")
        on_budget = abs(desc.flops - target) <= config.converge_tol * table.dense_total
        if stable and on_budget and epoch >= config.min_epochs:
            converged = True
            break
    desc = freeze(model, config.seed, config.digest(), converged)
    return SearchResult(desc, converged, epoch, history)

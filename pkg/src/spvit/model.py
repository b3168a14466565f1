"""Toy ViT built from unified (searchable) or materialised blocks."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Var
from .uffn import UffnParams, sample_dim_gates, uffn_forward
from .umsa import (
    BConvLayer,
    ConfigurationError,
    GateState,
    MsaLayer,
    UmsaParams,
    attention_forward,
    deterministic_gates,
    sample_gates,
    umsa_forward,
)


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    in_chans: int = 3
    n_blocks: int = 4
    embed_dim: int = 64
    n_heads: int = 4
    kernels: tuple[int, ...] = (1, 3)
    mlp_ratio: int = 4
    n_classes: int = 8
    class_token: bool = True
    pre_norm: bool = False

    def __post_init__(self):
        self.kernels = tuple(sorted(self.kernels))
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.n_heads:
            raise ConfigurationError(
                f"embed dim {self.embed_dim} not divisible by {self.n_heads} heads"
            )

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side

    @property
    def n_spatial(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def n_tokens(self) -> int:
        return self.n_spatial + int(self.class_token)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_chans

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.embed_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernels"] = list(self.kernels)
        return d


@dataclass
class Block:
    attn: UmsaParams | MsaLayer | BConvLayer | None
    ffn: UffnParams
    ln1_g: Var
    ln1_b: Var
    ln2_g: Var
    ln2_b: Var

    def weights(self) -> dict[str, Var]:
        out = {"ln1.gamma": self.ln1_g, "ln1.beta": self.ln1_b,
               "ln2.gamma": self.ln2_g, "ln2.beta": self.ln2_b}
        if self.attn is not None:
            out.update({f"attn.{n}": v for n, v in self.attn.weights().items()})
        out.update({f"ffn.{n}": v for n, v in self.ffn.weights().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        if self.attn is None:
            return {}
        return {f"attn.{n}": v for n, v in self.attn.buffers().items()}

    def gate_logits(self) -> dict[str, Var]:
        out = {}
        if isinstance(self.attn, UmsaParams):
            out["attn.theta"] = self.attn.theta
        if self.ffn.theta is not None:
            out["ffn.theta"] = self.ffn.theta
        return out


@dataclass
class ViTModel:
    config: ModelConfig
    patch_w: Var
    patch_b: Var
    pos: Var
    blocks: list[Block]
    head_w: Var
    head_b: Var
    cls: Var | None = None
    norm_g: Var | None = None
    norm_b: Var | None = None
    training: bool = field(default=True, repr=False)

    def weights(self) -> dict[str, Var]:
        out = {"patch.w": self.patch_w, "patch.b": self.patch_b, "pos": self.pos}
        if self.cls is not None:
            out["cls"] = self.cls
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.{n}": v for n, v in blk.weights().items()})
        if self.norm_g is not None:
            out["norm.gamma"], out["norm.beta"] = self.norm_g, self.norm_b
        out["head.w"], out["head.b"] = self.head_w, self.head_b
        return out

    def gate_logits(self) -> dict[str, Var]:
        out = {}
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.{n}": v for n, v in blk.gate_logits().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.{n}": v for n, v in blk.buffers().items()})
        return out

    def named_tensors(self) -> dict[str, Var | np.ndarray]:
        return {**self.weights(), **self.gate_logits(), **self.buffers()}

    def train(self, mode: bool = True) -> "ViTModel":
        self.training = mode
        return self

    def eval(self) -> "ViTModel":
        return self.train(False)


def build_model(config: ModelConfig, rng: np.random.Generator,
                theta_init: float = 1.5) -> ViTModel:
    """Fresh unified model; every block starts as searchable UMSA + UFFN."""
    c = config.embed_dim

    def w(shape, std=0.02):
        return Var(np.clip(rng.standard_normal(shape), -2, 2) * std, requires_grad=True)

    def const(shape, v=0.0):
        return Var(np.full(shape, v), requires_grad=True)

    blocks = [
        Block(
            attn=UmsaParams.init(c, config.n_heads, rng, config.kernels, theta_init),
            ffn=UffnParams.init(c, config.mlp_ratio, rng, theta_init),
            ln1_g=const((c,), 1.0), ln1_b=const((c,)),
            ln2_g=const((c,), 1.0), ln2_b=const((c,)),
        )
        for _ in range(config.n_blocks)
    ]
    return ViTModel(
        config=config,
        patch_w=w((config.patch_dim, c)),
        patch_b=const((c,)),
        pos=w((config.n_tokens, c)),
        blocks=blocks,
        head_w=w((c, config.n_classes)),
        head_b=const((config.n_classes,)),
        cls=w((1, c)) if config.class_token else None,
        norm_g=const((c,), 1.0) if config.pre_norm else None,
        norm_b=const((c,)) if config.pre_norm else None,
    )


# ---------------------------------------------------------------------------
# forward

@dataclass
class BlockGates:
    umsa: GateState | None
    ffn: Var | np.ndarray | None


def sample_model_gates(model: ViTModel, rng: np.random.Generator) -> list[BlockGates]:
    out = []
    for blk in model.blocks:
        ug = sample_gates(blk.attn.theta, rng) if isinstance(blk.attn, UmsaParams) else None
        fg = sample_dim_gates(blk.ffn.theta, rng) if blk.ffn.theta is not None else None
        out.append(BlockGates(ug, fg))
    return out


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, H, W, C]`` -> ``[B, (H/p)*(W/p), p*p*C]`` in row-major patch order."""
    B, H, W, C = images.shape
    x = images.reshape(B, H // patch, patch, W // patch, patch, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, (H // patch) * (W // patch), patch * patch * C)


def embed(model: ViTModel, images: np.ndarray) -> Var:
    cfg = model.config
    images = np.asarray(images, dtype=float)
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.in_chans):
        raise ConfigurationError(
            f"images {images.shape} do not match "
            f"[B, {cfg.image_size}, {cfg.image_size}, {cfg.in_chans}]"
        )
    tokens = nx.linear(Var(patchify(images, cfg.patch_size)), model.patch_w, model.patch_b)
    if model.cls is not None:
        cls = model.cls.reshape(1, 1, -1) + Var(np.zeros((images.shape[0], 1, cfg.embed_dim)))
        tokens = nx.concat([cls, tokens], axis=1)
    return tokens + model.pos


def attn_output(blk: Block, X: Var, gates: BlockGates | None, mode: str,
                grid, training: bool) -> Var | None:
    attn = blk.attn
    if attn is None:
        return None
    if isinstance(attn, UmsaParams):
        if mode == "dense":
            return attention_forward(X, attn)[0]
        if mode == "frozen":
            state = deterministic_gates(attn.theta)
            if state.selected is None:
                return None
            return umsa_forward(X, attn, state, "frozen", grid, training)
        if gates is None or gates.umsa is None:
            raise ValueError("search mode needs sampled gates for every unified block")
        return umsa_forward(X, attn, gates.umsa, "search", grid, training)
    return attn.forward(X, grid, training)


def ffn_output(blk: Block, X: Var, gates: BlockGates | None, mode: str) -> Var:
    if blk.ffn.theta is None or mode == "dense":
        return uffn_forward(X, blk.ffn, None, "search")
    if mode == "frozen":
        return uffn_forward(X, blk.ffn, None, "frozen")
    return uffn_forward(X, blk.ffn, gates.ffn if gates is not None else None, "search")


def forward(model: ViTModel, images: np.ndarray, gates: list[BlockGates] | None = None,
            mode: str = "search") -> Var:
    """Logits ``[B, n_classes]``.

    ``mode`` applies to unified blocks: ``search`` (sampled ``gates``),
    ``frozen`` (thresholded logits) or ``dense`` (attention and every hidden
    dimension). Materialised blocks ignore it.
    """
    if mode not in ("search", "frozen", "dense"):
        raise ValueError(f"unknown forward mode {mode!r}")
    cfg = model.config
    X = embed(model, images)
    for i, blk in enumerate(model.blocks):
        g = gates[i] if gates is not None else None
        if cfg.pre_norm:
            a = attn_output(blk, nx.layernorm(X, blk.ln1_g, blk.ln1_b), g, mode,
                            cfg.grid, model.training)
            X = X if a is None else X + a
            X = X + ffn_output(blk, nx.layernorm(X, blk.ln2_g, blk.ln2_b), g, mode)
        else:
            a = attn_output(blk, X, g, mode, cfg.grid, model.training)
            X = nx.layernorm(X if a is None else X + a, blk.ln1_g, blk.ln1_b)
            X = nx.layernorm(X + ffn_output(blk, X, g, mode), blk.ln2_g, blk.ln2_b)
    if model.norm_g is not None:
        X = nx.layernorm(X, model.norm_g, model.norm_b)
    pooled = X[:, 0, :] if model.cls is not None else X.mean(axis=1)
    return nx.linear(pooled, model.head_w, model.head_b)


# ---------------------------------------------------------------------------
# parameter counting

def attn_param_count(choice: str, c: int, n_h: int) -> int:
    """Scalars a block's attention slot retains after materialisation."""
    c_h = c // n_h
    if choice == "skip":
        return 0
    if choice == "msa":
        return 4 * c * c + 4 * c
    k = int(choice.removeprefix("conv"))
    return k * k * c * c_h + k * k * c_h + c_h * c + c + 2 * c_h


def ffn_param_count(kept: int, c: int) -> int:
    return kept * (2 * c + 1) + c


def count_params(model: ViTModel, descriptor=None) -> int:
    """Retained scalars after materialisation.

    Without a descriptor, unified blocks count as dense (attention + every
    hidden dimension) and materialised blocks count what they hold. Gate
    logits, head-ensemble logits and batch-norm running stats never count.
    """
    cfg = model.config
    c = cfg.embed_dim
    total = cfg.patch_dim * c + c + cfg.n_tokens * c + c * cfg.n_classes + cfg.n_classes
    total += c if cfg.class_token else 0
    total += 2 * c if cfg.pre_norm else 0
    for i, blk in enumerate(model.blocks):
        total += 4 * c
        if descriptor is not None:
            b = descriptor.blocks[i]
            total += attn_param_count(b.umsa, c, cfg.n_heads) + ffn_param_count(len(b.ffn_dims), c)
            continue
        if isinstance(blk.attn, UmsaParams):
            total += attn_param_count("msa", c, cfg.n_heads)
        elif blk.attn is not None:
            total += sum(v.value.size for v in blk.attn.weights().values())
        total += blk.ffn.n_params()
    return total

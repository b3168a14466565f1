"""Materialisation, fine-tuning with hard-label distillation, evaluation, checkpoints."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .cost import build_cost_table
from .data import Dataset, iterate_batches
from .model import Block, ModelConfig, ViTModel, count_params, forward
from .numerics import AdamW, BatchNormState, Var
from .search import ArchitectureDescriptor, BlockChoice, freeze
from .uffn import UffnParams, materialize_ffn
from .umsa import (
    BConvLayer,
    ConfigurationError,
    MsaLayer,
    UmsaParams,
    materialize_bconv,
    materialize_msa,
)

MAGIC = b"SPVT"
FORMAT_VERSION = 1


class IntegrityError(ValueError):
    """A descriptor does not fit the model, or stored totals do not recompute."""


class FormatError(ValueError):
    """A checkpoint file is malformed."""

    def __init__(self, msg: str, offset: int | None = None):
        super().__init__(msg if offset is None else f"{msg} (at byte {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# materialisation

def _copy(v: Var) -> Var:
    return Var(v.value.copy(), requires_grad=True)


def check_descriptor(model: ViTModel, desc: ArchitectureDescriptor) -> None:
    cfg = model.config
    if len(desc.blocks) != len(model.blocks):
        raise IntegrityError(f"descriptor has {len(desc.blocks)} blocks, model has {len(model.blocks)}")
    valid = {"skip", "msa", *(f"conv{k}" for k in cfg.kernels)}
    for i, (b, blk) in enumerate(zip(desc.blocks, model.blocks)):
        if b.umsa not in valid:
            raise IntegrityError(f"block {i}: unknown operation {b.umsa!r}")
        if not isinstance(blk.attn, UmsaParams) and b.umsa != attn_kind(blk):
            raise IntegrityError(f"block {i}: materialised {attn_kind(blk)!r} cannot become {b.umsa!r}")
        dims = np.asarray(b.ffn_dims, dtype=np.int64)
        if dims.size and (dims.min() < 0 or dims.max() >= blk.ffn.hidden or np.unique(dims).size != dims.size):
            raise IntegrityError(f"block {i}: FFN dims out of range or repeated")


def attn_kind(blk: Block) -> str:
    a = blk.attn
    if a is None:
        return "skip"
    if isinstance(a, BConvLayer):
        return f"conv{a.k}"
    return "msa"


def materialize(model: ViTModel, desc: ArchitectureDescriptor) -> ViTModel:
    """Standalone pruned model: profiled convolutions, sliced FFNs, no gates."""
    check_descriptor(model, desc)
    blocks = []
    for blk, b in zip(model.blocks, desc.blocks):
        a = blk.attn
        if isinstance(a, UmsaParams):
            if b.umsa == "skip":
                attn = None
            elif b.umsa == "msa":
                attn = materialize_msa(a)
            else:
                attn = materialize_bconv(a, int(b.umsa.removeprefix("conv")))
        else:
            attn = _clone_layer(a)
        blocks.append(Block(
            attn=attn,
            ffn=materialize_ffn(blk.ffn, b.ffn_dims),
            ln1_g=_copy(blk.ln1_g), ln1_b=_copy(blk.ln1_b),
            ln2_g=_copy(blk.ln2_g), ln2_b=_copy(blk.ln2_b),
        ))
    out = ViTModel(
        config=model.config,
        patch_w=_copy(model.patch_w), patch_b=_copy(model.patch_b), pos=_copy(model.pos),
        blocks=blocks, head_w=_copy(model.head_w), head_b=_copy(model.head_b),
        cls=_copy(model.cls) if model.cls is not None else None,
        norm_g=_copy(model.norm_g) if model.norm_g is not None else None,
        norm_b=_copy(model.norm_b) if model.norm_b is not None else None,
    )
    return out.train(model.training)


def _clone_layer(a):
    if a is None:
        return None
    if isinstance(a, MsaLayer):
        return MsaLayer(**{n: _copy(v) for n, v in a.weights().items()})
    return BConvLayer(k=a.k, W=_copy(a.W), bias_taps=_copy(a.bias_taps),
                      W_o_bar=_copy(a.W_o_bar), b_o=_copy(a.b_o),
                      bn_gamma=_copy(a.bn_gamma), bn_beta=_copy(a.bn_beta),
                      bn_state=a.bn_state.copy())


def apply_descriptor(model: ViTModel, desc: ArchitectureDescriptor, margin: float = 3.0) -> None:
    """Set gate logits so that freezing ``model`` reproduces ``desc``."""
    check_descriptor(model, desc)
    for blk, b in zip(model.blocks, desc.blocks):
        if isinstance(blk.attn, UmsaParams):
            ops = [f"conv{k}" for k in blk.attn.kernels] + ["msa"]
            theta = np.full(len(ops), -margin)
            if b.umsa != "skip":
                theta[ops.index(b.umsa)] = margin
            blk.attn.theta.value[...] = theta
        if blk.ffn.theta is not None:
            theta = np.full(blk.ffn.hidden, -margin)
            theta[np.asarray(b.ffn_dims, dtype=np.int64)] = margin
            blk.ffn.theta.value[...] = theta


# ---------------------------------------------------------------------------
# training / evaluation

@dataclass
class TeacherHandle:
    """Produces hard labels (argmax class indices) for a batch of images."""

    predict: Callable[[np.ndarray], np.ndarray]
    identity: str
    n_classes: int

    @classmethod
    def from_model(cls, model: ViTModel, identity: str = "dense-toy") -> "TeacherHandle":
        def predict(images):
            was = model.training
            model.eval()
            with nx.no_grad():
                logits = forward(model, images, mode="frozen").value
            model.train(was)
            return logits.argmax(axis=1)

        return cls(predict, identity, model.config.n_classes)


def weight_params(model: ViTModel) -> list[Var]:
    return list(model.weights().values())


def train(model: ViTModel, data: Dataset, epochs: int, lr: float, batch_size: int = 32,
          seed: int = 0, mode: str = "frozen", teacher: TeacherHandle | None = None,
          lam_dist: float = 0.0, weight_decay: float = 0.0,
          log: Callable[[str], None] | None = None) -> list[float]:
    """Minimise CE (+ ``lam_dist`` * CE against teacher hard labels); returns mean loss per epoch."""
    if lam_dist < 0:
        raise ValueError("lam_dist must be non-negative")
    if teacher is None:
        lam_dist = 0.0
    elif teacher.n_classes != model.config.n_classes:
        raise ConfigurationError(
            f"teacher predicts {teacher.n_classes} classes, student has {model.config.n_classes}"
        )
    rng = np.random.default_rng(seed)
    opt = AdamW([{"params": weight_params(model), "lr": lr, "weight_decay": weight_decay}])
    model.train()
    history = []
    for epoch in range(epochs):
        total, n = 0.0, 0
        for images, labels in iterate_batches(data, batch_size, rng):
            logits = forward(model, images, mode=mode)
            loss = nx.cross_entropy(logits, labels)
            if lam_dist > 0:
                loss = loss + lam_dist * nx.cross_entropy(logits, teacher.predict(images))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.value) * len(labels)
            n += len(labels)
        history.append(total / n)
        if log:
            log(f"epoch={epoch} loss={history[-1]:.6f}")
    return history


def finetune(model: ViTModel, data: Dataset, teacher: TeacherHandle | None = None,
             lam_dist: float = 1.0, epochs: int = 13, lr: float = 1e-4, batch_size: int = 32,
             seed: int = 0, weight_decay: float = 0.0, log=None) -> ViTModel:
    """Fine-tune a materialised model with optional hard-label distillation."""
    train(model, data, epochs, lr, batch_size, seed, "frozen", teacher, lam_dist, weight_decay, log)
    return model


def evaluate(model: ViTModel, data: Dataset, batch_size: int = 256,
             mode: str = "frozen") -> tuple[float, float]:
    """Top-1 and top-5 accuracy with batch norm in inference mode."""
    was = model.training
    model.eval()
    hit1 = hit5 = 0
    with nx.no_grad():
        for images, labels in iterate_batches(data, batch_size):
            logits = forward(model, images, mode=mode).value
            top = np.argsort(-logits, axis=1, kind="stable")[:, :5]
            hit1 += int((top[:, 0] == labels).sum())
            hit5 += int((top == labels[:, None]).any(axis=1).sum())
    model.train(was)
    return hit1 / len(data), hit5 / len(data)


# ---------------------------------------------------------------------------
# checkpoints

def structure_of(model: ViTModel) -> list[dict]:
    out = []
    for blk in model.blocks:
        attn = "umsa" if isinstance(blk.attn, UmsaParams) else attn_kind(blk)
        out.append({"attn": attn, "ffn": "unified" if blk.ffn.theta is not None else "plain",
                    "hidden": blk.ffn.hidden})
    return out


def save(model: ViTModel, path: str | Path, descriptor: ArchitectureDescriptor | None = None,
         provenance: dict | None = None) -> None:
    tensors = {n: (v.value if isinstance(v, Var) else v) for n, v in model.named_tensors().items()}
    meta = {
        "config": model.config.to_dict(),
        "structure": structure_of(model),
        "descriptor": descriptor.to_json() if descriptor is not None else "dense",
        "provenance": provenance or {},
        "tensors": list(tensors),
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    mbytes = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(mbytes)))
    buf.write(mbytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


@dataclass
class Checkpoint:
    model: ViTModel
    descriptor: ArchitectureDescriptor | None
    provenance: dict
    meta: dict


def load(path: str | Path) -> Checkpoint:
    """Read and validate a checkpoint; raises FormatError / IntegrityError."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic", 0)
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    (mlen,) = r.unpack("<Q", "metadata length")
    at = r.pos
    try:
        meta = json.loads(r.take(mlen, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"metadata is not JSON: {e}", at) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        at = r.pos
        (nlen,) = r.unpack("<I", "name length")
        name = r.take(nlen, "name").decode(errors="replace")
        (rank,) = r.unpack("<I", "rank")
        shape = r.unpack(f"<{rank}Q", "extents")
        size = int(np.prod(shape)) if rank else 1
        payload = r.take(4 * size, f"payload of {name!r}")
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}", at)
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last tensor", r.pos)
    expected = meta.get("tensors", [])
    if sorted(expected) != sorted(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise FormatError(f"tensor inventory mismatch: missing {missing}, unexpected {extra}")
    model = _rebuild(meta, tensors)
    desc = None
    if meta["descriptor"] != "dense":
        desc = ArchitectureDescriptor.from_json(meta["descriptor"])
        verify_descriptor_totals(model, desc)
    return Checkpoint(model, desc, meta.get("provenance", {}), meta)


def verify_descriptor_totals(model: ViTModel, desc: ArchitectureDescriptor) -> None:
    table = build_cost_table(model.config)
    flops = table.hard_total([b.umsa for b in desc.blocks], [len(b.ffn_dims) for b in desc.blocks])
    params = count_params(model, desc)
    if flops != desc.flops or params != desc.params:
        raise IntegrityError(
            f"descriptor totals (flops={desc.flops}, params={desc.params}) do not match "
            f"recomputed (flops={flops}, params={params})"
        )


def _rebuild(meta: dict, t: dict[str, np.ndarray]) -> ViTModel:
    cfg_d = dict(meta["config"])
    cfg_d["kernels"] = tuple(cfg_d["kernels"])
    cfg = ModelConfig(**cfg_d)

    def v(name):
        try:
            return Var(t[name].copy(), requires_grad=True)
        except KeyError:
            raise FormatError(f"missing tensor {name!r}") from None

    def bn(prefix, c):
        st = BatchNormState(c)
        st.running_mean = t[f"{prefix}.running_mean"].copy()
        st.running_var = t[f"{prefix}.running_var"].copy()
        return st

    blocks = []
    for i, s in enumerate(meta["structure"]):
        p = f"blocks.{i}."
        kind = s["attn"]
        if kind == "umsa":
            c_h = t[p + "attn.W_val"].shape[2]
            attn = UmsaParams(
                **{n: v(p + "attn." + n) for n in
                   ("W_qry", "W_key", "W_val", "W_o", "b_qry", "b_key", "b_val", "b_o")},
                z={k: v(f"{p}attn.z{k}") for k in cfg.kernels},
                theta=v(p + "attn.theta"),
                bn_gamma={k: v(f"{p}attn.bn{k}.gamma") for k in cfg.kernels},
                bn_beta={k: v(f"{p}attn.bn{k}.beta") for k in cfg.kernels},
                bn_state={k: bn(f"{p}attn.bn{k}", c_h) for k in cfg.kernels},
                kernels=cfg.kernels,
            )
        elif kind == "msa":
            attn = MsaLayer(**{n: v(p + "attn." + n) for n in
                               ("W_qry", "W_key", "W_val", "W_o", "b_qry", "b_key", "b_val", "b_o")})
        elif kind == "skip":
            attn = None
        elif kind.startswith("conv"):
            W = v(p + "attn.W")
            attn = BConvLayer(
                k=W.shape[0], W=W, bias_taps=v(p + "attn.bias_taps"),
                W_o_bar=v(p + "attn.W_o_bar"), b_o=v(p + "attn.b_o"),
                bn_gamma=v(p + "attn.bn.gamma"), bn_beta=v(p + "attn.bn.beta"),
                bn_state=bn(p + "attn.bn", W.shape[3]),
            )
        else:
            raise FormatError(f"block {i}: unknown attention kind {kind!r}")
        ffn = UffnParams(
            W_fc1=v(p + "ffn.W_fc1"), b_fc1=v(p + "ffn.b_fc1"),
            W_fc2=v(p + "ffn.W_fc2"), b_fc2=v(p + "ffn.b_fc2"),
            theta=v(p + "ffn.theta") if s["ffn"] == "unified" else None,
        )
        blocks.append(Block(attn, ffn, v(p + "ln1.gamma"), v(p + "ln1.beta"),
                            v(p + "ln2.gamma"), v(p + "ln2.beta")))
    return ViTModel(
        config=cfg, patch_w=v("patch.w"), patch_b=v("patch.b"), pos=v("pos"), blocks=blocks,
        head_w=v("head.w"), head_b=v("head.b"),
        cls=v("cls") if cfg.class_token else None,
        norm_g=v("norm.gamma") if cfg.pre_norm else None,
        norm_b=v("norm.beta") if cfg.pre_norm else None,
    )


def dense_descriptor(model: ViTModel) -> ArchitectureDescriptor:
    """Descriptor that keeps every block as attention with full FFN width."""
    c = model.config.embed_dim
    blocks = [BlockChoice("msa", list(range(b.ffn.hidden)), b.ffn.hidden / c)
              for b in model.blocks]
    return ArchitectureDescriptor.with_totals(blocks, model)


__all__ = [
    "Checkpoint", "FormatError", "IntegrityError", "TeacherHandle", "apply_descriptor",
    "dense_descriptor", "evaluate", "finetune", "freeze", "load", "materialize", "save", "train",
]

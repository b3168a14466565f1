"""Plain-numpy re-implementations used as oracles by the tests."""
import numpy as np
from scipy.special import erf


def gelu(x):
    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


def layernorm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def attention(X, p):
    """Per-head loop with an explicit softmax; ``p`` exposes W_*/b_* Vars."""
    W = {n: getattr(p, n).value for n in ("W_qry", "W_key", "W_val", "W_o")}
    b = {n: getattr(p, n).value for n in ("b_qry", "b_key", "b_val", "b_o")}
    out = np.zeros(X.shape[:-1] + (W["W_o"].shape[2],)) + b["b_o"]
    c_h = W["W_qry"].shape[2]
    for h in range(W["W_qry"].shape[1]):
        q = X @ W["W_qry"][:, h] + b["b_qry"][h]
        k = X @ W["W_key"][:, h] + b["b_key"][h]
        v = X @ W["W_val"][:, h] + b["b_val"][h]
        s = q @ np.swapaxes(k, -1, -2) / np.sqrt(c_h)
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        out = out + (a @ v) @ W["W_o"][:, h]
    return out


def ffn(X, f, keep=None):
    """Loop over hidden units: sum_t GeLU(X w1_t + b1_t) w2_t + b2."""
    W1, b1, W2, b2 = (v.value for v in (f.W_fc1, f.b_fc1, f.W_fc2, f.b_fc2))
    keep = range(W1.shape[1]) if keep is None else keep
    out = np.zeros(X.shape[:-1] + (W2.shape[1],)) + b2
    for t in keep:
        out = out + gelu(X @ W1[:, t] + b1[t])[..., None] * W2[t]
    return out


def dense_vit(model, images):
    """Dense forward of a freshly built model: every block is MSA + full FFN."""
    cfg = model.config
    B, p = images.shape[0], cfg.patch_size
    g = cfg.image_size // p
    patches = images.reshape(B, g, p, g, p, cfg.in_chans).transpose(0, 1, 3, 2, 4, 5)
    X = patches.reshape(B, g * g, -1) @ model.patch_w.value + model.patch_b.value
    if model.cls is not None:
        X = np.concatenate([np.broadcast_to(model.cls.value, (B, 1, cfg.embed_dim)), X], 1)
    X = X + model.pos.value
    for blk in model.blocks:
        ln = lambda x, g_, b_: layernorm(x, g_.value, b_.value)  # noqa: E731
        if cfg.pre_norm:
            X = X + attention(ln(X, blk.ln1_g, blk.ln1_b), blk.attn)
            X = X + ffn(ln(X, blk.ln2_g, blk.ln2_b), blk.ffn)
        else:
            X = ln(X + attention(X, blk.attn), blk.ln1_g, blk.ln1_b)
            X = ln(X + ffn(X, blk.ffn), blk.ln2_g, blk.ln2_b)
    if model.norm_g is not None:
        X = layernorm(X, model.norm_g.value, model.norm_b.value)
    pooled = X[:, 0] if model.cls is not None else X.mean(1)
    return pooled @ model.head_w.value + model.head_b.value

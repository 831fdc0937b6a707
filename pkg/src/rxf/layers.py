"""Neural layers composed from autograd primitives.

Everything here is a pure function of (inputs, parameter tensors); parameter
creation and naming live with the encoder definitions. Attention supports an
optional key mask so padded phrase slots never influence real tokens.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, concat

MASK_NEG = 1e9  # additive logit penalty for masked attention keys


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x [..., d_in] @ w [d_in, d_out] (+ b)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight rows {w.shape[0]}")
    out = x @ w
    if b is not None:
        out = out + b
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + bias


def mlp2(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer GELU MLP, the projection head used throughout the encoders."""
    return linear(linear(x, w1, b1).gelu(), w2, b2)


def self_attention(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    n_heads: int,
    key_mask: np.ndarray | None = None,
) -> Tensor:
    """Multi-head self-attention over x [batch, tokens, d_model].

    key_mask is a bool [batch, tokens] array; False positions are dropped as
    attention keys (their weight is exactly zero after softmax). Rows whose
    keys are all masked fall back to uniform weights; callers are expected to
    mask those outputs away downstream.
    """
    if x.ndim != 3:
        raise ValueError(f"self_attention expects [batch, tokens, d_model], got shape {x.shape}")
    batch, tokens, d_model = x.shape
    if d_model % n_heads != 0:
        raise ValueError(f"head count {n_heads} does not divide model width {d_model}")
    d_head = d_model // n_heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(batch, tokens, n_heads, d_head).swapaxes(1, 2)

    q = split(x @ wq)
    k = split(x @ wk)
    v = split(x @ wv)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d_head))
    if key_mask is not None:
        penalty = np.where(key_mask, 0.0, -MASK_NEG).astype(x.dtype)
        scores = scores + penalty[:, None, None, :]
    attn = scores.softmax(axis=-1)
    out = (attn @ v).swapaxes(1, 2).reshape(batch, tokens, d_model)
    return out @ wo


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 counting only True positions; all-False rows give zeros."""
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise ValueError(f"masked_mean: mask shape {mask.shape} does not match tokens {x.shape[:2]}")
    weights = mask.astype(x.dtype)
    counts = np.maximum(weights.sum(axis=1, keepdims=True), 1.0)
    pooled = (x * Tensor(weights[:, :, None])).sum(axis=1)
    return pooled * Tensor(1.0 / counts)


def _row_normalize(x: Tensor, side: str) -> Tensor:
    norm_sq = (x * x).sum(axis=-1, keepdims=True)
    bad = np.flatnonzero(norm_sq.data <= 0.0)
    if bad.size:
        raise ValueError(f"zero-norm embedding in {side} at row {int(bad[0])}")
    return x / norm_sq.sqrt()


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between rows of a [n, d] and b [m, d].

    Output is clamped to [-1, 1] so float roundoff cannot push it outside.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"cosine_matrix: incompatible shapes {a.shape} and {b.shape}")
    an = _row_normalize(a, "lhs")
    bn = _row_normalize(b, "rhs")
    return (an @ bn.swapaxes(0, 1)).clip(-1.0, 1.0)


def cosine_pair(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors, clamped to [-1, 1]."""
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ValueError(f"cosine_pair: incompatible shapes {u.shape} and {v.shape}")
    return cosine_matrix(u.reshape(1, -1), v.reshape(1, -1)).reshape(())


def transformer_block(
    x: Tensor,
    p: dict[str, Tensor],
    n_heads: int,
    key_mask: np.ndarray | None = None,
) -> Tensor:
    """Pre-norm transformer encoder block: attention then GELU MLP, both residual."""
    h = layer_norm(x, p["ln1_g"], p["ln1_b"])
    x = x + self_attention(h, p["wq"], p["wk"], p["wv"], p["wo"], n_heads, key_mask)
    h = layer_norm(x, p["ln2_g"], p["ln2_b"])
    return x + mlp2(h, p["ffn_w1"], p["ffn_b1"], p["ffn_w2"], p["ffn_b2"])

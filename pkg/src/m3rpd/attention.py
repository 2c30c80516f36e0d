"""Self-attention per modality and two-way cross-modality attention.

Single-head scaled dot-product attention with a residual connection and no
positional encoding, so self-attention is exactly permutation-equivariant
over tokens. Tokens are the flattened positions of a backbone feature map.
"""
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, concat, matmul, mean, mul, reshape, softmax, transpose
from .tensor.nn import Dense, Module, glorot_uniform


@dataclass
class TokenGrid:
    tokens: Tensor  # (B, n, d)
    spatial_shape: tuple

    @classmethod
    def from_map(cls, fmap):
        b, h, w, d = fmap.shape
        return cls(reshape(fmap, (b, h * w, d)), (h, w))


@dataclass
class AttentionOutput:
    distilled: Tensor  # (B, n, d)
    pooled: Tensor  # (B, d)
    weights: Tensor  # (B, n_q, n_kv), rows sum to 1


class SelfAttention(Module):
    def __init__(self, seed, name, d, d_k=None, dtype=np.float32):
        d_k = d if d_k is None else d_k
        self.wq = glorot_uniform(seed, f"{name}.wq", (d, d_k), d, d_k, dtype)
        self.wk = glorot_uniform(seed, f"{name}.wk", (d, d_k), d, d_k, dtype)
        self.wv = glorot_uniform(seed, f"{name}.wv", (d, d), d, d, dtype)

    @property
    def dim(self):
        return self.wq.shape[0]


def _attend(q_tokens, kv_tokens, wq, wk, wv):
    q = matmul(q_tokens, wq)
    k = matmul(kv_tokens, wk)
    v = matmul(kv_tokens, wv)
    scores = mul(matmul(q, transpose(k)), 1.0 / np.sqrt(wq.shape[1]))
    weights = softmax(scores, axis=-1)
    return q_tokens + matmul(weights, v), weights


def self_attention(grid, params):
    """Distill one modality's tokens; returns distilled tokens, their mean, and weights."""
    x = grid.tokens if isinstance(grid, TokenGrid) else grid
    if x.ndim != 3:
        raise ShapeError(f"self_attention: tokens must be (batch, n, d), got {x.shape}")
    if x.shape[-1] != params.dim:
        raise ShapeError(f"self_attention: token dim {x.shape[-1]} != attention dim {params.dim}")
    distilled, weights = _attend(x, x, params.wq, params.wk, params.wv)
    return AttentionOutput(distilled, mean(distilled, axis=1), weights)


class CrossModalityAttention(Module):
    """Parameters for both attention directions plus the fusing projection."""

    def __init__(self, seed, name, d, d_fused=None, dtype=np.float32):
        d_fused = d if d_fused is None else d_fused
        self.ab = SelfAttention(seed, f"{name}.ab", d, dtype=dtype)
        self.ba = SelfAttention(seed, f"{name}.ba", d, dtype=dtype)
        self.proj = Dense(seed, f"{name}.proj", 2 * d, d_fused, dtype)

    @property
    def dim(self):
        return self.ab.dim


@dataclass
class CrossOutput:
    fused: Tensor  # (B, d_fused)
    pooled_ab: Tensor  # a queries b, mean over a's tokens
    pooled_ba: Tensor
    weights_ab: Tensor
    weights_ba: Tensor


def cross_modality_attention(a, b, params):
    """Fuse two modalities' self-attention outputs.

    Direction ``ab`` takes queries from ``a`` and keys/values from ``b``;
    ``ba`` is the reverse. Each direction is mean-pooled over its query tokens
    and the two pooled vectors are concatenated and projected.
    """
    xa, xb = a.distilled, b.distilled
    d = params.dim
    if xa.shape[-1] != d or xb.shape[-1] != d:
        raise ShapeError(f"cross_modality_attention: token dims {xa.shape[-1]}, {xb.shape[-1]} != {d}")
    if xa.shape[0] != xb.shape[0]:
        raise ShapeError(f"cross_modality_attention: batch sizes differ, {xa.shape[0]} vs {xb.shape[0]}")
    out_ab, w_ab = _attend(xa, xb, params.ab.wq, params.ab.wk, params.ab.wv)
    out_ba, w_ba = _attend(xb, xa, params.ba.wq, params.ba.wk, params.ba.wv)
    p_ab, p_ba = mean(out_ab, axis=1), mean(out_ba, axis=1)
    fused = params.proj(concat([p_ab, p_ba], axis=-1))
    return CrossOutput(fused, p_ab, p_ba, w_ab, w_ba)

"""Multi-head attention and the transformer blocks built from it.

Blocks follow the post-norm convention: each residual sum is followed by
layer normalization, and the feed-forward part is its own residually-wrapped
sub-layer. The cross block runs self-attention over its inputs first, then
attends into the conditioning tokens with the normalized result as query.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from semcap.tensor import (ContractError, ShapeError, Tensor, add, concat,
                           gelu, layer_norm, matmul, scale, softmax,
                           transpose, xavier_uniform)

MASK_FILL = -1e9  # additive score for masked key positions


@dataclass
class AttentionParams:
    """Per-head query/key/value projections plus the output projection."""

    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor

    @property
    def n_heads(self) -> int:
        return len(self.wq)

    @property
    def head_dim(self) -> int:
        return self.wq[0].shape[1]

    def named(self, prefix: str):
        for i in range(self.n_heads):
            yield f"{prefix}.wq{i}", self.wq[i]
            yield f"{prefix}.wk{i}", self.wk[i]
            yield f"{prefix}.wv{i}", self.wv[i]
        yield f"{prefix}.wo", self.wo


@dataclass
class BlockParams:
    """One transformer block: attention, feed-forward, and their norms.

    `cross` and the cross norm pair are present only for cross blocks.
    """

    attn: AttentionParams
    ln_attn_g: Tensor
    ln_attn_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln_ffn_g: Tensor
    ln_ffn_b: Tensor
    cross: AttentionParams | None = None
    ln_cross_g: Tensor | None = None
    ln_cross_b: Tensor | None = None

    def named(self, prefix: str):
        yield from self.attn.named(f"{prefix}.attn")
        yield f"{prefix}.ln_attn_g", self.ln_attn_g
        yield f"{prefix}.ln_attn_b", self.ln_attn_b
        if self.cross is not None:
            yield from self.cross.named(f"{prefix}.cross")
            yield f"{prefix}.ln_cross_g", self.ln_cross_g
            yield f"{prefix}.ln_cross_b", self.ln_cross_b
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2
        yield f"{prefix}.ln_ffn_g", self.ln_ffn_g
        yield f"{prefix}.ln_ffn_b", self.ln_ffn_b


def init_attention(rng, d_model: int, n_heads: int, dtype=np.float32
                   ) -> AttentionParams:
    if d_model % n_heads != 0:
        raise ShapeError(f"head count {n_heads} must divide width {d_model}")
    dh = d_model // n_heads

    def p(fi, fo):
        return Tensor(xavier_uniform(rng, fi, fo, dtype), requires_grad=True)

    return AttentionParams(
        wq=[p(d_model, dh) for _ in range(n_heads)],
        wk=[p(d_model, dh) for _ in range(n_heads)],
        wv=[p(d_model, dh) for _ in range(n_heads)],
        wo=p(n_heads * dh, d_model),
    )


def init_block(rng, d_model: int, n_heads: int, cross: bool = False,
               ffn_mult: int = 4, dtype=np.float32) -> BlockParams:
    hidden = ffn_mult * d_model

    def p(fi, fo):
        return Tensor(xavier_uniform(rng, fi, fo, dtype), requires_grad=True)

    def ones():
        return Tensor(np.ones((1, d_model), dtype=dtype), requires_grad=True)

    def zeros(width=None):
        return Tensor(np.zeros((1, width or d_model), dtype=dtype),
                      requires_grad=True)

    return BlockParams(
        attn=init_attention(rng, d_model, n_heads, dtype),
        ln_attn_g=ones(), ln_attn_b=zeros(),
        w1=p(d_model, hidden), b1=zeros(hidden),
        w2=p(hidden, d_model), b2=zeros(),
        ln_ffn_g=ones(), ln_ffn_b=zeros(),
        cross=init_attention(rng, d_model, n_heads, dtype) if cross else None,
        ln_cross_g=ones() if cross else None,
        ln_cross_b=zeros() if cross else None,
    )


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor,
                         params: AttentionParams,
                         mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """Scaled dot-product attention with per-head projections.

    `mask` is a boolean (n_q, n_k) array, True where a query may attend;
    masked scores receive a large negative additive constant before the
    softmax, which zeroes their weights exactly after exponentiation.
    """
    d = params.wq[0].shape[0]
    if q.shape[1] != d or k.shape[1] != d or v.shape[1] != d:
        raise ShapeError(
            f"attention width mismatch: q {q.shape}, k {k.shape}, v {v.shape} "
            f"vs projections of width {d}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key/value counts differ: {k.shape} vs {v.shape}")
    offset = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (q.shape[0], k.shape[0]):
            raise ShapeError(
                f"mask shape {mask.shape} does not match scores "
                f"({q.shape[0]}, {k.shape[0]})")
        if not mask.any(axis=1).all():
            raise ContractError("attention mask leaves a query row with no "
                                "admissible key")
        offset = np.where(mask, 0.0, MASK_FILL).astype(q.dtype)
    inv_sqrt_d = 1.0 / math.sqrt(params.head_dim)
    heads = []
    weights = []
    for i in range(params.n_heads):
        qh = matmul(q, params.wq[i])
        kh = matmul(k, params.wk[i])
        vh = matmul(v, params.wv[i])
        scores = scale(matmul(qh, transpose(kh)), inv_sqrt_d)
        if offset is not None:
            scores = add(scores, offset)
        w = softmax(scores)
        heads.append(matmul(w, vh))
        if return_weights:
            weights.append(w.data)
    out = matmul(concat(heads, axis=1), params.wo)
    if return_weights:
        return out, weights
    return out


def feed_forward(x: Tensor, p: BlockParams) -> Tensor:
    return add(matmul(gelu(add(matmul(x, p.w1), p.b1)), p.w2), p.b2)


def encoder_block(x: Tensor, p: BlockParams) -> Tensor:
    """Self-attention sub-layer then feed-forward sub-layer, post-norm."""
    a = layer_norm(add(x, multi_head_attention(x, x, x, p.attn)),
                   p.ln_attn_g, p.ln_attn_b)
    return layer_norm(add(a, feed_forward(a, p)), p.ln_ffn_g, p.ln_ffn_b)


def cross_block(x: Tensor, y: Tensor, p: BlockParams) -> Tensor:
    """Self-attention over x, then cross-attention into y, then feed-forward."""
    if p.cross is None:
        raise ContractError("cross_block needs a block built with cross=True")
    s = layer_norm(add(x, multi_head_attention(x, x, x, p.attn)),
                   p.ln_attn_g, p.ln_attn_b)
    c = layer_norm(add(s, multi_head_attention(s, y, y, p.cross)),
                   p.ln_cross_g, p.ln_cross_b)
    return layer_norm(add(c, feed_forward(c, p)), p.ln_ffn_g, p.ln_ffn_b)


def causal_mask(n: int) -> np.ndarray:
    """Lower-triangular boolean mask: position i attends to positions <= i."""
    return np.tril(np.ones((n, n), dtype=bool))

"""Auto-regressive caption decoder and search procedures.

Each decoder block attends three ways with the same query (the block input):
masked self-attention over the generated prefix, cross-attention over the
visual tokens, and cross-attention over the semantic tokens. The two cross
contexts are summed, then a per-channel sigmoid gate interpolates between
the textual and the combined cross context before the residual, norm, and
feed-forward sub-layer.

Beam search is length-capped with no length normalization: hypotheses freeze
on the end token, the answer is the finished hypothesis with the highest
cumulative log-probability, ties broken by earlier completion then
lexicographic token order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from semcap import attention as A
from semcap.tensor import (ContractError, ShapeError, Tensor, add, concat,
                           gather_rows, gelu, layer_norm, log_softmax, matmul,
                           mul, narrow, pick, rsub, scale, sigmoid, sum_all,
                           xavier_uniform)


@dataclass
class DecoderBlockParams:
    self_attn: A.AttentionParams
    vis_attn: A.AttentionParams
    sem_attn: A.AttentionParams
    w_gate: Tensor                  # (2 * d_model, d_model)
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln_fuse_g: Tensor
    ln_fuse_b: Tensor
    ln_ffn_g: Tensor
    ln_ffn_b: Tensor

    def named(self, prefix):
        yield from self.self_attn.named(f"{prefix}.self")
        yield from self.vis_attn.named(f"{prefix}.vis")
        yield from self.sem_attn.named(f"{prefix}.sem")
        yield f"{prefix}.w_gate", self.w_gate
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2
        yield f"{prefix}.ln_fuse_g", self.ln_fuse_g
        yield f"{prefix}.ln_fuse_b", self.ln_fuse_b
        yield f"{prefix}.ln_ffn_g", self.ln_ffn_g
        yield f"{prefix}.ln_ffn_b", self.ln_ffn_b


def init_decoder_block(rng, d_model, n_heads, ffn_mult=4, dtype=np.float32
                       ) -> DecoderBlockParams:
    def p(fi, fo):
        return Tensor(xavier_uniform(rng, fi, fo, dtype), requires_grad=True)

    def ones():
        return Tensor(np.ones((1, d_model), dtype=dtype), requires_grad=True)

    def zeros(width=None):
        return Tensor(np.zeros((1, width or d_model), dtype=dtype),
                      requires_grad=True)

    return DecoderBlockParams(
        self_attn=A.init_attention(rng, d_model, n_heads, dtype),
        vis_attn=A.init_attention(rng, d_model, n_heads, dtype),
        sem_attn=A.init_attention(rng, d_model, n_heads, dtype),
        w_gate=p(2 * d_model, d_model),
        w1=p(d_model, ffn_mult * d_model), b1=zeros(ffn_mult * d_model),
        w2=p(ffn_mult * d_model, d_model), b2=zeros(),
        ln_fuse_g=ones(), ln_fuse_b=zeros(),
        ln_ffn_g=ones(), ln_ffn_b=zeros(),
    )


@dataclass
class WordEmbeddings:
    """Word and position tables plus the output projection to vocab logits."""

    table: Tensor                  # (vocab_size, d_model)
    positions: Tensor              # (max_len + 1, d_model)
    out_w: Tensor                  # (d_model, vocab_size)
    out_b: Tensor                  # (1, vocab_size)

    @property
    def max_positions(self):
        return self.positions.shape[0]

    def named(self, prefix):
        yield f"{prefix}.table", self.table
        yield f"{prefix}.positions", self.positions
        yield f"{prefix}.out_w", self.out_w
        yield f"{prefix}.out_b", self.out_b


def init_word_embeddings(rng, vocab_size, d_model, max_len, dtype=np.float32
                         ) -> WordEmbeddings:
    def p(fi, fo):
        return Tensor(xavier_uniform(rng, fi, fo, dtype), requires_grad=True)

    return WordEmbeddings(
        table=p(vocab_size, d_model),
        positions=p(max_len + 1, d_model),
        out_w=p(d_model, vocab_size),
        out_b=Tensor(np.zeros((1, vocab_size), dtype=dtype),
                     requires_grad=True),
    )


def masked_context(h_layer: Tensor, t: int, params: A.AttentionParams
                   ) -> Tensor:
    """Textual context of position t: attention of row t over rows 0..t."""
    if not 0 <= t < h_layer.shape[0]:
        raise ContractError(f"query index {t} outside prefix of length "
                            f"{h_layer.shape[0]}")
    q = narrow(h_layer, 0, t, 1)
    kv = narrow(h_layer, 0, 0, t + 1)
    return A.multi_head_attention(q, kv, kv, params)


def fused_cross_context(h_t: Tensor, visual: Tensor, semantic: Tensor,
                        vis_attn: A.AttentionParams,
                        sem_attn: A.AttentionParams) -> Tensor:
    """Sum of the visual and semantic cross-attention, sharing the query."""
    if visual.shape[0] < 1 or semantic.shape[0] < 1:
        raise ContractError("cross context needs non-empty token sets")
    return add(A.multi_head_attention(h_t, visual, visual, vis_attn),
               A.multi_head_attention(h_t, semantic, semantic, sem_attn))


def gated_fusion(h_text: Tensor, h_cross: Tensor, residual: Tensor,
                 block: DecoderBlockParams) -> Tensor:
    """Per-channel sigmoid interpolation between the textual and cross
    contexts, then residual, norm, and the feed-forward sub-layer."""
    g = sigmoid(matmul(concat([h_cross, h_text], axis=1), block.w_gate))
    fused = add(mul(g, h_text), mul(rsub(g, 1.0), h_cross))
    z = layer_norm(add(residual, fused), block.ln_fuse_g, block.ln_fuse_b)
    ffn = add(matmul(gelu(add(matmul(z, block.w1), block.b1)), block.w2),
              block.b2)
    return layer_norm(add(z, ffn), block.ln_ffn_g, block.ln_ffn_b)


def decoder_layer(h_layer: Tensor, visual: Tensor, semantic: Tensor,
                  block: DecoderBlockParams, mask: np.ndarray) -> Tensor:
    """Whole-prefix version of one decoder block (teacher forcing)."""
    h_text = A.multi_head_attention(h_layer, h_layer, h_layer,
                                    block.self_attn, mask=mask)
    h_cross = fused_cross_context(h_layer, visual, semantic,
                                  block.vis_attn, block.sem_attn)
    return gated_fusion(h_text, h_cross, h_layer, block)


def decoder_forward(prefix_ids, visual: Tensor, semantic: Tensor,
                    emb: WordEmbeddings, blocks) -> Tensor:
    """Logits for every position of the prefix (causal, teacher-forced)."""
    n = len(prefix_ids)
    if n < 1:
        raise ContractError("decoder needs a non-empty prefix")
    if n > emb.max_positions:
        raise ContractError(
            f"prefix of length {n} exceeds the maximum of {emb.max_positions}")
    h = add(gather_rows(emb.table, list(prefix_ids)),
            gather_rows(emb.positions, list(range(n))))
    mask = A.causal_mask(n)
    for blk in blocks:
        h = decoder_layer(h, visual, semantic, blk, mask)
    return add(matmul(h, emb.out_w), emb.out_b)


def caption_loss(logits: Tensor, target_ids, pad_id: int) -> Tensor:
    """Mean negative log-likelihood of the targets, PAD positions excluded."""
    targets = list(target_ids)
    if logits.shape[0] != len(targets):
        raise ShapeError(f"{logits.shape[0]} logit rows vs "
                         f"{len(targets)} targets")
    rows = [i for i, t in enumerate(targets) if t != pad_id]
    if not rows:
        raise ContractError("caption has no non-pad targets")
    lsm = log_softmax(logits)
    picked = pick(lsm, rows, [targets[i] for i in rows])
    return scale(sum_all(picked), -1.0 / len(rows))


# ------------------------------------------------------------------ search

def greedy_decode(next_log_probs, max_len: int, eos_id: int, banned_ids=()):
    """Argmax decoding; ties prefer the end token, then the lowest token id.

    `next_log_probs` maps a tuple of generated token ids to the log-prob
    vector of the next token.
    """
    banned = frozenset(banned_ids)
    tokens = ()
    for _ in range(max_len):
        lp = next_log_probs(tokens)
        best_key, best_tok = None, None
        for tok in range(len(lp)):
            if tok in banned:
                continue
            key = (-lp[tok], 0 if tok == eos_id else 1, tok)
            if best_key is None or key < best_key:
                best_key, best_tok = key, tok
        if best_tok == eos_id:
            break
        tokens += (best_tok,)
    return list(tokens)


def beam_search(next_log_probs, beam_size: int, max_len: int, eos_id: int,
                banned_ids=()):
    """Length-capped beam search over cumulative log-probability.

    Hypotheses emitting the end token freeze but keep competing in the beam;
    hypotheses alive at the cap count as completed there. The result is the
    best hypothesis under (-log p, completion step, token order).
    """
    if beam_size < 1 or max_len < 1:
        raise ContractError("beam size and maximum length must be >= 1")
    banned = frozenset(banned_ids)
    never = max_len + 1  # completion step for hypotheses alive at the cap
    hyps = [(0.0, never, (), False)]  # (logp, finish step, tokens, finished)
    for step in range(max_len):
        candidates = []
        active = False
        for logp, fstep, tokens, finished in hyps:
            if finished:
                candidates.append((logp, fstep, tokens, True))
                continue
            active = True
            lp = next_log_probs(tokens)
            for tok in range(len(lp)):
                if tok in banned:
                    continue
                if tok == eos_id:
                    candidates.append((logp + lp[tok], step, tokens, True))
                else:
                    candidates.append((logp + lp[tok], never,
                                       tokens + (tok,), False))
        if not active:
            break
        candidates.sort(key=lambda h: (-h[0], h[1], h[2]))
        hyps = candidates[:beam_size]
    best = min(hyps, key=lambda h: (-h[0], h[1], h[2]))
    return list(best[2])

"""Visual encoding, semantic cue comprehension, proxy losses, and ranking.

The visual encoder contextualizes a global token plus grid tokens and
replaces the global with a learned mix of every layer's global output. The
comprehender concatenates learnable slot queries with embedded cue words and
runs cross blocks against the visual tokens; a shared head then classifies
each cue token over the semantic vocabulary (softmax, one extra class for
"irrelevant") and each slot token as a multi-label detector (sigmoid,
max-pooled across slots). The ranker gives every semantic token a soft
position: attention weights over a learnable position codebook, the attended
encoding added back onto the token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from semcap import attention as A
from semcap.retrieval import SemanticCueSet, SemanticVocabulary
from semcap.tensor import (ContractError, ShapeError, Tensor, add, clamp_min,
                           concat, gather_rows, log, log_softmax, matmul,
                           max_axis0, mul, narrow, pick, powc, rsub, scale,
                           sigmoid, softmax, sum_all, transpose)

LOG_EPS = 1e-8  # probability floor inside loss logarithms


@dataclass
class VisualTokens:
    """Encoded grid tokens behind a holistic global token (row 0)."""

    tokens: Tensor                 # (n_grid + 1, d_model)
    layer_globals: list            # (1, d_model) global output of each depth


def project_visual_inputs(global_feat: Tensor, grids: Tensor,
                          w: Tensor, b: Tensor) -> Tensor:
    """Affine-map raw features to model width; global token first."""
    if grids.shape[0] < 1:
        raise ContractError("need at least one grid feature")
    if global_feat.shape[1] != grids.shape[1]:
        raise ShapeError(
            f"global width {global_feat.shape} != grid width {grids.shape}")
    stacked = concat([global_feat, grids], axis=0)
    return add(matmul(stacked, w), b)


def encode_visual(v0: Tensor, blocks, w_c: Tensor) -> VisualTokens:
    """Run the encoder stack and assemble the final visual tokens.

    Every depth's global output (row 0), including the input itself, is
    concatenated and mixed by w_c into the holistic global that replaces the
    final layer's global row.
    """
    if not blocks:
        raise ContractError("visual encoder needs at least one block")
    x = v0
    globals_per_layer = [narrow(x, 0, 0, 1)]
    for blk in blocks:
        x = A.encoder_block(x, blk)
        globals_per_layer.append(narrow(x, 0, 0, 1))
    stacked = concat(globals_per_layer, axis=1)  # (1, (depth + 1) * d)
    if w_c.shape[0] != stacked.shape[1]:
        raise ShapeError(
            f"global mix weight {w_c.shape} does not accept "
            f"{stacked.shape[1]} concatenated features")
    holistic = matmul(stacked, w_c)
    grid_tokens = narrow(x, 0, 1, x.shape[0] - 1)
    return VisualTokens(tokens=concat([holistic, grid_tokens], axis=0),
                        layer_globals=globals_per_layer)


@dataclass
class SemanticTokens:
    """Comprehender outputs: slot tokens first, cue tokens after."""

    tokens: Tensor                 # (n_slots + n_cues, d_model)
    n_slots: int
    cue_indices: list              # vocabulary index per cue token

    @property
    def n_cues(self) -> int:
        return len(self.cue_indices)


def comprehend(cues: SemanticCueSet, vocab: SemanticVocabulary,
               slots: Tensor, cue_embed: Tensor, visual: VisualTokens,
               blocks) -> SemanticTokens:
    """Embed cue words, append them to the slot queries, and refine the whole
    set against the visual tokens with cross blocks. Cue order carries no
    positional information here; ordering enters only through the ranker."""
    for w in cues.words:
        if w not in vocab:
            raise ContractError(f"cue word {w!r} is outside the semantic "
                                "vocabulary")
    idx = [vocab.index[w] for w in cues.words]
    if idx:
        x = concat([slots, gather_rows(cue_embed, idx)], axis=0)
    else:
        x = slots
    for blk in blocks:
        x = A.cross_block(x, visual.tokens, blk)
    return SemanticTokens(tokens=x, n_slots=slots.shape[0], cue_indices=idx)


@dataclass
class SemanticPredictions:
    cue_log_probs: Tensor | None   # (n_cues, n_classes) rows log-softmaxed
    cue_probs: Tensor | None       # (n_cues, n_classes) rows sum to one
    slot_probs: Tensor             # (n_slots, n_classes) sigmoid entries
    pooled: Tensor                 # (1, n_classes) columnwise max over slots


def predict_semantics(tokens: SemanticTokens, head_w: Tensor, head_b: Tensor
                      ) -> SemanticPredictions:
    """Shared affine head over every semantic token; cue rows become
    single-label distributions, slot rows independent detectors whose
    columnwise max is the pooled multi-label prediction."""
    logits = add(matmul(tokens.tokens, head_w), head_b)
    slot_logits = narrow(logits, 0, 0, tokens.n_slots)
    slot_probs = sigmoid(slot_logits)
    pooled = max_axis0(slot_probs)
    if tokens.n_cues:
        cue_logits = narrow(logits, 0, tokens.n_slots, tokens.n_cues)
        cue_log_probs = log_softmax(cue_logits)
        cue_probs = softmax(cue_logits)
    else:
        cue_log_probs = None
        cue_probs = None
    return SemanticPredictions(cue_log_probs=cue_log_probs,
                               cue_probs=cue_probs,
                               slot_probs=slot_probs, pooled=pooled)


def make_cue_labels(cues: SemanticCueSet, gt_words: set,
                    vocab: SemanticVocabulary) -> list:
    """Per cue: its own vocabulary index when the word is actually in the
    image's ground-truth semantic words, else the irrelevant class."""
    labels = []
    for w in cues.words:
        if w not in vocab:
            raise ContractError(f"cue word {w!r} outside semantic vocabulary")
        labels.append(vocab.index[w] if w in gt_words else
                      vocab.irrelevant_index)
    return labels


def make_missing_labels(gt_words: set, cues: SemanticCueSet,
                        vocab: SemanticVocabulary) -> np.ndarray:
    """Multi-label target over the vocabulary: 1 for ground-truth words the
    cues missed; the irrelevant class is never a positive."""
    y = np.zeros(vocab.n_classes, dtype=np.float64)
    cue_set = set(cues.words)
    for w in gt_words:
        if w in vocab and w not in cue_set:
            y[vocab.index[w]] = 1.0
    return y


def loss_filter(preds: SemanticPredictions, labels) -> Tensor:
    """Mean cross-entropy of each cue row against its label; zero when the
    image has no cues."""
    if preds.cue_log_probs is None or len(labels) == 0:
        return Tensor(np.zeros((1, 1), dtype=preds.pooled.dtype))
    n = len(labels)
    picked = pick(preds.cue_log_probs, list(range(n)), list(labels))
    return scale(sum_all(picked), -1.0 / n)


def loss_missing(pooled: Tensor, y_missing: np.ndarray, gamma_pos: float,
                 gamma_neg: float, margin: float) -> Tensor:
    """Asymmetric multi-label loss on the pooled slot prediction.

    Positives are focal-weighted by (1 - p)^gamma_pos; negatives are first
    shifted down by the margin (p_m = max(p - margin, 0)) then weighted by
    p_m^gamma_neg. With both gammas and the margin at zero this is exactly
    binary cross-entropy.
    """
    y = Tensor(np.asarray(y_missing, dtype=pooled.dtype).reshape(1, -1))
    if y.shape[1] != pooled.shape[1]:
        raise ShapeError(f"label width {y.shape} does not match prediction "
                         f"{pooled.shape}")
    p = pooled
    pos = mul(y, mul(powc(rsub(p, 1.0), gamma_pos),
                     log(clamp_min(p, LOG_EPS))))
    p_m = clamp_min(add(p, -margin), 0.0) if margin else clamp_min(p, 0.0)
    neg = mul(rsub(y, 1.0), mul(powc(p_m, gamma_neg),
                                log(clamp_min(rsub(p_m, 1.0), LOG_EPS))))
    return scale(sum_all(add(pos, neg)), -1.0)


def loss_semantic(l_filter: Tensor, l_missing: Tensor) -> Tensor:
    return add(l_filter, l_missing)


@dataclass
class PositionAwareSemantics:
    tokens: Tensor                 # (n_tokens, d_model), token + soft position
    weights: np.ndarray            # (n_tokens, n_positions) attention weights
    attended: Tensor               # (n_tokens, d_model) attended encodings


def rank_semantics(tokens: SemanticTokens, codebook: Tensor
                   ) -> PositionAwareSemantics:
    """Soft-order every semantic token: softmax attention of the raw token
    over the position codebook, attended encoding added onto the token."""
    w = softmax(matmul(tokens.tokens, transpose(codebook)))
    p = matmul(w, codebook)
    return PositionAwareSemantics(tokens=add(tokens.tokens, p),
                                  weights=w.data, attended=p)

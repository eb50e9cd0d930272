"""The full captioner: visual encoder, cue comprehender, ranker, decoder.

One class owns every parameter tensor (insertion-ordered by name, which
fixes the checkpoint layout), the teacher-forced training losses with their
ablation switches, beam-search captioning, and a finite-difference check
over every trainable parameter of a small float64 instance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from semcap import decoder as D
from semcap import semantics as S
from semcap.attention import init_block
from semcap.config import RunConfig
from semcap.corpus import CorpusRecord, WordVocab
from semcap.retrieval import SemanticCueSet, SemanticVocabulary
from semcap.tensor import (NumericsError, Tensor, add, backward, grad_for,
                           recording, scale, xavier_uniform)


@dataclass
class LossBreakdown:
    """Scalar loss components of one step; the identities total =
    semantic + caption and semantic = cue_filter + missing hold exactly."""

    total: float
    caption: float
    cue_filter: float
    missing: float
    semantic: float

    @classmethod
    def from_parts(cls, caption, cue_filter, missing):
        semantic = cue_filter + missing
        return cls(total=semantic + caption, caption=caption,
                   cue_filter=cue_filter, missing=missing, semantic=semantic)


@dataclass
class TrainSample:
    """One (image, caption) pair with its mined cues and ground truth."""

    record: CorpusRecord
    caption_ids: list
    cues: SemanticCueSet
    gt_words: set


class Captioner:
    def __init__(self, cfg: RunConfig, word_vocab: WordVocab,
                 sem_vocab: SemanticVocabulary, dtype=np.float32):
        self.cfg = cfg
        self.word_vocab = word_vocab
        self.sem_vocab = sem_vocab
        self.dtype = dtype
        rng = np.random.default_rng([cfg.seed & 0x7FFFFFFF, 5])
        d = cfg.d_model

        def p(fi, fo):
            return Tensor(xavier_uniform(rng, fi, fo, dtype),
                          requires_grad=True)

        self.vis_w = p(cfg.feature_dim, d)
        self.vis_b = Tensor(np.zeros((1, d), dtype=dtype), requires_grad=True)
        self.encoder_blocks = [
            init_block(rng, d, cfg.n_heads, ffn_mult=cfg.ffn_mult, dtype=dtype)
            for _ in range(cfg.n_vis_blocks)]
        self.w_c = p((cfg.n_vis_blocks + 1) * d, d)
        self.slots = p(cfg.n_slots, d)
        self.cue_embed = p(max(sem_vocab.n_words, 1), d)
        self.comp_blocks = [
            init_block(rng, d, cfg.n_heads, cross=True,
                       ffn_mult=cfg.ffn_mult, dtype=dtype)
            for _ in range(cfg.n_sem_blocks)]
        self.head_w = p(d, sem_vocab.n_classes)
        self.head_b = Tensor(np.zeros((1, sem_vocab.n_classes), dtype=dtype),
                             requires_grad=True)
        self.codebook = p(cfg.effective_positions, d)
        self.emb = D.init_word_embeddings(rng, word_vocab.size, d,
                                          cfg.max_caption_len, dtype=dtype)
        self.decoder_blocks = [
            D.init_decoder_block(rng, d, cfg.n_heads, ffn_mult=cfg.ffn_mult,
                                 dtype=dtype)
            for _ in range(cfg.n_dec_blocks)]

    # ------------------------------------------------------------- params

    def named_parameters(self) -> dict:
        params = {"vis_proj.w": self.vis_w, "vis_proj.b": self.vis_b}
        for i, blk in enumerate(self.encoder_blocks):
            params.update(blk.named(f"enc{i}"))
        params["w_c"] = self.w_c
        params["slots"] = self.slots
        params["cue_embed"] = self.cue_embed
        for i, blk in enumerate(self.comp_blocks):
            params.update(blk.named(f"comp{i}"))
        params["sem_head.w"] = self.head_w
        params["sem_head.b"] = self.head_b
        params["codebook"] = self.codebook
        params.update(self.emb.named("emb"))
        for i, blk in enumerate(self.decoder_blocks):
            params.update(blk.named(f"dec{i}"))
        return params

    def load_parameters(self, arrays: dict):
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise NumericsError(
                f"parameter set mismatch: missing {sorted(missing)[:3]}, "
                f"unexpected {sorted(extra)[:3]}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=self.dtype)
            if arr.shape != p.data.shape:
                raise NumericsError(
                    f"parameter {name} has shape {arr.shape}, "
                    f"expected {p.data.shape}")
            p.data[...] = arr

    # ------------------------------------------------------------ forward

    def encode_record(self, record: CorpusRecord) -> S.VisualTokens:
        g = Tensor(np.asarray(record.global_feature,
                              dtype=self.dtype).reshape(1, -1))
        grids = Tensor(np.asarray(record.grid_features, dtype=self.dtype))
        v0 = S.project_visual_inputs(g, grids, self.vis_w, self.vis_b)
        return S.encode_visual(v0, self.encoder_blocks, self.w_c)

    def semantic_branch(self, visual: S.VisualTokens, cues: SemanticCueSet):
        """Comprehender tokens, predictions, and the (optionally ranked)
        tokens handed to the decoder."""
        st = S.comprehend(cues, self.sem_vocab, self.slots, self.cue_embed,
                          visual, self.comp_blocks)
        preds = S.predict_semantics(st, self.head_w, self.head_b)
        if self.cfg.use_ranker:
            ranked = S.rank_semantics(st, self.codebook)
            return st, preds, ranked, ranked.tokens
        return st, preds, None, st.tokens

    def _zero(self) -> Tensor:
        return Tensor(np.zeros((1, 1), dtype=self.dtype))

    def sample_losses(self, sample: TrainSample):
        """(caption, cue-filter, missing) loss tensors for one sample,
        honoring the ablation switches."""
        cfg = self.cfg
        visual = self.encode_record(sample.record)
        st, preds, _ranked, dec_sem = self.semantic_branch(visual, sample.cues)
        if cfg.use_filter_loss and sample.cues.n > 0:
            labels = S.make_cue_labels(sample.cues, sample.gt_words,
                                       self.sem_vocab)
            l_x = S.loss_filter(preds, labels)
        else:
            l_x = self._zero()
        if cfg.use_missing_loss:
            y_m = S.make_missing_labels(sample.gt_words, sample.cues,
                                        self.sem_vocab)
            l_m = S.loss_missing(preds.pooled, y_m, cfg.gamma_pos,
                                 cfg.gamma_neg, cfg.asym_margin)
        else:
            l_m = self._zero()
        vocab = self.word_vocab
        prefix = [vocab.bos_id] + list(sample.caption_ids)
        targets = list(sample.caption_ids) + [vocab.eos_id]
        logits = D.decoder_forward(prefix, visual.tokens, dec_sem, self.emb,
                                   self.decoder_blocks)
        l_xe = D.caption_loss(logits, targets, vocab.pad_id)
        return l_xe, l_x, l_m

    def total_loss(self, samples) -> Tensor:
        """Batch-mean scalar loss tensor (for backward)."""
        acc = None
        for s in samples:
            l_xe, l_x, l_m = self.sample_losses(s)
            part = add(add(l_x, l_m), l_xe)
            acc = part if acc is None else add(acc, part)
        return acc if len(samples) == 1 else scale(acc, 1.0 / len(samples))

    # ----------------------------------------------------------- training

    def train_step(self, optimizer, samples) -> LossBreakdown:
        """Teacher-forced forward, backward, one Adam update; deterministic
        for a fixed batch and state. NaN losses abort before touching the
        parameters."""
        if not samples:
            raise NumericsError("empty training batch")
        inv = 1.0 / len(samples)
        sums = [0.0, 0.0, 0.0]
        with recording() as rec:
            acc = None
            for s in samples:
                l_xe, l_x, l_m = self.sample_losses(s)
                sums[0] += l_xe.item()
                sums[1] += l_x.item()
                sums[2] += l_m.item()
                part = add(add(l_x, l_m), l_xe)
                acc = part if acc is None else add(acc, part)
            total = scale(acc, inv)
            if not np.isfinite(total.item()):
                raise NumericsError(f"training loss is not finite "
                                    f"({total.item()})")
            grads = backward(rec, total)
        params = self.named_parameters()
        optimizer.step({name: grad_for(grads, rec, p)
                        for name, p in params.items()})
        return LossBreakdown.from_parts(caption=sums[0] * inv,
                                        cue_filter=sums[1] * inv,
                                        missing=sums[2] * inv)

    # ---------------------------------------------------------- inference

    def next_token_scorer(self, visual_tokens: Tensor, dec_sem: Tensor):
        """Log-probability function over the next token given generated ids
        (BOS is prepended internally); used by greedy and beam search."""
        bos = self.word_vocab.bos_id

        def next_log_probs(tokens):
            logits = D.decoder_forward([bos] + list(tokens), visual_tokens,
                                       dec_sem, self.emb, self.decoder_blocks)
            row = logits.data[-1].astype(np.float64)
            row = row - row.max()
            return row - np.log(np.exp(row).sum())

        return next_log_probs

    def caption(self, record: CorpusRecord, cues: SemanticCueSet,
                beam_size: int | None = None) -> list:
        """Beam-search caption for one record, as a list of word ids."""
        visual = self.encode_record(record)
        _st, _preds, _ranked, dec_sem = self.semantic_branch(visual, cues)
        scorer = self.next_token_scorer(visual.tokens, dec_sem)
        vocab = self.word_vocab
        return D.beam_search(scorer, beam_size or self.cfg.beam_size,
                             self.cfg.max_caption_len, vocab.eos_id,
                             banned_ids=(vocab.bos_id, vocab.pad_id))


def full_model_grad_check(model: Captioner, samples, eps: float = 1e-6
                          ) -> dict:
    """Central finite differences against the recorded gradient for every
    coordinate of every trainable parameter; returns {name: worst relative
    error}. The model must be built with dtype float64."""
    if model.dtype != np.float64:
        raise NumericsError("gradient checks need a float64 model")
    with recording() as rec:
        total = model.total_loss(samples)
        grads = backward(rec, total)
    params = model.named_parameters()
    analytic = {}
    for name, p in params.items():
        g = grad_for(grads, rec, p)
        analytic[name] = np.zeros_like(p.data) if g is None else g

    def value():
        return model.total_loss(samples).item()

    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = value()
            flat[i] = orig - eps
            lo = value()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(1e-8,
                                                abs(aflat[i]) + abs(numeric))
            if err > worst:
                worst = err
        errors[name] = worst
    return errors

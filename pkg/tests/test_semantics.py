"""Visual encoding, comprehender, proxy losses, and ranker tests."""

import math

import numpy as np
import pytest

from semcap import attention as A
from semcap import semantics as S
from semcap import tensor as T
from semcap.retrieval import SemanticCueSet, SemanticVocabulary

from test_attention import np_cross_block, np_encoder_block

F64 = np.float64


def t64(x, grad=False):
    return T.Tensor(np.asarray(x, dtype=F64), requires_grad=grad)


def cue_set(words):
    return SemanticCueSet(list(words), [0] * len(words))


VOCAB = SemanticVocabulary(["cat", "cow", "dog", "horse", "man", "rides"])


# ------------------------------------------------------- visual encoding

def test_project_visual_inputs_row_count_and_order():
    rng = np.random.default_rng(0)
    w = t64(rng.standard_normal((5, 4)), grad=True)
    b = t64(np.zeros((1, 4)), grad=True)
    g = rng.standard_normal((1, 5))
    grids = rng.standard_normal((6, 5))
    out = S.project_visual_inputs(t64(g), t64(grids), w, b)
    assert out.shape == (7, 4)
    np.testing.assert_allclose(out.data[0], (g @ w.data)[0], atol=1e-12)


def test_project_visual_inputs_zero_weights_give_bias():
    w = t64(np.zeros((3, 2)))
    b = t64([[0.5, -1.0]])
    out = S.project_visual_inputs(t64(np.ones((1, 3))), t64(np.ones((2, 3))),
                                  w, b)
    np.testing.assert_allclose(out.data, [[0.5, -1.0]] * 3, atol=1e-12)


def test_project_visual_inputs_affine_oracle():
    rng = np.random.default_rng(1)
    w = t64(rng.standard_normal((5, 3)))
    b = t64(rng.standard_normal((1, 3)))
    g = rng.standard_normal((1, 5))
    grids = rng.standard_normal((4, 5))
    out = S.project_visual_inputs(t64(g), t64(grids), w, b)
    expected = np.concatenate([g, grids], axis=0) @ w.data + b.data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_encode_visual_selector_weights_pick_last_global():
    rng = np.random.default_rng(2)
    d = 4
    blocks = [A.init_block(rng, d, 2, dtype=F64) for _ in range(2)]
    # selector: the holistic global is exactly the depth-2 global output
    sel = np.zeros((3 * d, d))
    sel[2 * d:, :] = np.eye(d)
    out = S.encode_visual(t64(rng.standard_normal((5, d))), blocks,
                          t64(sel, grad=True))
    np.testing.assert_allclose(out.tokens.data[0],
                               out.layer_globals[-1].data[0], atol=1e-12)


def test_encode_visual_matches_per_block_numpy_oracle():
    rng = np.random.default_rng(3)
    d = 6
    blocks = [A.init_block(rng, d, 2, dtype=F64) for _ in range(3)]
    w_c = t64(rng.standard_normal((4 * d, d)))
    v0 = rng.standard_normal((5, d))
    out = S.encode_visual(t64(v0), blocks, w_c)

    x = v0
    globals_seen = [x[0:1]]
    for blk in blocks:
        x = np_encoder_block(x, blk)
        globals_seen.append(x[0:1])
    holistic = np.concatenate(globals_seen, axis=1) @ w_c.data
    expected = np.concatenate([holistic, x[1:]], axis=0)
    np.testing.assert_allclose(out.tokens.data, expected, atol=1e-6)


# ----------------------------------------------------------- comprehender

def _comprehender(rng, d=6, n_slots=3, n_blocks=2, vocab=VOCAB):
    slots = t64(rng.standard_normal((n_slots, d)), grad=True)
    cue_embed = t64(rng.standard_normal((vocab.n_words, d)), grad=True)
    blocks = [A.init_block(rng, d, 2, cross=True, dtype=F64)
              for _ in range(n_blocks)]
    visual = S.VisualTokens(tokens=t64(rng.standard_normal((4, d))),
                            layer_globals=[])
    return slots, cue_embed, blocks, visual


def test_comprehend_slots_only_when_no_cues():
    rng = np.random.default_rng(4)
    slots, cue_embed, blocks, visual = _comprehender(rng)
    st = S.comprehend(cue_set([]), VOCAB, slots, cue_embed, visual, blocks)
    assert st.tokens.shape == (3, 6)
    assert st.n_slots == 3 and st.n_cues == 0


def test_comprehend_preserves_count_and_ordering():
    rng = np.random.default_rng(5)
    slots, cue_embed, blocks, visual = _comprehender(rng)
    st = S.comprehend(cue_set(["cat", "dog"]), VOCAB, slots, cue_embed,
                      visual, blocks)
    assert st.tokens.shape[0] == 3 + 2
    assert st.cue_indices == [VOCAB.index["cat"], VOCAB.index["dog"]]


def test_comprehend_rejects_out_of_vocab_cue():
    rng = np.random.default_rng(6)
    slots, cue_embed, blocks, visual = _comprehender(rng)
    with pytest.raises(T.ContractError, match="zebra"):
        S.comprehend(cue_set(["zebra"]), VOCAB, slots, cue_embed, visual,
                     blocks)


def test_comprehend_matches_numpy_oracle():
    rng = np.random.default_rng(7)
    slots, cue_embed, blocks, visual = _comprehender(rng, n_blocks=2)
    st = S.comprehend(cue_set(["man", "cow"]), VOCAB, slots, cue_embed,
                      visual, blocks)
    x = np.concatenate([slots.data,
                        cue_embed.data[[VOCAB.index["man"],
                                        VOCAB.index["cow"]]]], axis=0)
    for blk in blocks:
        x = np_cross_block(x, visual.tokens.data, blk)
    np.testing.assert_allclose(st.tokens.data, x, atol=1e-6)


def test_comprehend_cue_permutation_equivariance():
    rng = np.random.default_rng(8)
    slots, cue_embed, blocks, visual = _comprehender(rng)
    a = S.comprehend(cue_set(["cat", "dog", "man"]), VOCAB, slots, cue_embed,
                     visual, blocks)
    b = S.comprehend(cue_set(["man", "cat", "dog"]), VOCAB, slots, cue_embed,
                     visual, blocks)
    # slots unchanged, cue token rows permuted with the words
    np.testing.assert_allclose(a.tokens.data[:3], b.tokens.data[:3], atol=1e-6)
    np.testing.assert_allclose(a.tokens.data[3 + 0], b.tokens.data[3 + 1],
                               atol=1e-6)  # cat
    np.testing.assert_allclose(a.tokens.data[3 + 1], b.tokens.data[3 + 2],
                               atol=1e-6)  # dog
    np.testing.assert_allclose(a.tokens.data[3 + 2], b.tokens.data[3 + 0],
                               atol=1e-6)  # man


# ------------------------------------------------------------ predictions

def _tokens(slot_rows, cue_rows, cue_indices):
    data = np.asarray(list(slot_rows) + list(cue_rows), dtype=F64)
    return S.SemanticTokens(tokens=t64(data), n_slots=len(slot_rows),
                            cue_indices=list(cue_indices))


def test_predict_zero_logits_uniform_and_half():
    d, n_classes = 4, 7
    st = _tokens(np.ones((2, d)), np.ones((3, d)), [0, 1, 2])
    w = t64(np.zeros((d, n_classes)), grad=True)
    b = t64(np.zeros((1, n_classes)), grad=True)
    preds = S.predict_semantics(st, w, b)
    np.testing.assert_allclose(preds.cue_probs.data, 1.0 / n_classes,
                               atol=1e-12)
    np.testing.assert_allclose(preds.slot_probs.data, 0.5, atol=1e-12)
    np.testing.assert_allclose(preds.pooled.data, 0.5, atol=1e-12)


def test_predict_pooled_is_coordinatewise_max():
    def logit(p):
        return math.log(p / (1 - p))

    st = _tokens(np.eye(2), [], [])
    w = t64([[logit(0.2), logit(0.9)], [logit(0.7), logit(0.1)]])
    b = t64(np.zeros((1, 2)))
    preds = S.predict_semantics(st, w, b)
    np.testing.assert_allclose(preds.slot_probs.data,
                               [[0.2, 0.9], [0.7, 0.1]], atol=1e-12)
    expected = np.maximum.reduce([[0.2, 0.9], [0.7, 0.1]])
    np.testing.assert_allclose(preds.pooled.data, [expected], atol=1e-12)


# ----------------------------------------------------------------- labels

def test_cue_labels_rule_forced():
    cues = cue_set(["cow", "horse"])
    labels = S.make_cue_labels(cues, {"cow", "man"}, VOCAB)
    assert labels[0] == VOCAB.index["cow"]
    assert labels[1] == VOCAB.irrelevant_index


def test_cue_labels_match_membership_oracle():
    rng = np.random.default_rng(9)
    for _ in range(20):
        words = list(rng.permutation(VOCAB.words))[:4]
        gt = set(rng.permutation(VOCAB.words)[:3])
        labels = S.make_cue_labels(cue_set(words), gt, VOCAB)
        for w, lab in zip(words, labels):
            assert lab == (VOCAB.index[w] if w in gt else
                           VOCAB.irrelevant_index)


def test_missing_labels_cases():
    full = S.make_missing_labels({"cat", "dog"}, cue_set(["cat", "dog"]),
                                 VOCAB)
    assert full.sum() == 0.0
    none = S.make_missing_labels({"cat", "dog"}, cue_set([]), VOCAB)
    assert none[VOCAB.index["cat"]] == 1.0 and none[VOCAB.index["dog"]] == 1.0
    assert none.sum() == 2.0
    assert none[VOCAB.irrelevant_index] == 0.0


def test_missing_labels_match_set_difference_oracle():
    rng = np.random.default_rng(10)
    for _ in range(20):
        gt = set(rng.permutation(VOCAB.words)[:int(rng.integers(0, 5))])
        cues = list(rng.permutation(VOCAB.words)[:int(rng.integers(0, 4))])
        y = S.make_missing_labels(gt, cue_set(cues), VOCAB)
        expected = {VOCAB.index[w] for w in (gt - set(cues))}
        assert {i for i in range(len(y)) if y[i] == 1.0} == expected


# ----------------------------------------------------------------- losses

def _preds_from_rows(rows):
    rows = np.asarray(rows, dtype=F64)
    return S.SemanticPredictions(
        cue_log_probs=t64(np.log(rows)), cue_probs=t64(rows),
        slot_probs=t64(np.full((1, rows.shape[1]), 0.5)),
        pooled=t64(np.full((1, rows.shape[1]), 0.5)))


def test_loss_filter_one_hot_correct_is_zero():
    eps = 1e-300  # placeholder mass for the impossible classes
    preds = _preds_from_rows([[1.0 - 2 * eps, eps, eps]])
    assert S.loss_filter(preds, [0]).item() == pytest.approx(0.0, abs=1e-9)


def test_loss_filter_uniform_is_log_n_classes():
    n = VOCAB.n_classes
    preds = _preds_from_rows(np.full((3, n), 1.0 / n))
    assert S.loss_filter(preds, [0, 1, 2]).item() == \
        pytest.approx(math.log(n), abs=1e-9)


def test_loss_filter_hand_case():
    preds = _preds_from_rows([[0.5, 0.25, 0.25], [0.25, 0.5, 0.25]])
    # true classes carry 0.5 and 0.25
    loss = S.loss_filter(preds, [0, 2]).item()
    assert loss == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-9)
    assert loss == pytest.approx(1.0397, abs=1e-4)


def test_loss_filter_empty_cues_is_zero():
    preds = S.SemanticPredictions(None, None, t64(np.full((1, 3), 0.5)),
                                  t64(np.full((1, 3), 0.5)))
    assert S.loss_filter(preds, []).item() == 0.0


def test_loss_missing_perfect_predictions():
    pooled = t64([[1.0, 0.0, 0.0]])
    y = np.array([1.0, 0.0, 0.0])
    assert S.loss_missing(pooled, y, 0.0, 4.0, 0.05).item() == \
        pytest.approx(0.0, abs=1e-9)


def test_loss_missing_hand_negative_case():
    pooled = t64([[0.5]])
    y = np.array([0.0])
    loss = S.loss_missing(pooled, y, 0.0, 4.0, 0.05).item()
    expected = -(0.45 ** 4) * math.log(0.55)
    assert loss == pytest.approx(expected, abs=1e-9)
    assert loss == pytest.approx(0.02452, abs=2e-5)


def test_loss_missing_reduces_to_bce():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(1, 8))
        p = rng.uniform(0.02, 0.98, size=n)
        y = (rng.random(n) < 0.5).astype(float)
        ours = S.loss_missing(t64([p]), y, 0.0, 0.0, 0.0).item()
        bce = -float(np.sum(y * np.log(p) + (1 - y) * np.log(1 - p)))
        assert ours == pytest.approx(bce, abs=1e-6)


def test_loss_missing_nonnegative_and_semantic_sum():
    rng = np.random.default_rng(12)
    p = rng.uniform(0.01, 0.99, size=5)
    y = (rng.random(5) < 0.5).astype(float)
    lm = S.loss_missing(t64([p]), y, 0.0, 4.0, 0.05)
    lf = _preds_from_rows(np.full((2, 5), 0.2))
    lx = S.loss_filter(lf, [0, 1])
    assert lm.item() >= 0.0 and lx.item() >= 0.0
    assert S.loss_semantic(lx, lm).item() == \
        pytest.approx(lx.item() + lm.item(), abs=1e-9)


def test_loss_semantic_examples():
    z = t64([[0.0]])
    assert S.loss_semantic(z, z).item() == 0.0
    assert S.loss_semantic(t64([[1.5]]), t64([[0.25]])).item() == \
        pytest.approx(1.75, abs=1e-9)


def test_loss_gradients_flow():
    rng = np.random.default_rng(13)
    pooled0 = rng.uniform(0.2, 0.8, size=(1, 4))
    y = np.array([1.0, 0.0, 1.0, 0.0])

    def f(t):
        return S.loss_missing(T.sigmoid(t), y, 0.5, 4.0, 0.05)

    x = t64(rng.standard_normal((1, 4)), grad=True)
    assert T.finite_diff_check(f, x, eps=1e-6) < 1e-5


# ----------------------------------------------------------------- ranker

def test_ranker_single_position_is_exact_shift():
    rng = np.random.default_rng(14)
    tokens = _tokens(rng.standard_normal((2, 3)), rng.standard_normal((1, 3)),
                     [0])
    codebook = t64(rng.standard_normal((1, 3)), grad=True)
    out = S.rank_semantics(tokens, codebook)
    np.testing.assert_array_equal(out.weights, np.ones((3, 1)))
    np.testing.assert_array_equal(out.tokens.data,
                                  tokens.tokens.data + codebook.data[0])


def test_ranker_equal_codebook_rows():
    rng = np.random.default_rng(15)
    row = rng.standard_normal(4)
    codebook = t64(np.tile(row, (5, 1)))
    tokens = _tokens(rng.standard_normal((2, 4)), [], [])
    out = S.rank_semantics(tokens, codebook)
    np.testing.assert_allclose(out.attended.data, np.tile(row, (2, 1)),
                               atol=1e-12)


def test_ranker_hand_softmax_case():
    tokens = _tokens([[1.0, 0.0]], [], [])
    codebook = t64([[1.0, 0.0], [0.0, 1.0]])
    out = S.rank_semantics(tokens, codebook)
    e = math.exp(1.0)
    w0 = e / (e + 1.0)
    np.testing.assert_allclose(out.weights, [[w0, 1 - w0]], atol=1e-12)
    np.testing.assert_allclose(out.weights, [[0.7311, 0.2689]], atol=5e-5)
    np.testing.assert_allclose(out.attended.data, [[w0, 1 - w0]], atol=1e-12)


def test_ranker_weights_are_convex_coefficients():
    rng = np.random.default_rng(16)
    for _ in range(30):
        n_tok = int(rng.integers(1, 6))
        n_pos = int(rng.integers(1, 7))
        tokens = _tokens(rng.standard_normal((n_tok, 4)) * 2, [], [])
        codebook = t64(rng.standard_normal((n_pos, 4)))
        out = S.rank_semantics(tokens, codebook)
        assert (out.weights >= 0).all()
        np.testing.assert_allclose(out.weights.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(out.attended.data,
                                   out.weights @ codebook.data, atol=1e-10)


def test_ranker_gradient_check():
    rng = np.random.default_rng(17)
    cot = T.Tensor(rng.standard_normal((3, 4)), dtype=F64)

    def f(t):
        st = S.SemanticTokens(tokens=t, n_slots=3, cue_indices=[])
        cb = T.Tensor(codebook0, dtype=F64)
        return T.sum_all(T.mul(S.rank_semantics(st, cb).tokens, cot))

    codebook0 = rng.standard_normal((5, 4))
    x = t64(rng.standard_normal((3, 4)), grad=True)
    assert T.finite_diff_check(f, x, eps=1e-6) < 1e-5


def test_semantic_losses_trainable_on_single_example():
    """Both proxy losses fall below 0.05 after 200 steps on one instance."""
    from semcap.config import RunConfig
    from semcap.corpus import CorpusRecord, build_word_vocab
    from semcap.model import Captioner, TrainSample
    from semcap.optim import WarmupAdam

    cfg = RunConfig(d_model=16, n_heads=2, n_vis_blocks=1, n_sem_blocks=1,
                    n_dec_blocks=1, n_slots=2, max_cues=4, grid_cells=4,
                    feature_dim=8, max_caption_len=8, warmup_steps=40,
                    lr_factor=2.0, seed=3).validate()
    rng = np.random.default_rng(0)
    rec = CorpusRecord("i0", rng.standard_normal((4, 8)).astype(np.float32),
                       rng.standard_normal(8).astype(np.float32),
                       [["a", "cat", "rides", "a", "cow"]], {"cat", "cow"})
    vocab = build_word_vocab([rec])
    model = Captioner(cfg, vocab, VOCAB, dtype=np.float32)
    sample = TrainSample(rec, vocab.encode(rec.captions[0]),
                         cue_set(["cat", "horse"]), {"cat", "cow", "rides"})
    opt = WarmupAdam(model.named_parameters(), cfg.d_model,
                     lr_factor=cfg.lr_factor, warmup_steps=cfg.warmup_steps)
    last = None
    for _ in range(200):
        last = model.train_step(opt, [sample])
    assert last.cue_filter < 0.05, last
    assert last.missing < 0.05, last

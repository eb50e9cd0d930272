"""Pipeline orchestration: generate -> vocab -> index -> train -> caption ->
evaluate, shared by the command line and the test harness.

Data files live under a data directory chosen by the caller; training
artifacts (effective config, loss log, checkpoints, lock) go to a run
directory under the root named by SEMCAP_RUN_ROOT (default ./runs).
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from semcap import corpus as C
from semcap import metrics as M
from semcap import retrieval as R
from semcap.checkpoint import load_checkpoint, save_checkpoint
from semcap.config import ConfigError, RunConfig
from semcap.model import Captioner, TrainSample, full_model_grad_check
from semcap.optim import WarmupAdam
from semcap.tensor import ContractError, NumericsError

RUN_ROOT_ENV = "SEMCAP_RUN_ROOT"


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _p(cfg: RunConfig, data_dir, name: str) -> Path:
    return Path(data_dir) / getattr(cfg, name)


@contextmanager
def run_dir_lock(run_dir: Path):
    """Exclusive ownership of a run directory via an O_EXCL lock file."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise C.DataError(f"run directory {run_dir} is locked by another "
                          f"training process (remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


# ------------------------------------------------------------ data commands

def gen_corpus_cmd(cfg: RunConfig, data_dir) -> list:
    """Generate the corpus, object lexicon, and split files."""
    Path(data_dir).mkdir(parents=True, exist_ok=True)
    records = C.generate_corpus(
        seed=cfg.seed, n_images=cfg.n_images,
        objects_per_scene=(cfg.objects_min, cfg.objects_max),
        captions_per_image=cfg.captions_per_image, n_grid=cfg.grid_cells,
        feature_dim=cfg.feature_dim, embed_dim=cfg.embed_dim,
        embed_seed=cfg.embed_seed, noise=cfg.feature_noise)
    C.save_corpus(records, _p(cfg, data_dir, "corpus_path"))
    lexicon = C.default_lexicon()
    C.save_lexicon(lexicon, _p(cfg, data_dir, "lexicon_path"))
    if cfg.split_mode == "robust":
        split = C.build_robust_split(records, cfg.seed, lexicon,
                                     cfg.holdout_frac)
    else:
        split = C.build_standard_split(records, cfg.seed, cfg.val_frac,
                                       cfg.test_frac)
    split.save(_p(cfg, data_dir, "split_path"))
    return records


def build_vocab_cmd(cfg: RunConfig, data_dir):
    records = C.load_corpus(_p(cfg, data_dir, "corpus_path"))
    stop = R.load_stopwords()
    word_vocab = C.build_word_vocab(records, cfg.min_word_count)
    word_vocab.save(_p(cfg, data_dir, "word_vocab_path"))
    captions = [cap for rec in records for cap in rec.captions]
    sem_vocab = R.build_semantic_vocab(captions, stop,
                                       cfg.semantic_vocab_size)
    sem_vocab.save(_p(cfg, data_dir, "semantic_vocab_path"))
    return word_vocab, sem_vocab


def build_index_cmd(cfg: RunConfig, data_dir) -> R.SentencePool:
    """Embed the training captions into the retrieval pool."""
    records = C.load_corpus(_p(cfg, data_dir, "corpus_path"))
    split = C.SplitSpec.load(_p(cfg, data_dir, "split_path"))
    train_ids = set(split.train)
    pool = R.SentencePool.build(
        [r for r in records if r.image_id in train_ids],
        dim=cfg.embed_dim, seed=cfg.embed_seed)
    pool.save(_p(cfg, data_dir, "pool_path"))
    return pool


@dataclass
class Pipeline:
    cfg: RunConfig
    records: dict
    split: C.SplitSpec
    word_vocab: C.WordVocab
    sem_vocab: R.SemanticVocabulary
    pool: R.SentencePool
    lexicon: dict
    stopwords: frozenset


def load_pipeline(cfg: RunConfig, data_dir) -> Pipeline:
    for name in ("corpus_path", "split_path", "word_vocab_path",
                 "semantic_vocab_path", "pool_path", "lexicon_path"):
        path = _p(cfg, data_dir, name)
        if not path.exists():
            raise C.DataError(f"missing input file {path} "
                              f"(run the gen-corpus/build-vocab/build-index "
                              f"steps first)")
    records = C.load_corpus(_p(cfg, data_dir, "corpus_path"))
    return Pipeline(
        cfg=cfg,
        records={r.image_id: r for r in records},
        split=C.SplitSpec.load(_p(cfg, data_dir, "split_path")),
        word_vocab=C.WordVocab.load(_p(cfg, data_dir, "word_vocab_path")),
        sem_vocab=R.SemanticVocabulary.load(
            _p(cfg, data_dir, "semantic_vocab_path")),
        pool=R.SentencePool.load(_p(cfg, data_dir, "pool_path")),
        lexicon=C.load_lexicon(_p(cfg, data_dir, "lexicon_path")),
        stopwords=R.load_stopwords(),
    )


# --------------------------------------------------------------- sampling

def mine_cues(pipe: Pipeline, record, training: bool) -> R.SemanticCueSet:
    """Retrieve neighbors and harvest cue words for one image. Training
    queries exclude the image's own captions from the pool; inference does
    not (unseen images are not in the pool anyway)."""
    cfg = pipe.cfg
    if not cfg.use_retrieval:
        return R.SemanticCueSet([], [])
    query = R.embed_image(record, cfg.embed_dim, cfg.embed_seed)
    try:
        ids, _short = R.retrieve_top_k(
            query, pipe.pool, cfg.retrieve_k,
            exclude_owner=record.image_id if training else None)
    except ContractError:
        # pool exhausted by the owner exclusion: proceed slots-only
        return R.SemanticCueSet([], [])
    by_sid = {e.sid: e for e in pipe.pool.entries}
    sentences = [by_sid[i].tokens for i in ids]
    return R.extract_semantic_cues(sentences, pipe.stopwords, pipe.sem_vocab,
                                   cfg.max_cues)


def gt_semantic_words(pipe: Pipeline, record) -> set:
    """Union over the image's reference captions of its in-vocabulary
    non-stop words."""
    words = set()
    for cap in record.captions:
        words.update(w for w in cap
                     if w not in pipe.stopwords and w in pipe.sem_vocab)
    return words


def make_samples(pipe: Pipeline, image_ids, training: bool) -> list:
    """Training samples (one per caption) or inference stubs (one per image,
    caption ids empty)."""
    samples = []
    for image_id in image_ids:
        record = pipe.records[image_id]
        cues = mine_cues(pipe, record, training)
        gt = gt_semantic_words(pipe, record)
        if training:
            for cap in record.captions:
                ids = pipe.word_vocab.encode(cap)[:pipe.cfg.max_caption_len]
                samples.append(TrainSample(record, ids, cues, gt))
        else:
            samples.append(TrainSample(record, [], cues, gt))
    return samples


# ---------------------------------------------------------------- training

def run_train(cfg: RunConfig, data_dir, quiet: bool = True):
    """Train on the split's training images; returns (checkpoint path,
    loss log path, final breakdown)."""
    pipe = load_pipeline(cfg, data_dir)
    rd = run_root() / cfg.run_name
    with run_dir_lock(rd):
        cfg.save(rd / "config.effective.ini")
        model = Captioner(cfg, pipe.word_vocab, pipe.sem_vocab)
        opt = WarmupAdam(model.named_parameters(), cfg.d_model,
                         lr_factor=cfg.lr_factor,
                         warmup_steps=cfg.warmup_steps, beta1=cfg.beta1,
                         beta2=cfg.beta2, eps=cfg.adam_eps)
        samples = make_samples(pipe, pipe.split.train, training=True)
        if not samples:
            raise C.DataError("training split is empty")
        ckpt_path = rd / "checkpoint.bin"
        log_path = rd / "loss.log"
        step = 0
        last = None

        def save(path):
            m, v, _count = opt.state_arrays()
            save_checkpoint(path, cfg.config_hash(),
                            {k: p.data for k, p in
                             model.named_parameters().items()},
                            m, v, step)

        with open(log_path, "w", encoding="utf-8") as log:
            for epoch in range(cfg.epochs):
                order = np.random.default_rng(
                    [cfg.seed & 0x7FFFFFFF, 20, epoch]).permutation(
                        len(samples))
                for lo in range(0, len(order), cfg.batch_size):
                    batch = [samples[i] for i in order[lo:lo + cfg.batch_size]]
                    try:
                        last = model.train_step(opt, batch)
                    except NumericsError:
                        save(ckpt_path)
                        raise
                    step += 1
                    log.write(f"{step}\t{last.total!r}\t{last.caption!r}\t"
                              f"{last.cue_filter!r}\t{last.missing!r}\n")
                    log.flush()
                if cfg.checkpoint_every and \
                        (epoch + 1) % cfg.checkpoint_every == 0:
                    save(rd / f"checkpoint_ep{epoch + 1:04d}.bin")
                if not quiet:
                    print(f"epoch {epoch + 1}/{cfg.epochs}: "
                          f"loss {last.total:.4f}")
            save(ckpt_path)
    return ckpt_path, log_path, last


def load_model(cfg: RunConfig, pipe: Pipeline, checkpoint_path) -> Captioner:
    ck = load_checkpoint(checkpoint_path)
    want = cfg.config_hash()
    if ck.config_hash != want:
        raise ConfigError(
            f"checkpoint was written under config hash {ck.config_hash} "
            f"but the current config hashes to {want}; refusing to load")
    model = Captioner(cfg, pipe.word_vocab, pipe.sem_vocab)
    model.load_parameters(ck.params)
    return model


def _section_ids(pipe: Pipeline, section: str):
    if section == "all":
        return sorted(pipe.records)
    ids = getattr(pipe.split, section, None)
    if ids is None:
        raise ConfigError(f"unknown split section {section!r}")
    return list(ids)


def run_caption(cfg: RunConfig, data_dir, checkpoint_path, out_path,
                section: str = "test", image_ids=None):
    """Caption images and write "image_id<TAB>caption" lines."""
    pipe = load_pipeline(cfg, data_dir)
    model = load_model(cfg, pipe, checkpoint_path)
    ids = list(image_ids) if image_ids else _section_ids(pipe, section)
    missing = [i for i in ids if i not in pipe.records]
    if missing:
        raise C.DataError(f"unknown image ids: {missing[:5]}")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_path.with_suffix(out_path.suffix + ".tmp")
    captions = {}
    with open(tmp, "w", encoding="utf-8") as fh:
        for image_id in ids:
            record = pipe.records[image_id]
            cues = mine_cues(pipe, record, training=False)
            word_ids = model.caption(record, cues)
            words = pipe.word_vocab.decode(word_ids)
            captions[image_id] = words
            fh.write(f"{image_id}\t{' '.join(words)}\n")
    tmp.replace(out_path)
    return captions


def load_captions(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        try:
            image_id, text = line.split("\t", 1)
        except ValueError as exc:
            raise C.DataError(f"bad caption line {line!r}") from exc
        out[image_id] = text.split()
    return out


def run_evaluate(cfg: RunConfig, data_dir, captions_path, out_prefix=None,
                 section: str = "test") -> dict:
    """Quality and hallucination metrics for a caption file; writes
    <prefix>.txt (one "name value" line each) and <prefix>.json."""
    pipe = load_pipeline(cfg, data_dir)
    captions = load_captions(captions_path)
    ids = _section_ids(pipe, section)
    missing = sorted(set(ids) - set(captions))
    if missing:
        raise C.DataError(f"captions missing for {len(missing)} images: "
                          f"{missing[:10]}")
    cands = {i: captions[i] for i in ids}
    refs = {i: pipe.records[i].captions for i in ids}
    report = {}
    for n in range(1, 5):
        report[f"bleu{n}"] = M.corpus_bleu([cands[i] for i in ids],
                                           [refs[i] for i in ids], max_n=n)
    rl = [M.rouge_l(cands[i], refs[i]) for i in ids]
    report["rouge_l"] = sum(rl) / len(rl)
    report["cider"] = M.cider(cands, refs)
    ch = M.chair(cands, {i: pipe.records[i].gt_objects for i in ids},
                 pipe.lexicon)
    report["chair_s"] = ch.sentence_rate
    report["chair_i"] = ch.instance_rate
    if out_prefix is not None:
        out_prefix = Path(out_prefix)
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
        text = "".join(f"{k} {report[k]:.4f}\n" for k in report)
        (out_prefix.with_suffix(".txt")).write_text(text, encoding="utf-8")
        import json
        (out_prefix.with_suffix(".json")).write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
    return report


# -------------------------------------------------------------- grad check

def run_grad_check(seed: int = 0, eps: float = 5e-5):
    """Finite-difference verification of every trainable parameter on a
    tiny float64 model; returns {parameter name: worst relative error}.

    The probe step balances truncation against roundoff: the loss is order
    ten while several attention projections carry gradients below 1e-6, so
    steps much under 1e-5 drown those coordinates in cancellation noise.
    """
    from semcap.retrieval import SemanticCueSet, SemanticVocabulary

    cfg = RunConfig(d_model=16, n_heads=2, n_vis_blocks=1, n_sem_blocks=1,
                    n_dec_blocks=1, n_slots=2, max_cues=2, grid_cells=4,
                    feature_dim=8, max_caption_len=7, seed=seed).validate()
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 99])
    caps = [["a", "red", "cat", "chases", "a", "blue", "dog"],
            ["a", "blue", "dog", "greets", "a", "red", "cow"]]
    records = [
        C.CorpusRecord(f"g{i}",
                       rng.standard_normal((4, 8)).astype(np.float32),
                       rng.standard_normal(8).astype(np.float32),
                       [caps[i]], {"cat", "dog", "cow"})
        for i in range(2)]
    word_vocab = C.build_word_vocab(records)
    assert word_vocab.size == 12
    sem_vocab = SemanticVocabulary(
        ["blue", "cat", "chases", "cow", "dog", "greets", "red"])
    model = Captioner(cfg, word_vocab, sem_vocab, dtype=np.float64)
    samples = [
        TrainSample(records[0], word_vocab.encode(caps[0]),
                    SemanticCueSet(["cat", "cow"], [0, 0]),
                    {"red", "cat", "chases", "dog"}),
        TrainSample(records[1], word_vocab.encode(caps[1]),
                    SemanticCueSet(["dog", "chases"], [0, 1]),
                    {"blue", "dog", "greets", "cow"}),
    ]
    return full_model_grad_check(model, samples, eps=eps)

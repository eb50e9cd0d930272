"""Embedding provider, top-K sentence retrieval, and semantic cue mining.

The embedding provider is a deterministic stand-in for a pretrained
cross-modal encoder: sentences are embedded as normalized bags of seeded
per-word vectors, images either carry a precomputed embedding (written by
the corpus generator from the scene contents) or fall back to a fixed
seeded projection of their mean grid feature. Retrieval is an exact linear
scan over the pool; desk-scale pools are small enough that exactness is
cheaper than maintaining an index.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from semcap.tensor import ContractError

DEFAULT_EMBED_DIM = 64
_IMAGE_PROJ_TAG = 0x1A6E


def _word_seed(seed: int, word: str) -> list[int]:
    digest = hashlib.sha256(f"{seed}:{word}".encode("utf-8")).digest()
    return [seed & 0x7FFFFFFF] + [int.from_bytes(digest[i:i + 4], "little")
                                  for i in range(0, 16, 4)]


def word_vector(word: str, dim: int, seed: int) -> np.ndarray:
    """Fixed pseudo-random direction for a word, stable across runs."""
    rng = np.random.default_rng(_word_seed(seed, word))
    return rng.standard_normal(dim)


def embed_tokens(tokens, dim: int = DEFAULT_EMBED_DIM, seed: int = 0
                 ) -> np.ndarray:
    """Order-free bag-of-words embedding, L2-normalized."""
    if not tokens:
        raise ContractError("cannot embed an empty token list")
    acc = np.zeros(dim)
    for word, count in sorted(Counter(tokens).items()):
        acc += count * word_vector(word, dim, seed)
    norm = np.linalg.norm(acc)
    if norm == 0.0:
        raise ContractError("token embedding collapsed to the zero vector")
    return acc / norm


def embed_sentence(tokens, dim: int = DEFAULT_EMBED_DIM, seed: int = 0
                   ) -> np.ndarray:
    return embed_tokens(tokens, dim, seed)


def embed_image(record, dim: int = DEFAULT_EMBED_DIM, seed: int = 0
                ) -> np.ndarray:
    """Image-side embedding: precomputed when the record carries one,
    otherwise a seeded projection of the mean grid feature."""
    pre = getattr(record, "embedding", None)
    if pre is not None:
        v = np.asarray(pre, dtype=np.float64)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise ContractError("precomputed image embedding has zero norm")
        return v / norm
    feats = np.asarray(record.grid_features, dtype=np.float64)
    if feats.size == 0:
        raise ContractError(f"record {record.image_id} has no grid features")
    mean = feats.mean(axis=0)
    rng = np.random.default_rng([seed & 0x7FFFFFFF, _IMAGE_PROJ_TAG])
    proj = rng.standard_normal((feats.shape[1], dim))
    v = mean @ proj
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ContractError(f"record {record.image_id} embeds to zero vector")
    return v / norm


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ContractError("cosine similarity of a zero vector")
    return float(np.dot(u, v) / (nu * nv))


@dataclass
class PoolEntry:
    sid: int
    owner: str
    tokens: list[str]
    vec: np.ndarray


@dataclass
class SentencePool:
    """Immutable set of embedded training sentences, queried by linear scan."""

    entries: list[PoolEntry] = field(default_factory=list)

    def __post_init__(self):
        sids = [e.sid for e in self.entries]
        if len(set(sids)) != len(sids):
            raise ContractError("sentence ids in a pool must be unique")

    def __len__(self):
        return len(self.entries)

    @classmethod
    def build(cls, records, dim: int = DEFAULT_EMBED_DIM, seed: int = 0):
        entries = []
        sid = 0
        for rec in records:
            for caption in rec.captions:
                entries.append(PoolEntry(sid, rec.image_id, list(caption),
                                         embed_sentence(caption, dim, seed)))
                sid += 1
        return cls(entries)

    def save(self, path):
        """One sentence per line: sid, owner image id, tokens, embedding
        values (exact float repr), tab-separated in that order."""
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for e in self.entries:
                vec = " ".join(repr(float(x)) for x in e.vec)
                fh.write(f"{e.sid}\t{e.owner}\t{' '.join(e.tokens)}\t{vec}\n")
        tmp.replace(path)

    @classmethod
    def load(cls, path):
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                sid, owner, toks, vec = line.split("\t")
                entries.append(PoolEntry(
                    int(sid), owner, toks.split(),
                    np.array([float(x) for x in vec.split()])))
        return cls(entries)


def retrieve_top_k(query: np.ndarray, pool: SentencePool, k: int,
                   exclude_owner: str | None = None):
    """The K pool sentences most similar to the query, descending similarity,
    ties broken by ascending sentence id.

    Returns (sentence ids, shortfall flag); the flag is set when the pool
    (after owner exclusion) holds fewer than K sentences.
    """
    if k < 1:
        raise ContractError(f"retrieval needs k >= 1, got {k}")
    candidates = [e for e in pool.entries if e.owner != exclude_owner]
    if not candidates:
        raise ContractError("retrieval pool is empty after owner exclusion")
    scored = sorted(((-cosine_similarity(query, e.vec), e.sid) for e in candidates))
    ids = [sid for _neg, sid in scored[:k]]
    return ids, len(candidates) < k


@dataclass
class SemanticVocabulary:
    """The classifiable semantic words plus one trailing irrelevant class."""

    words: list[str]

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ContractError("semantic vocabulary contains duplicates")

    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def irrelevant_index(self) -> int:
        return len(self.words)

    @property
    def n_classes(self) -> int:
        return len(self.words) + 1

    def __contains__(self, word):
        return word in self.index

    def save(self, path):
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text("".join(w + "\n" for w in self.words), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path):
        words = [w for w in Path(path).read_text(encoding="utf-8").splitlines()
                 if w]
        return cls(words)


def build_semantic_vocab(caption_token_lists, stopwords, target_size: int
                         ) -> SemanticVocabulary:
    """Top `target_size` non-stop words by corpus frequency, ties broken
    lexicographically; keeps every candidate when there are fewer."""
    if not caption_token_lists:
        raise ContractError("cannot build a semantic vocabulary from nothing")
    counts = Counter()
    for tokens in caption_token_lists:
        counts.update(w for w in tokens if w not in stopwords)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return SemanticVocabulary([w for w, _ in ranked[:target_size]])


@dataclass
class SemanticCueSet:
    """Cue words mined from retrieved sentences, with their source ranks."""

    words: list[str]
    source_ranks: list[int]

    @property
    def n(self) -> int:
        return len(self.words)


def extract_semantic_cues(ranked_sentences, stopwords, vocab: SemanticVocabulary,
                          cap: int) -> SemanticCueSet:
    """Scan sentences in retrieval rank order and words in sentence order;
    keep in-vocabulary non-stop words, first occurrence only, up to `cap`."""
    words: list[str] = []
    ranks: list[int] = []
    seen = set()
    for rank, tokens in enumerate(ranked_sentences):
        for w in tokens:
            if len(words) >= cap:
                return SemanticCueSet(words, ranks)
            if w in stopwords or w in seen or w not in vocab:
                continue
            seen.add(w)
            words.append(w)
            ranks.append(rank)
    return SemanticCueSet(words, ranks)


def load_stopwords(path=None) -> frozenset:
    """The shipped stop-word list (one lowercase word per line) or a custom one."""
    if path is None:
        path = Path(__file__).parent / "data" / "stopwords.txt"
    words = [w.strip() for w in Path(path).read_text(encoding="utf-8").splitlines()]
    return frozenset(w for w in words if w)

"""Synthetic scene/caption corpus: generation, vocabularies, splits, file I/O.

Each record is a scene of attributed objects rendered two ways: as noisy
grid features (a seeded basis vector per object dropped into a grid cell)
and as templated captions "a ADJ OBJ REL a ADJ OBJ" covering every scene
object. Captions mention only scene objects, so lexicon-recoverable caption
objects equal the ground-truth object set exactly and hallucination metrics
have noise-free references. Everything derives from explicit seeds; a
record's stream is keyed by (seed, image index) so generation is
order-independent and reproducible byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from semcap import retrieval
from semcap.tensor import ContractError

OBJECTS = [
    "plane", "cat", "dog", "tower", "boat", "tree", "horse", "car",
    "bird", "house", "train", "cow", "bear", "truck", "flower", "bench",
    "bridge", "sheep", "bus", "lamp", "robot", "kite", "clock", "fox",
]
ATTRIBUTES = [
    "red", "blue", "green", "small", "large", "old", "young", "bright",
    "dark", "tall", "round", "fuzzy",
]
RELATIONS = [
    "chases", "watches", "carries", "faces", "touches", "pulls", "guards",
    "follows", "circles", "greets",
]

_PUNCT_TABLE = str.maketrans({c: " " for c in
                              "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~"})


class DataError(ValueError):
    """Corpus or data file is missing pieces or malformed."""


@dataclass
class CorpusRecord:
    image_id: str
    grid_features: np.ndarray      # (n_grid, feature_dim) float32
    global_feature: np.ndarray     # (feature_dim,) float32
    captions: list                 # list of token lists, each non-empty
    gt_objects: set
    embedding: np.ndarray | None = None  # optional precomputed image embedding


def tokenize(text: str) -> list:
    """Lowercase, strip punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


def generate_corpus(seed: int, n_images: int, objects_per_scene=(2, 3),
                    captions_per_image: int = 5, n_grid: int = 16,
                    feature_dim: int = 64, embed_dim: int = 64,
                    embed_seed: int = 0, noise: float = 0.1,
                    objects=None, attributes=None, relations=None,
                    attach_embeddings: bool = True) -> list:
    """Sample `n_images` scenes and render features, captions, and ground
    truth. The precomputed embedding (when attached) is the bag-of-words
    embedding of the scene's object and attribute words in the same seeded
    space the sentence pool uses, standing in for a pretrained image encoder.
    """
    objects = list(objects or OBJECTS)
    attributes = list(attributes or ATTRIBUTES)
    relations = list(relations or RELATIONS)
    lo, hi = objects_per_scene
    if n_images < 1:
        raise ContractError("need at least one image")
    if lo < 2:
        raise ContractError("scenes need at least two objects for the "
                            "pairwise caption template")
    if hi > len(objects):
        raise ContractError(
            f"objects_per_scene asks for up to {hi} distinct objects but the "
            f"lexicon has only {len(objects)}")
    if hi > n_grid:
        raise ContractError("more objects per scene than grid cells")

    base_rng = np.random.default_rng([seed & 0x7FFFFFFF, 1])
    obj_basis = base_rng.standard_normal((len(objects), feature_dim))
    attr_basis = base_rng.standard_normal((len(attributes), feature_dim))

    records = []
    for idx in range(n_images):
        rng = np.random.default_rng([seed & 0x7FFFFFFF, 2, idx])
        n_obj = int(rng.integers(lo, hi + 1))
        obj_ids = rng.choice(len(objects), size=n_obj, replace=False)
        attr_ids = rng.integers(0, len(attributes), size=n_obj)
        cells = rng.choice(n_grid, size=n_obj, replace=False)

        grid = rng.normal(0.0, noise, size=(n_grid, feature_dim))
        for j in range(n_obj):
            grid[cells[j]] += obj_basis[obj_ids[j]] + 0.5 * attr_basis[attr_ids[j]]
        grid = grid.astype(np.float32)
        global_feat = (grid.mean(axis=0)
                       + rng.normal(0.0, noise, size=feature_dim)
                       ).astype(np.float32)

        captions = []
        for c in range(captions_per_image):
            a = c % n_obj
            b = (c + 1) % n_obj
            rel = relations[int(rng.integers(0, len(relations)))]
            captions.append([
                "a", attributes[attr_ids[a]], objects[obj_ids[a]], rel,
                "a", attributes[attr_ids[b]], objects[obj_ids[b]],
            ])

        scene_words = sorted({objects[obj_ids[j]] for j in range(n_obj)}
                             | {attributes[attr_ids[j]] for j in range(n_obj)})
        embedding = (retrieval.embed_tokens(scene_words, embed_dim, embed_seed)
                     if attach_embeddings else None)
        records.append(CorpusRecord(
            image_id=f"img_{idx:05d}",
            grid_features=grid,
            global_feature=global_feat,
            captions=captions,
            gt_objects={objects[obj_ids[j]] for j in range(n_obj)},
            embedding=embedding,
        ))
    return records


# ------------------------------------------------------------- word vocab

BOS, EOS, PAD, UNK = "<bos>", "<eos>", "<pad>", "<unk>"


@dataclass
class WordVocab:
    words: list  # specials first: BOS, EOS, PAD, UNK

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}

    @property
    def size(self):
        return len(self.words)

    bos_id = property(lambda self: self.index[BOS])
    eos_id = property(lambda self: self.index[EOS])
    pad_id = property(lambda self: self.index[PAD])
    unk_id = property(lambda self: self.index[UNK])

    def encode(self, tokens):
        unk = self.unk_id
        return [self.index.get(w, unk) for w in tokens]

    def decode(self, ids):
        return [self.words[i] for i in ids]

    def save(self, path):
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text("".join(w + "\n" for w in self.words), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path):
        words = [w for w in Path(path).read_text(encoding="utf-8").splitlines()
                 if w]
        if words[:4] != [BOS, EOS, PAD, UNK]:
            raise DataError(f"word vocabulary at {path} lacks the special "
                            "tokens in their reserved order")
        return cls(words)


def build_word_vocab(records, min_count: int = 1) -> WordVocab:
    """Words occurring at least `min_count` times, most frequent first
    (ties lexicographic), behind the reserved specials."""
    if not records:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    from collections import Counter
    counts = Counter()
    for rec in records:
        for caption in rec.captions:
            counts.update(caption)
    kept = sorted((w for w, c in counts.items() if c >= min_count),
                  key=lambda w: (-counts[w], w))
    return WordVocab([BOS, EOS, PAD, UNK] + kept)


# ------------------------------------------------------------ object lexicon

def default_lexicon(objects=None) -> dict:
    """Surface form -> canonical object map covering singulars and plurals."""
    lex = {}
    for obj in (objects or OBJECTS):
        lex[obj] = obj
        lex[obj + "s"] = obj
    return lex


def save_lexicon(lexicon: dict, path):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    lines = [f"{surface}\t{canon}\n" for surface, canon in sorted(lexicon.items())]
    tmp.write_text("".join(lines), encoding="utf-8")
    tmp.replace(path)


def load_lexicon(path) -> dict:
    lex = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        try:
            surface, canon = line.split("\t")
        except ValueError as exc:
            raise DataError(f"bad lexicon line {line!r} in {path}") from exc
        lex[surface] = canon
    return lex


def caption_objects(tokens, lexicon: dict) -> list:
    """Canonical objects mentioned in a caption, in mention order.

    Multi-word surface forms (keys containing spaces) are matched greedily,
    longest first, before single tokens.
    """
    multi = sorted((k.split() for k in lexicon if " " in k),
                   key=len, reverse=True)
    found = []
    i = 0
    while i < len(tokens):
        hit = None
        for form in multi:
            if tokens[i:i + len(form)] == form:
                hit = " ".join(form)
                break
        if hit is not None:
            found.append(lexicon[hit])
            i += len(hit.split())
            continue
        if tokens[i] in lexicon:
            found.append(lexicon[tokens[i]])
        i += 1
    return found


# ------------------------------------------------------------------ splits

@dataclass
class SplitSpec:
    train: list
    val: list
    test: list
    mode: str = "standard"

    def __post_init__(self):
        ids = self.train + self.val + self.test
        if len(set(ids)) != len(ids):
            raise DataError("split sections overlap")

    def save(self, path):
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(f"# mode: {self.mode}\n")
            for name, ids in (("train", self.train), ("val", self.val),
                              ("test", self.test)):
                fh.write(f"[{name}]\n")
                for i in ids:
                    fh.write(i + "\n")
        tmp.replace(path)

    @classmethod
    def load(cls, path):
        sections = {"train": [], "val": [], "test": []}
        current = None
        mode = "standard"
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            if line.startswith("# mode:"):
                mode = line.split(":", 1)[1].strip()
                continue
            if line.startswith("["):
                name = line.strip("[]")
                if name not in sections:
                    raise DataError(f"unknown split section {name!r} in {path}")
                current = sections[name]
                continue
            if current is None:
                raise DataError(f"id {line!r} before any section in {path}")
            current.append(line)
        return cls(sections["train"], sections["val"], sections["test"], mode)


def build_standard_split(records, seed: int, val_frac: float = 0.15,
                         test_frac: float = 0.15) -> SplitSpec:
    ids = [r.image_id for r in records]
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 10])
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_val = int(round(val_frac * len(ids)))
    n_test = int(round(test_frac * len(ids)))
    if n_val + n_test >= len(ids):
        raise DataError("split fractions leave no training images")
    return SplitSpec(train=order[n_val + n_test:], val=order[:n_val],
                     test=order[n_val:n_val + n_test], mode="standard")


def _image_pairs(records, lexicon):
    """Per image: the set of unordered canonical-object pairs co-occurring
    in at least one of its captions."""
    pairs = {}
    for rec in records:
        s = set()
        for caption in rec.captions:
            objs = sorted(set(caption_objects(caption, lexicon)))
            s.update(frozenset((a, b)) for i, a in enumerate(objs)
                     for b in objs[i + 1:])
        pairs[rec.image_id] = s
    return pairs


def build_robust_split(records, seed: int, lexicon: dict | None = None,
                       holdout_frac: float = 0.3) -> SplitSpec:
    """Partition such that no object pair co-occurring in a held-out caption
    co-occurs in any training caption.

    Images sharing a pair are merged into groups (the transitive closure of
    the obvious greedy rule: holding out a pair pulls in every image carrying
    it, whose other pairs must then be held out too). Small groups are taken
    into the held-out side until the target fraction is reached; the result
    is re-verified before returning.
    """
    lexicon = lexicon if lexicon is not None else default_lexicon()
    pairs = _image_pairs(records, lexicon)
    ids = [r.image_id for r in records]

    parent = {i: i for i in ids}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    owner = {}
    for img in ids:
        for p in pairs[img]:
            if p in owner:
                union(img, owner[p])
            else:
                owner[p] = img
    groups = {}
    for img in ids:
        groups.setdefault(find(img), []).append(img)
    components = sorted(groups.values(), key=lambda g: (len(g), g[0]))

    target = max(1, int(round(holdout_frac * len(ids))))
    holdout = []
    for comp in components:
        if len(holdout) >= target:
            break
        if len(holdout) + len(comp) > len(ids) - 1:  # keep train non-empty
            continue
        holdout.extend(comp)
    if not holdout or len(holdout) == len(ids):
        raise DataError("no feasible pair-disjoint split: the co-occurrence "
                        "graph is a single group")

    rng = np.random.default_rng([seed & 0x7FFFFFFF, 11])
    holdout = [holdout[i] for i in rng.permutation(len(holdout))]
    n_test = max(1, len(holdout) // 2)
    test, val = holdout[:n_test], holdout[n_test:]
    train = [i for i in ids if i not in set(holdout)]
    split = SplitSpec(train=train, val=val, test=test, mode="robust")
    ok, offender = verify_robust_split(records, split, lexicon)
    if not ok:
        raise DataError(f"robust split verification failed on pair {offender}")
    return split


def verify_robust_split(records, split: SplitSpec, lexicon: dict | None = None):
    """Brute-force re-check of the pair-disjointness invariant, independent
    of how the split was built. Returns (ok, offending pair or None)."""
    lexicon = lexicon if lexicon is not None else default_lexicon()
    by_id = {r.image_id: r for r in records}
    pairs = _image_pairs(records, lexicon)
    train_pairs = set()
    for i in split.train:
        train_pairs |= pairs[by_id[i].image_id]
    for i in split.val + split.test:
        overlap = pairs[by_id[i].image_id] & train_pairs
        if overlap:
            return False, sorted(sorted(p) for p in overlap)[0]
    return True, None


# ----------------------------------------------------------------- file I/O

def save_corpus(records, path):
    """Line-delimited records; per line one JSON object with fields in the
    order image_id, global_feature, grid_features (row-major), captions,
    gt_objects, embedding."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "image_id": r.image_id,
                "global_feature": [float(x) for x in r.global_feature],
                "grid_features": [[float(x) for x in row]
                                  for row in r.grid_features],
                "captions": [" ".join(c) for c in r.captions],
                "gt_objects": sorted(r.gt_objects),
                "embedding": (None if r.embedding is None
                              else [float(x) for x in r.embedding]),
            }
            fh.write(json.dumps(obj) + "\n")
    tmp.replace(path)


def load_corpus(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(CorpusRecord(
                    image_id=obj["image_id"],
                    grid_features=np.array(obj["grid_features"],
                                           dtype=np.float32),
                    global_feature=np.array(obj["global_feature"],
                                            dtype=np.float32),
                    captions=[c.split() for c in obj["captions"]],
                    gt_objects=set(obj["gt_objects"]),
                    embedding=(None if obj.get("embedding") is None
                               else np.array(obj["embedding"])),
                ))
            except (KeyError, ValueError) as exc:
                raise DataError(f"bad corpus line {n} in {path}: {exc}") from exc
    if not records:
        raise DataError(f"corpus file {path} holds no records")
    return records

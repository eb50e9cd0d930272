"""Caption quality metrics and object-hallucination counting.

BLEU uses clipped n-gram precisions with no smoothing (a zero precision at
any order zeroes the sentence score) and the closest-reference brevity
penalty; the corpus variant aggregates clipped numerators and denominators
over segments before the geometric mean. ROUGE-L is the LCS F-measure with
a squared beta of 1.2, maximized over references.

The consensus metric builds length-normalized TF-IDF vectors per n-gram
order (n = 1..4) with idf = log((N + 1) / max(df, 1)) over the reference
corpus of N images, so in-corpus n-grams always keep positive weight and a
candidate identical to its reference scores exactly 10 after the x10
scaling. Per reference, the cosine at each order is damped by a Gaussian
penalty exp(-(len_c - len_r)^2 / (2 * sigma^2)) with sigma = 6; orders where
either vector is empty contribute zero.

Hallucination counting maps caption tokens (and listed multi-word forms)
through the object lexicon; a mention is hallucinated when its canonical
object is absent from the image's ground-truth set. The sentence rate is
the fraction of captions with at least one hallucinated mention, the
instance rate the fraction of mentions that are hallucinated.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from semcap.corpus import caption_objects
from semcap.tensor import ContractError

CIDER_SIGMA = 6.0
ROUGE_BETA_SQ = 1.2


def ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c_len: int, ref_lens) -> int:
    return min(ref_lens, key=lambda r: (abs(r - c_len), r))


def _clipped_stats(candidate, references, max_n):
    """Per order: clipped match count and candidate n-gram count."""
    matches, totals = [], []
    for n in range(1, max_n + 1):
        cand = ngram_counts(candidate, n)
        best = Counter()
        for ref in references:
            for gram, count in ngram_counts(ref, n).items():
                if count > best[gram]:
                    best[gram] = count
        matches.append(sum(min(count, best[gram])
                           for gram, count in cand.items()))
        totals.append(max(len(candidate) - n + 1, 0))
    return matches, totals


def bleu(candidate, references, max_n: int = 4) -> float:
    """Sentence-level score in [0, 1]; no smoothing."""
    if not candidate:
        raise ContractError("BLEU needs a non-empty candidate")
    if not references or any(not r for r in references):
        raise ContractError("BLEU needs non-empty references")
    matches, totals = _clipped_stats(candidate, references, max_n)
    if any(t == 0 or m == 0 for m, t in zip(matches, totals)):
        return 0.0
    log_prec = math.fsum(math.log(m / t) for m, t in zip(matches, totals))
    r = _closest_ref_len(len(candidate), [len(ref) for ref in references])
    bp = math.exp(min(0.0, 1.0 - r / len(candidate)))
    return bp * math.exp(log_prec / max_n)


def corpus_bleu(candidates, references_per_image, max_n: int = 4) -> float:
    """Corpus-level score: numerators and denominators pooled over segments."""
    if len(candidates) != len(references_per_image):
        raise ContractError("candidate/reference counts differ")
    if not candidates:
        raise ContractError("empty evaluation set")
    agg_m = [0] * max_n
    agg_t = [0] * max_n
    c_total = 0
    r_total = 0
    for cand, refs in zip(candidates, references_per_image):
        if not cand or not refs:
            raise ContractError("empty candidate or reference list")
        matches, totals = _clipped_stats(cand, refs, max_n)
        for i in range(max_n):
            agg_m[i] += matches[i]
            agg_t[i] += totals[i]
        c_total += len(cand)
        r_total += _closest_ref_len(len(cand), [len(r) for r in refs])
    if any(t == 0 or m == 0 for m, t in zip(agg_m, agg_t)):
        return 0.0
    log_prec = math.fsum(math.log(m / t) for m, t in zip(agg_m, agg_t))
    bp = math.exp(min(0.0, 1.0 - r_total / c_total))
    return bp * math.exp(log_prec / max_n)


def _lcs_len(a, b) -> int:
    dp = [0] * (len(b) + 1)
    for x in a:
        prev = 0
        for j, y in enumerate(b, 1):
            cur = dp[j]
            dp[j] = prev + 1 if x == y else max(dp[j], dp[j - 1])
            prev = cur
    return dp[len(b)]


def rouge_l(candidate, references, beta_sq: float = ROUGE_BETA_SQ) -> float:
    """LCS F-measure, maximized over references."""
    if not candidate or not references:
        raise ContractError("ROUGE needs non-empty inputs")
    best = 0.0
    for ref in references:
        lcs = _lcs_len(candidate, ref)
        if lcs == 0:
            continue
        p = lcs / len(candidate)
        r = lcs / len(ref)
        score = (1 + beta_sq) * p * r / (r + beta_sq * p)
        best = max(best, score)
    return best


# ------------------------------------------------------------------- cider

def _tfidf_vector(tokens, n, idf):
    counts = ngram_counts(tokens, n)
    total = sum(counts.values())
    if total == 0:
        return {}, 0.0
    vec = {g: (c / total) * idf(g) for g, c in counts.items()}
    norm = math.sqrt(math.fsum(v * v for v in vec.values()))
    return vec, norm


def cider_scores(candidates: dict, references: dict, max_n: int = 4,
                 sigma: float = CIDER_SIGMA) -> dict:
    """Per-image consensus scores; document frequencies come from the
    reference set being evaluated against."""
    if not references:
        raise ContractError("consensus scoring needs a reference corpus")
    if set(candidates) - set(references):
        raise ContractError("candidate images missing from the reference set")
    n_images = len(references)
    df = [defaultdict(int) for _ in range(max_n + 1)]
    for refs in references.values():
        for n in range(1, max_n + 1):
            seen = set()
            for ref in refs:
                seen.update(ngram_counts(ref, n))
            for gram in seen:
                df[n][gram] += 1

    def idf_for(n):
        return lambda g: math.log((n_images + 1) / max(df[n][g], 1))

    out = {}
    for image_id, cand in candidates.items():
        refs = references[image_id]
        per_n = []
        for n in range(1, max_n + 1):
            idf = idf_for(n)
            cvec, cnorm = _tfidf_vector(cand, n, idf)
            sims = []
            for ref in refs:
                rvec, rnorm = _tfidf_vector(ref, n, idf)
                if cnorm == 0.0 or rnorm == 0.0:
                    sims.append(0.0)
                    continue
                dot = math.fsum(v * rvec[g] for g, v in cvec.items()
                                if g in rvec)
                penalty = math.exp(-((len(cand) - len(ref)) ** 2)
                                   / (2.0 * sigma * sigma))
                sims.append(penalty * dot / (cnorm * rnorm))
            per_n.append(math.fsum(sims) / len(refs))
        out[image_id] = 10.0 * math.fsum(per_n) / max_n
    return out


def cider(candidates: dict, references: dict, max_n: int = 4,
          sigma: float = CIDER_SIGMA) -> float:
    scores = cider_scores(candidates, references, max_n, sigma)
    if not scores:
        raise ContractError("no candidates to score")
    return math.fsum(scores[k] for k in sorted(scores)) / len(scores)


# ------------------------------------------------------------------- chair

@dataclass
class ChairReport:
    sentence_rate: float           # captions with >= 1 hallucinated mention
    instance_rate: float           # hallucinated mentions / all mentions
    hallucinated: dict = field(default_factory=dict)  # image -> bad objects
    n_sentences: int = 0
    n_mentions: int = 0


def chair(captions: dict, gt_objects: dict, lexicon: dict) -> ChairReport:
    """Hallucination rates for one caption per image.

    `captions` maps image id to a token list, `gt_objects` to the image's
    canonical object set, `lexicon` surface forms to canonical objects.
    """
    missing = set(captions) - set(gt_objects)
    if missing:
        raise ContractError(f"no ground-truth objects for {sorted(missing)[:3]}")
    covered = set(lexicon.values())
    for image_id in captions:
        uncovered = gt_objects[image_id] - covered
        if uncovered:
            raise ContractError(
                f"lexicon does not cover objects {sorted(uncovered)} "
                f"of {image_id}")
    n_sent = 0
    bad_sent = 0
    n_mentions = 0
    bad_mentions = 0
    hallucinated = {}
    for image_id in sorted(captions):
        mentions = caption_objects(captions[image_id], lexicon)
        bad = [obj for obj in mentions if obj not in gt_objects[image_id]]
        n_sent += 1
        n_mentions += len(mentions)
        bad_mentions += len(bad)
        if bad:
            bad_sent += 1
            hallucinated[image_id] = bad
    return ChairReport(
        sentence_rate=bad_sent / n_sent if n_sent else 0.0,
        instance_rate=bad_mentions / n_mentions if n_mentions else 0.0,
        hallucinated=hallucinated,
        n_sentences=n_sent,
        n_mentions=n_mentions,
    )

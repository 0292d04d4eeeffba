"""Corpus-level caption metrics over multi-reference token lists.

All three scorers take a ScoredCorpus: per-id candidate token list plus one
or more reference token lists.  Scores are deterministic (ids are reduced in
sorted order) and bit-reproducible for a fixed corpus.
"""

import math
import warnings
from collections import Counter

from .errors import ContractError

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_MAX_N = 4


class ScoredCorpus:
    """Aligned candidate/reference sets keyed by clip id."""

    def __init__(self, candidates, references):
        if set(candidates) != set(references):
            missing = set(candidates).symmetric_difference(references)
            raise ContractError(f"candidate/reference ids differ: {sorted(missing)}")
        if not candidates:
            raise ContractError("empty corpus")
        for cid, refs in references.items():
            if not refs:
                raise ContractError(f"id {cid!r} has no references")
        self.candidates = {cid: list(toks) for cid, toks in candidates.items()}
        self.references = {
            cid: [list(r) for r in refs] for cid, refs in references.items()
        }
        self.ids = sorted(self.candidates)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(corpus):
    """Corpus BLEU with 4-gram clipped precision and no smoothing.

    Matched n-gram counts are clipped against the per-reference maximum;
    the brevity penalty uses the closest reference length (ties go to the
    shorter reference).
    """
    matches = [0] * 4
    totals = [0] * 4
    cand_len = 0
    ref_len = 0
    for cid in corpus.ids:
        cand = corpus.candidates[cid]
        refs = corpus.references[cid]
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            cand_counts = _ngrams(cand, n)
            if not cand_counts:
                continue
            max_ref = Counter()
            for r in refs:
                for gram, cnt in _ngrams(r, n).items():
                    if cnt > max_ref[gram]:
                        max_ref[gram] = cnt
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in cand_counts.items())
            totals[n - 1] += sum(cand_counts.values())

    if any(t == 0 or m == 0 for m, t in zip(matches, totals)):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4.0
    if cand_len > ref_len:
        brevity = 1.0
    else:
        brevity = math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_precision)


def _lcs_length(a, b):
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for tok_a in a:
        cur = [0] * (len(b) + 1)
        for j, tok_b in enumerate(b, start=1):
            if tok_a == tok_b:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(corpus, beta=ROUGE_BETA):
    """Mean over ids of the best LCS-based F score against any reference."""
    total = 0.0
    for cid in corpus.ids:
        cand = corpus.candidates[cid]
        best = 0.0
        for ref in corpus.references[cid]:
            lcs = _lcs_length(cand, ref)
            if lcs == 0:
                continue
            precision = lcs / len(cand)
            recall = lcs / len(ref)
            f = (1 + beta ** 2) * precision * recall / (recall + beta ** 2 * precision)
            best = max(best, f)
        total += best
    return total / len(corpus.ids)


def _all_ngram_counts(tokens, max_n=CIDER_MAX_N):
    counts = Counter()
    for n in range(1, max_n + 1):
        counts.update(_ngrams(tokens, n))
    return counts


def _tfidf_vector(counts, doc_freq, log_num_ids, max_n=CIDER_MAX_N):
    """Per-order TF-IDF maps plus their norms; IDF = log(N) - log(max(1, df))."""
    vecs = [{} for _ in range(max_n)]
    norms = [0.0] * max_n
    for gram, tf in counts.items():
        idf = log_num_ids - math.log(max(1.0, doc_freq.get(gram, 0.0)))
        n = len(gram) - 1
        weight = tf * idf
        vecs[n][gram] = weight
        norms[n] += weight * weight
    return vecs, [math.sqrt(v) for v in norms]


def cider_d(corpus, sigma=CIDER_SIGMA, max_n=CIDER_MAX_N):
    """CIDEr-D: clipped TF-IDF cosine per n-gram order with a Gaussian
    length penalty, averaged over orders and references, scaled by 10.

    Document frequencies count, per n-gram, the number of ids whose
    reference set contains it.  A single-id corpus has degenerate IDF and
    is scored with a warning.
    """
    num_ids = len(corpus.ids)
    if num_ids == 1:
        warnings.warn("cider_d over a single id: IDF statistics are degenerate")
    doc_freq = Counter()
    for cid in corpus.ids:
        seen = set()
        for ref in corpus.references[cid]:
            seen.update(_all_ngram_counts(ref, max_n))
        doc_freq.update(seen)
    log_num_ids = math.log(num_ids) if num_ids > 1 else 0.0

    total = 0.0
    for cid in corpus.ids:
        cand = corpus.candidates[cid]
        cand_vecs, cand_norms = _tfidf_vector(
            _all_ngram_counts(cand, max_n), doc_freq, log_num_ids, max_n)
        refs = corpus.references[cid]
        per_order = [0.0] * max_n
        for ref in refs:
            ref_vecs, ref_norms = _tfidf_vector(
                _all_ngram_counts(ref, max_n), doc_freq, log_num_ids, max_n)
            penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2.0 * sigma ** 2))
            for n in range(max_n):
                if cand_norms[n] == 0.0 or ref_norms[n] == 0.0:
                    continue
                dot = sum(
                    min(w, ref_vecs[n][g]) * ref_vecs[n][g]
                    for g, w in cand_vecs[n].items()
                    if g in ref_vecs[n]
                )
                per_order[n] += penalty * dot / (cand_norms[n] * ref_norms[n])
        total += 10.0 * sum(per_order) / (max_n * len(refs))
    return total / num_ids


def score_corpus(corpus):
    """All three metrics as a report dict (the MetricReport wire format)."""
    return {
        "bleu4": bleu4(corpus),
        "rouge_l": rouge_l(corpus),
        "cider_d": cider_d(corpus),
    }

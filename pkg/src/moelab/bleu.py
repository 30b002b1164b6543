"""Corpus-level BLEU from n-gram counts, no external scorer.

Geometric mean of clipped n-gram precisions (default up to 4-grams) times a
brevity penalty. When a higher-order precision is zero it gets add-one
smoothing so short corpora still score; orders with no n-grams at all (every
sequence shorter than n) are left out of the mean.
"""

import math
from collections import Counter


def _ngrams(seq, n):
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu(hypotheses, references, max_n=4):
    """Score in [0, 100]; sequences are lists of hashable tokens."""
    if len(hypotheses) != len(references):
        raise ValueError(
            f"corpus size mismatch: {len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if not references:
        raise ValueError("empty corpus")

    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            grams = _ngrams(hyp, n)
            if not grams:
                continue
            ref_grams = _ngrams(ref, n)
            totals[n - 1] += sum(grams.values())
            matches[n - 1] += sum(min(c, ref_grams[g]) for g, c in grams.items())

    log_terms = []
    for n in range(1, max_n + 1):
        m, t = matches[n - 1], totals[n - 1]
        if t == 0:
            continue  # no n-grams of this order exist in the corpus
        if m == 0:
            if n == 1:
                return 0.0
            m, t = m + 1, t + 1  # smoothing keeps rare higher orders finite
        log_terms.append(math.log(m / t))

    if hyp_len == 0:
        return 0.0
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(sum(log_terms) / len(log_terms))

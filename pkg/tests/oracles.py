"""Independent brute-force oracles used by the test suite.

These deliberately re-derive results through different code paths than the
package: dictionary counting with exact Fraction arithmetic for chrF++,
multiset enumeration for the paired bootstrap, and chain-rule probability
accumulation for sequence scores. They must not import implementation
internals beyond public entry points needed to drive the model.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


# ------------------------------------------------------------------ chrF++


def _count_ngrams(seq, n):
    counts = {}
    for i in range(len(seq) - n + 1):
        key = tuple(seq[i : i + n])
        counts[key] = counts.get(key, 0) + 1
    return counts


def _order_triple(hyp_seq, ref_seq, n):
    hyp_counts = _count_ngrams(hyp_seq, n)
    ref_counts = _count_ngrams(ref_seq, n)
    overlap = 0
    for gram, c in hyp_counts.items():
        if gram in ref_counts:
            overlap += min(c, ref_counts[gram])
    return sum(hyp_counts.values()), sum(ref_counts.values()), overlap


def chrf_pp_stats_oracle(hypothesis: str, reference: str):
    """Per-order (hyp_total, ref_total, match) for char orders 1-6 then word 1-2."""
    hyp_chars = [c for c in hypothesis if not c.isspace()]
    ref_chars = [c for c in reference if not c.isspace()]
    triples = [_order_triple(hyp_chars, ref_chars, n) for n in range(1, 7)]
    hyp_words = hypothesis.split()
    ref_words = reference.split()
    triples += [_order_triple(hyp_words, ref_words, n) for n in range(1, 3)]
    return triples


def chrf_pp_from_triples_oracle(triples, beta=2) -> float:
    b2 = Fraction(beta) ** 2
    fs = []
    for hyp_total, ref_total, match in triples:
        if hyp_total == 0 and ref_total == 0:
            continue
        p = Fraction(match, hyp_total) if hyp_total else Fraction(0)
        r = Fraction(match, ref_total) if ref_total else Fraction(0)
        denom = b2 * p + r
        fs.append((1 + b2) * p * r / denom if denom else Fraction(0))
    if not fs:
        return 0.0
    return float(100 * sum(fs) / len(fs))


def chrf_pp_oracle(hypothesis: str, reference: str) -> float:
    return chrf_pp_from_triples_oracle(chrf_pp_stats_oracle(hypothesis, reference))


def chrf_pp_corpus_oracle(hypotheses, references) -> float:
    totals = None
    for hyp, ref in zip(hypotheses, references):
        triples = chrf_pp_stats_oracle(hyp, ref)
        if totals is None:
            totals = [list(t) for t in triples]
        else:
            for acc, t in zip(totals, triples):
                acc[0] += t[0]
                acc[1] += t[1]
                acc[2] += t[2]
    return chrf_pp_from_triples_oracle(totals)


# ------------------------------------------------- exact paired bootstrap p


def exact_paired_p(per_sentence_a, per_sentence_b) -> float:
    """Exact probability, over all index multisets drawn uniformly with
    replacement, that mean(B) <= mean(A). Enumerates multisets with their
    multinomial weights; feasible for n <= ~10."""
    d = [b - a for a, b in zip(per_sentence_a, per_sentence_b)]
    n = len(d)
    total = Fraction(0)
    denom = Fraction(n) ** n
    fact_n = math.factorial(n)
    for counts in _compositions(n, n):
        weight = Fraction(fact_n, _prod_fact(counts)) / denom
        stat = sum(c * d[i] for i, c in enumerate(counts))
        if stat <= 0:
            total += weight
    return float(total)


def _compositions(total, parts):
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for rest in _compositions(total - head, parts - 1):
            yield (head,) + rest


def _prod_fact(counts):
    out = 1
    for c in counts:
        out *= math.factorial(c)
    return out


# ----------------------------------------------- sequence probability oracle


def chain_rule_logprob(model, source_ids, tokens) -> float:
    """Sequence log-probability via explicit per-step softmax over raw logits
    from the incremental decoder, skipping the forced BOS/tag prefix."""
    sess = model.start_session(source_ids, batch=1)
    start = 2 if len(tokens) > 1 and tokens[1] in model.vocab.lang_tags.values() else 1
    total = 0.0
    for t in range(len(tokens) - 1):
        logits = sess.step(np.array([tokens[t]]))[0]
        if t + 1 >= start:
            z = logits - logits.max()
            probs = np.exp(z) / np.exp(z).sum()
            total += math.log(probs[tokens[t + 1]])
    return total


def enumerate_terminated_sequences(content_ids, max_len):
    """All decoder sequences with <= max_len content tokens followed by EOS."""
    from grpolab.vocab import EOS

    for length in range(max_len + 1):
        for combo in itertools.product(content_ids, repeat=length):
            yield list(combo) + [EOS]

"""Evaluation metrics and statistics: chrF++, BLEU, paired bootstrap,
Pearson/Spearman correlation, and the catastrophic-forgetting audit.

chrF++ follows the canonical definition: character n-grams of order 1-6 on
whitespace-stripped text plus whitespace-token word n-grams of order 1-2,
per-order F-scores with beta=2 averaged over realizable orders, corpus scores
from summed sufficient statistics.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np
from scipy.special import stdtr

CHRF_CHAR_ORDER = 6
CHRF_WORD_ORDER = 2
CHRF_BETA = 2.0
BLEU_ORDER = 4


class UndefinedCorrelationError(ValueError):
    """Correlation requested on a zero-variance input."""


@dataclass
class MetricScore:
    name: str
    corpus_score: float
    sentence_scores: list[float]
    sufficient_stats: list[list[float]] = field(default_factory=list)


@dataclass
class SignificanceResult:
    delta: float
    p_value: float
    n_resamples: int
    seed: int

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05


@dataclass
class ForgettingEvent:
    task: str
    delta: float


# ----------------------------------------------------------------- chrF++


def _ngram_counts(items: Sequence[str], order: int) -> list[Counter]:
    return [
        Counter(tuple(items[i : i + n]) for i in range(len(items) - n + 1))
        for n in range(1, order + 1)
    ]


def _chrf_sentence_stats(hypothesis: str, reference: str) -> list[list[float]]:
    """Per-order [hyp_total, ref_total, match] triples: char orders then word orders."""
    hyp_chars = list("".join(hypothesis.split()))
    ref_chars = list("".join(reference.split()))
    hyp_words = hypothesis.split()
    ref_words = reference.split()
    stats = []
    for hyp_items, ref_items, order in (
        (hyp_chars, ref_chars, CHRF_CHAR_ORDER),
        (hyp_words, ref_words, CHRF_WORD_ORDER),
    ):
        hyp_counts = _ngram_counts(hyp_items, order)
        ref_counts = _ngram_counts(ref_items, order)
        for n in range(order):
            match = sum((hyp_counts[n] & ref_counts[n]).values())
            stats.append([
                float(sum(hyp_counts[n].values())),
                float(sum(ref_counts[n].values())),
                float(match),
            ])
    return stats


def chrf_from_stats(stats: Sequence[Sequence[float]], beta: float = CHRF_BETA) -> float:
    """Score from per-order sufficient statistics. Orders where neither side
    has any n-grams are skipped; with nothing realizable the score is 0."""
    b2 = beta * beta
    fscores = []
    for hyp_total, ref_total, match in stats:
        if hyp_total == 0 and ref_total == 0:
            continue
        prec = match / hyp_total if hyp_total > 0 else 0.0
        rec = match / ref_total if ref_total > 0 else 0.0
        denom = b2 * prec + rec
        fscores.append((1 + b2) * prec * rec / denom if denom > 0 else 0.0)
    if not fscores:
        return 0.0
    return 100.0 * sum(fscores) / len(fscores)


def chrf_pp(hypotheses: Sequence[str], references: Sequence[str]) -> MetricScore:
    if len(hypotheses) != len(references):
        raise ValueError(f"length mismatch: {len(hypotheses)} hypotheses vs "
                         f"{len(references)} references")
    for i, ref in enumerate(references):
        if ref == "":
            raise ValueError(f"empty reference at sentence {i}")
    n_orders = CHRF_CHAR_ORDER + CHRF_WORD_ORDER
    totals = [[0.0, 0.0, 0.0] for _ in range(n_orders)]
    sentence_scores = []
    for hyp, ref in zip(hypotheses, references):
        stats = _chrf_sentence_stats(hyp, ref)
        sentence_scores.append(chrf_from_stats(stats))
        for acc, s in zip(totals, stats):
            acc[0] += s[0]
            acc[1] += s[1]
            acc[2] += s[2]
    return MetricScore("chrf++", chrf_from_stats(totals), sentence_scores, totals)


# ------------------------------------------------------------------- BLEU


def _bleu_tokens(text: str, tokenizer: str) -> list[str]:
    if tokenizer == "whitespace":
        return text.split()
    if tokenizer == "char":
        return list("".join(text.split()))
    raise ValueError(f"unknown tokenizer {tokenizer!r} (use 'whitespace' or 'char')")


def _bleu_sentence_stats(hyp: str, ref: str, tokenizer: str) -> list[float]:
    """[match_1..4, total_1..4, hyp_len, ref_len]."""
    h = _bleu_tokens(hyp, tokenizer)
    r = _bleu_tokens(ref, tokenizer)
    hc = _ngram_counts(h, BLEU_ORDER)
    rc = _ngram_counts(r, BLEU_ORDER)
    matches = [float(sum((hc[n] & rc[n]).values())) for n in range(BLEU_ORDER)]
    totals = [float(sum(hc[n].values())) for n in range(BLEU_ORDER)]
    return matches + totals + [float(len(h)), float(len(r))]


def bleu_from_stats(stats: Sequence[float]) -> float:
    """Corpus BLEU from summed stats: geometric mean of realizable n-gram
    precisions with the exp(1 - ref/hyp) brevity penalty; unsmoothed, so any
    realizable order with zero matches gives 0."""
    matches = stats[:BLEU_ORDER]
    totals = stats[BLEU_ORDER : 2 * BLEU_ORDER]
    hyp_len, ref_len = stats[-2], stats[-1]
    if hyp_len == 0:
        return 0.0
    logs = []
    for m, t in zip(matches, totals):
        if t == 0:
            continue
        if m == 0:
            return 0.0
        logs.append(math.log(m / t))
    if not logs:
        return 0.0
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(sum(logs) / len(logs))


def bleu(hypotheses: Sequence[str], references: Sequence[str],
         tokenizer: str = "whitespace") -> MetricScore:
    if len(hypotheses) != len(references):
        raise ValueError(f"length mismatch: {len(hypotheses)} hypotheses vs "
                         f"{len(references)} references")
    agg = [0.0] * (2 * BLEU_ORDER + 2)
    sentence_scores = []
    for hyp, ref in zip(hypotheses, references):
        s = _bleu_sentence_stats(hyp, ref, tokenizer)
        sentence_scores.append(bleu_from_stats(s))
        for i, v in enumerate(s):
            agg[i] += v
    return MetricScore("bleu", bleu_from_stats(agg), sentence_scores, [agg])


# ------------------------------------------------------- paired bootstrap


def paired_bootstrap(
    per_sentence_a: Sequence[float],
    per_sentence_b: Sequence[float],
    n_resamples: int = 1000,
    seed: int = 0,
) -> SignificanceResult:
    """One-sided paired bootstrap over sentence indices: p is the fraction of
    resamples where system B's corpus-level (mean) score fails to beat A's."""
    a = np.asarray(per_sentence_a, dtype=np.float64)
    b = np.asarray(per_sentence_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("need at least 2 sentences")
    rng = np.random.default_rng(np.random.PCG64(seed))
    idx = rng.integers(0, a.size, size=(n_resamples, a.size))
    mean_a = a[idx].mean(axis=1)
    mean_b = b[idx].mean(axis=1)
    p = float(np.mean(mean_b <= mean_a))
    return SignificanceResult(
        delta=float(b.mean() - a.mean()), p_value=p, n_resamples=n_resamples, seed=seed
    )


# ----------------------------------------------------------- correlations


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two equal-length vectors")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("zero variance input")
    xc = x - x.mean()
    yc = y - y.mean()
    return float((xc @ yc) / math.sqrt((xc @ xc) * (yc @ yc)))


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties averaged."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Rank correlation with a two-sided p-value: exact permutation for
    n <= 10, Student-t approximation above."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two equal-length vectors")
    n = x.size
    if n < 3:
        raise ValueError("spearman needs length >= 3")
    rx = average_ranks(x)
    ry = average_ranks(y)
    rho = pearson(rx, ry)
    if n <= 10:
        p = _spearman_exact_p(rx, ry, rho)
    else:
        if abs(rho) >= 1.0:
            p = 0.0
        else:
            t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
            p = 2.0 * float(stdtr(n - 2, -abs(t)))
    return rho, p


def _spearman_exact_p(rx: np.ndarray, ry: np.ndarray, rho_obs: float) -> float:
    n = rx.size
    xc = rx - rx.mean()
    xc /= math.sqrt(float(xc @ xc))
    yc = ry - ry.mean()
    yc /= math.sqrt(float(yc @ yc))
    total = math.factorial(n)
    count = 0
    threshold = abs(rho_obs) - 1e-12
    perms = itertools.permutations(range(n))
    chunk = 40320
    while True:
        block = np.asarray(list(itertools.islice(perms, chunk)), dtype=np.int64)
        if block.size == 0:
            break
        rhos = yc[block] @ xc
        count += int(np.count_nonzero(np.abs(rhos) >= threshold))
    return count / total


# ------------------------------------------------------- forgetting audit


def forgetting_audit(
    adapter_scores: dict[str, float],
    baseline_scores: dict[str, float],
    threshold: float = 1.0,
) -> list[ForgettingEvent]:
    """Per-task chrF++ deltas vs precomputed baselines; an event is a
    degradation strictly exceeding the threshold (delta < -threshold)."""
    events = []
    for task in sorted(adapter_scores):
        if task not in baseline_scores:
            raise ValueError(f"missing baseline score for task {task!r}")
        delta = adapter_scores[task] - baseline_scores[task]
        if delta < -threshold:
            events.append(ForgettingEvent(task=task, delta=delta))
    return events


# ----------------------------------------------------------- builtin data


@dataclass(frozen=True)
class HeadroomRow:
    language: str
    baseline: float
    discriminability: float
    delta: float
    flagged_outlier: bool


def load_headroom_fixture() -> list[HeadroomRow]:
    """Bundled reference rows: 13 translation directions with baseline chrF++,
    reward discriminability, observed gain, and an outlier flag."""
    rows = []
    text = resources.files("grpolab.data").joinpath("headroom_reference.csv").read_text()
    for line in text.splitlines():
        if not line or line.startswith("#") or line.startswith("language,"):
            continue
        lang, base, disc, delta, flag = line.split(",")
        rows.append(HeadroomRow(lang, float(base), float(disc), float(delta), flag == "1"))
    return rows

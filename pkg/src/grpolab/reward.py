"""Reference-free reward stack.

Two components feed an equal-weight hybrid: a hashed character-n-gram cosine
(cross-lingual embedding-similarity stand-in) and a quality-estimation proxy
that scores hypotheses against the synthetic task's hidden ground truth.

The QE proxy deliberately consumes supervision that is unavailable to the
policy at fine-tuning time: that is exactly the epistemic status of a
pretrained QE head, and it is what makes the stack "reference-free" only at
the fine-tuning stage. Do not mistake it for an unsupervised signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .metrics import chrf_pp, pearson

EMBED_DIM = 4096
EMBED_ORDERS = (2, 3, 4)
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class ComponentUnavailableError(RuntimeError):
    """A reward component cannot score under the given task (no ground truth)."""


@dataclass(frozen=True)
class RewardComponent:
    name: str
    fn: Callable[[str, str], float]
    weight: float


@dataclass
class RewardBundle:
    component_scores: dict[str, float]
    weights: dict[str, float]
    hybrid: float


@dataclass
class ClineRates:
    """Degradation knobs for the quality cline; defaults give a visually
    monotone six-level cline and are config-overridable."""

    word_drop: float = 0.10
    char_noise: float = 0.10
    truncation: float = 0.50


@dataclass
class ClineEntry:
    source: str
    candidates: list[tuple[int, str]]  # (rank 1..6, text)


@dataclass
class QualityCline:
    entries: list[ClineEntry]
    seed: int


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _hashed_ngram_vector(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    vec = np.zeros(dim)
    for n in EMBED_ORDERS:
        for i in range(len(text) - n + 1):
            vec[_fnv1a(text[i : i + n].encode("utf-8")) % dim] += 1.0
    return vec


def embed_similarity_reward(source: str, hypothesis: str) -> float:
    """Cosine of L2-normalized hashed char-n-gram count vectors, mapped to [0, 1].

    Texts too short to produce any n-gram yield the neutral 0.5 unless both
    sides are identical (self-similarity stays 1.0).
    """
    u = _hashed_ngram_vector(source)
    v = _hashed_ngram_vector(hypothesis)
    nu = math.sqrt(float(u @ u))
    nv = math.sqrt(float(v @ v))
    if nu == 0.0 or nv == 0.0:
        return 1.0 if source == hypothesis else 0.5
    cos = float(u @ v) / (nu * nv)
    return (cos + 1.0) / 2.0


def qe_proxy_reward(source: str, hypothesis: str, task) -> float:
    """chrF++-based quality estimate against the task's ideal output, in [0, 1].

    Oracle-assisted: the task's hidden transduction plays the role of the QE
    head's pretraining knowledge.
    """
    gt = getattr(task, "ground_truth", None)
    if gt is None:
        raise ComponentUnavailableError(
            f"task {getattr(task, 'task_id', task)!r} has no ground-truth function"
        )
    ideal = gt(source)
    if ideal == "":
        return 1.0 if hypothesis == "" else 0.0
    return chrf_pp([hypothesis], [ideal]).corpus_score / 100.0


def hybrid_reward(components: Sequence[RewardComponent], source: str, hypothesis: str) -> RewardBundle:
    """Weighted combination; weights must sum to 1 within 1e-12."""
    total_w = sum(c.weight for c in components)
    if abs(total_w - 1.0) > 1e-12:
        raise ValueError(f"component weights sum to {total_w!r}, expected 1")
    scores = {c.name: c.fn(source, hypothesis) for c in components}
    hybrid = sum(c.weight * scores[c.name] for c in components)
    return RewardBundle(
        component_scores=scores,
        weights={c.name: c.weight for c in components},
        hybrid=hybrid,
    )


def default_components(task, weights: tuple[float, float] = (0.5, 0.5)) -> list[RewardComponent]:
    """The equal-weight hybrid: embedding similarity plus QE proxy."""
    return [
        RewardComponent("embed_sim", embed_similarity_reward, weights[0]),
        RewardComponent("qe_proxy", lambda s, h: qe_proxy_reward(s, h, task), weights[1]),
    ]


def reward_fn(task, weights: tuple[float, float] = (0.5, 0.5)) -> Callable[[str, str], float]:
    components = default_components(task, weights)
    return lambda source, hyp: hybrid_reward(components, source, hyp).hybrid


def component_correlation(
    components: Sequence[RewardComponent], pairs: Sequence[tuple[str, str]]
) -> float:
    """Pearson r between two components' scores over a hypothesis set."""
    if len(components) != 2:
        raise ValueError("component_correlation compares exactly two components")
    a = [components[0].fn(s, h) for s, h in pairs]
    b = [components[1].fn(s, h) for s, h in pairs]
    return pearson(a, b)


# ------------------------------------------------------------ quality cline


def _drop_words(words: list[str], rate: float, rng) -> list[str]:
    if len(words) < 2:
        return list(words)
    k = min(max(1, round(rate * len(words))), len(words) - 1)
    drop = set(rng.choice(len(words), size=k, replace=False))
    return [w for i, w in enumerate(words) if i not in drop]


def _swap_adjacent(words: list[str], rng) -> list[str]:
    if len(words) < 2:
        return list(words)
    i = int(rng.integers(0, len(words) - 1))
    out = list(words)
    out[i], out[i + 1] = out[i + 1], out[i]
    return out


def _char_noise(text: str, rate: float, alphabet: list[str], rng) -> str:
    chars = list(text)
    positions = [i for i, c in enumerate(chars) if c != " "]
    if not positions:
        return text
    k = max(1, round(rate * len(positions)))
    for i in rng.choice(positions, size=min(k, len(positions)), replace=False):
        chars[i] = alphabet[int(rng.integers(0, len(alphabet)))]
    return "".join(chars)


def _truncate(text: str, keep: float) -> str:
    return text[: max(1, int(len(text) * keep))]


def build_quality_cline(
    pairs: Sequence[tuple[str, str]],
    n_sentences: int,
    seed: int,
    rates: ClineRates = ClineRates(),
) -> QualityCline:
    """Six candidates per source: the reference, four cumulative degradations
    (word drop, adjacent swap, character noise, truncation) and a nonsense
    candidate built from a shuffled unrelated reference."""
    if n_sentences > len(pairs):
        raise ValueError(f"requested {n_sentences} sentences from a corpus of {len(pairs)}")
    root = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    chosen = sorted(root.choice(len(pairs), size=n_sentences, replace=False))
    alphabet = sorted({c for _, ref in pairs for c in ref if c != " "})
    if not alphabet:
        raise ValueError("empty references")
    entries = []
    for pos, idx in enumerate(chosen):
        source, ref = pairs[idx]
        if ref == "":
            raise ValueError(f"empty reference at corpus index {idx}")
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, pos)))
        words = ref.split()
        r2_words = _drop_words(words, rates.word_drop, rng)
        r3_words = _swap_adjacent(r2_words, rng)
        r4 = _char_noise(" ".join(r3_words), rates.char_noise, alphabet, rng)
        r5 = _truncate(r4, rates.truncation)
        other_idx = chosen[(pos + 1) % len(chosen)]
        if other_idx == idx:  # single-sentence cline: any other corpus row
            other_idx = (idx + 1) % len(pairs)
        other_chars = list(pairs[other_idx][1])
        rng.shuffle(other_chars)
        r6 = "".join(other_chars)
        entries.append(ClineEntry(source=source, candidates=[
            (1, ref),
            (2, " ".join(r2_words)),
            (3, " ".join(r3_words)),
            (4, r4),
            (5, r5),
            (6, r6),
        ]))
    return QualityCline(entries=entries, seed=seed)


def discriminability(cline: QualityCline, components: Sequence[RewardComponent]) -> float:
    """Pearson r between hybrid reward and quality rank, pooled over all
    (sentence, candidate) pairs. Strongly negative means the reward ranks
    quality correctly. Raises UndefinedCorrelationError on constant scores."""
    scores, ranks = [], []
    for entry in cline.entries:
        for rank, text in entry.candidates:
            scores.append(hybrid_reward(components, entry.source, text).hybrid)
            ranks.append(float(rank))
    return pearson(scores, ranks)


def diagnostic_rows(cline: QualityCline, components: Sequence[RewardComponent]):
    """CSV-ready rows: sentence id, rank, each component score, hybrid score."""
    names = [c.name for c in components]
    header = ["sentence", "rank", *names, "hybrid"]
    rows = []
    for si, entry in enumerate(cline.entries):
        for rank, text in entry.candidates:
            bundle = hybrid_reward(components, entry.source, text)
            rows.append([si, rank, *[bundle.component_scores[n] for n in names], bundle.hybrid])
    return header, rows

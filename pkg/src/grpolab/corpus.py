"""Synthetic transduction tasks and parallel-corpus plumbing.

Tasks stand in for a set of target languages: each has a deterministic
ground-truth transduction whose difficulty knobs emulate a spectrum of
baseline headroom. Generation is fully seeded; regenerating with the same
seed yields byte-identical corpora.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

TASK_KINDS = ("cipher", "word_map", "reversal", "suffix_morph")
_LETTERS = "abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class Difficulty:
    alphabet_size: int = 20
    mapping_entropy: float = 1.0  # fraction of the alphabet that gets permuted
    suffix_count: int = 4
    noise_rate: float = 0.0  # fraction of words receiving an extra deterministic rotation

    def __post_init__(self):
        if not 2 <= self.alphabet_size <= 26:
            raise ValueError("alphabet_size must be in [2, 26]")
        if not 0.0 <= self.mapping_entropy <= 1.0:
            raise ValueError("mapping_entropy must be in [0, 1]")
        if self.suffix_count < 1:
            raise ValueError("suffix_count must be >= 1")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")


@dataclass
class TaskSpec:
    task_id: str
    kind: str
    difficulty: Difficulty
    seed: int
    ground_truth: Callable[[str], str] = field(repr=False)
    inverse: Callable[[str], str] | None = field(repr=False, default=None)
    lexicon: list[str] = field(default_factory=list, repr=False)

    def char_inventory(self) -> set[str]:
        """Every character that can appear on either side of the task."""
        chars = set(_LETTERS[: self.difficulty.alphabet_size]) | {" "}
        for w in self.lexicon:
            chars |= set(self.ground_truth(w))
        return chars

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "kind": self.kind,
            "seed": self.seed,
            "difficulty": {
                "alphabet_size": self.difficulty.alphabet_size,
                "mapping_entropy": self.difficulty.mapping_entropy,
                "suffix_count": self.difficulty.suffix_count,
                "noise_rate": self.difficulty.noise_rate,
            },
        }

    @classmethod
    def from_json(cls, blob: dict) -> "TaskSpec":
        return gen_task(blob["kind"], Difficulty(**blob["difficulty"]), blob["seed"],
                        task_id=blob.get("task_id"))


@dataclass
class SplitCorpus:
    train: list[tuple[str, str]]
    eval_subset: list[tuple[str, str]]
    devtest: list[tuple[str, str]]
    seed: int

    @property
    def train_sources(self) -> list[str]:
        return [s for s, _ in self.train]


def _stable_hash(word: str, salt: int) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8, salt=salt.to_bytes(8, "little"))
    return int.from_bytes(digest.digest(), "little")


def _word_rotate(word: str) -> str:
    return word[1:] + word[:1] if len(word) > 1 else word


def _apply_noise(mapped_word: str, original_word: str, rate: float, seed: int) -> str:
    if rate > 0.0 and (_stable_hash(original_word, seed ^ 0x5EED) % 10_000) < rate * 10_000:
        return _word_rotate(mapped_word)
    return mapped_word


def gen_task(
    kind: str,
    difficulty: Difficulty,
    seed: int,
    task_id: str | None = None,
    word_len: tuple[int, int] = (2, 8),
    lexicon_size: int = 120,
) -> TaskSpec:
    """Deterministic task construction; distinct seeds give distinct mappings
    with probability ~1, and mapping_entropy 0 degenerates to the identity."""
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}; choose from {TASK_KINDS}")
    rng = np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(TASK_KINDS.index(kind),))
    )
    alphabet = list(_LETTERS[: difficulty.alphabet_size])
    task_id = task_id or f"{kind}-{seed}"
    lexicon = _gen_lexicon(alphabet, rng, size=lexicon_size, word_len=word_len)
    noise = difficulty.noise_rate

    def wordwise(fn: Callable[[str], str]) -> Callable[[str], str]:
        def apply(text: str) -> str:
            return " ".join(_apply_noise(fn(w), w, noise, seed) for w in text.split())
        return apply

    inverse = None
    if kind == "cipher":
        n_perm = round(difficulty.mapping_entropy * len(alphabet))
        chosen = sorted(rng.choice(len(alphabet), size=n_perm, replace=False)) if n_perm else []
        table = {c: c for c in alphabet}
        if len(chosen) > 1:
            perm = _derangement([alphabet[i] for i in chosen], rng)
            for i, src_idx in enumerate(chosen):
                table[alphabet[src_idx]] = perm[i]
        fwd = str.maketrans(table)
        bwd = str.maketrans({v: k for k, v in table.items()})
        ground_truth = lambda text: text.translate(fwd)
        if noise == 0.0:
            inverse = lambda text: text.translate(bwd)
    elif kind == "word_map":
        perm = _derangement(lexicon, rng) if len(lexicon) > 1 else list(lexicon)
        table = dict(zip(lexicon, perm))
        back = {v: k for k, v in table.items()}
        ground_truth = wordwise(lambda w: table.get(w, w))
        if noise == 0.0:
            inverse = lambda text: " ".join(back.get(w, w) for w in text.split())
    elif kind == "reversal":
        ground_truth = lambda text: " ".join(reversed(text.split()))
        if noise == 0.0:
            inverse = ground_truth
    else:  # suffix_morph
        suffixes = []
        base_len = 1 + round(2 * difficulty.mapping_entropy)
        for _ in range(difficulty.suffix_count):
            length = int(rng.integers(base_len, base_len + 2))
            suffixes.append("".join(alphabet[int(i)] for i in rng.integers(0, len(alphabet), length)))
        ground_truth = wordwise(
            lambda w: w + suffixes[_stable_hash(w, seed) % len(suffixes)]
        )

    return TaskSpec(
        task_id=task_id,
        kind=kind,
        difficulty=difficulty,
        seed=seed,
        ground_truth=ground_truth,
        inverse=inverse,
        lexicon=lexicon,
    )


def _gen_lexicon(alphabet: list[str], rng, size: int = 120,
                 word_len: tuple[int, int] = (2, 8)) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < size:
        length = int(rng.integers(word_len[0], word_len[1] + 1))
        w = "".join(alphabet[int(i)] for i in rng.integers(0, len(alphabet), length))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _derangement(items: list[str], rng) -> list[str]:
    """Permutation with no fixed points (retry sampling; terminates fast)."""
    n = len(items)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return [items[int(i)] for i in perm]


def gen_corpus(
    task: TaskSpec,
    n_train: int,
    n_eval: int,
    n_devtest: int,
    seed: int,
    sentence_words: tuple[int, int] = (3, 12),
) -> SplitCorpus:
    """Seeded sentence generation with exact-string-disjoint splits.

    Sources draw words from the task's fixed lexicon with a mildly Zipfian
    weighting; targets come from the ground-truth transduction."""
    total = n_train + n_eval + n_devtest
    if total < 1:
        raise ValueError("empty corpus requested")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    weights = 1.0 / (np.arange(len(task.lexicon)) + 2.0)
    weights /= weights.sum()
    sources: list[str] = []
    seen: set[str] = set()
    attempts = 0
    while len(sources) < total:
        attempts += 1
        if attempts > total * 200:
            raise ValueError("could not generate enough distinct sentences; "
                             "shrink the split sizes or widen the length range")
        n_words = int(rng.integers(sentence_words[0], sentence_words[1] + 1))
        idx = rng.choice(len(task.lexicon), size=n_words, p=weights)
        sent = " ".join(task.lexicon[int(i)] for i in idx)
        if sent not in seen:
            seen.add(sent)
            sources.append(sent)
    pairs = [(s, task.ground_truth(s)) for s in sources]
    return SplitCorpus(
        train=pairs[:n_train],
        eval_subset=pairs[n_train : n_train + n_eval],
        devtest=pairs[n_train + n_eval :],
        seed=seed,
    )


@dataclass
class SkippedLine:
    line_number: int
    reason: str


def load_tsv(
    path,
    n_eval: int = 0,
    n_devtest: int = 0,
    encoding: str = "utf-8",
) -> tuple[SplitCorpus, list[SkippedLine]]:
    """Load tab-separated (source, target) pairs, preserving them verbatim.

    Malformed lines are skipped and reported with their line numbers. A first
    line reading exactly "source<TAB>target" is treated as a header. The eval
    and devtest splits are taken from the tail, keeping file order."""
    skipped: list[SkippedLine] = []
    pairs: list[tuple[str, str]] = []
    with open(path, encoding=encoding, newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if lineno == 1 and line.lower() == "source\ttarget":
                continue
            if not line:
                skipped.append(SkippedLine(lineno, "empty line"))
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                skipped.append(SkippedLine(lineno, f"expected 2 columns, found {len(cols)}"))
                continue
            pairs.append((cols[0], cols[1]))
    if not pairs:
        raise ValueError(f"no valid (source, target) lines in {path}")
    if n_eval + n_devtest > len(pairs):
        raise ValueError("eval+devtest larger than the loaded corpus")
    n_train = len(pairs) - n_eval - n_devtest
    corpus = SplitCorpus(
        train=pairs[:n_train],
        eval_subset=pairs[n_train : n_train + n_eval],
        devtest=pairs[n_train + n_eval :],
        seed=0,
    )
    return corpus, skipped


def write_tsv(path, pairs: Sequence[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for src, tgt in pairs:
            fh.write(f"{src}\t{tgt}\n")

"""Character vocabulary with special ids and per-task target-language tags."""

from __future__ import annotations

from dataclasses import dataclass, field


PAD, BOS, EOS, UNK = 0, 1, 2, 3
_SPECIAL_SYMBOLS = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass
class Vocabulary:
    """Dense symbol<->id map: 4 specials, then language tags, then characters.

    Language tags condition the decoder on the target task (one tag per
    task), mirroring target-language tokens in multilingual seq2seq models.
    """

    id_to_symbol: list[str]
    symbol_to_id: dict[str, int] = field(repr=False)
    lang_tags: dict[str, int]  # task id -> tag token id

    @classmethod
    def build(cls, chars: set[str] | list[str], task_ids: list[str]) -> "Vocabulary":
        symbols = list(_SPECIAL_SYMBOLS)
        tags = {}
        for task_id in task_ids:
            tags[task_id] = len(symbols)
            symbols.append(f"<2{task_id}>")
        for ch in sorted(set(chars)):
            if len(ch) != 1:
                raise ValueError(f"vocabulary characters must be single chars, got {ch!r}")
            symbols.append(ch)
        mapping = {s: i for i, s in enumerate(symbols)}
        if len(mapping) != len(symbols):
            raise ValueError("duplicate symbols in vocabulary")
        return cls(id_to_symbol=symbols, symbol_to_id=mapping, lang_tags=dict(tags))

    def __len__(self) -> int:
        return len(self.id_to_symbol)

    def encode(self, text: str) -> list[int]:
        return [self.symbol_to_id.get(ch, UNK) for ch in text]

    def decode(self, ids: list[int]) -> str:
        # Control tokens (specials and tags) never appear in surface text.
        n_control = 4 + len(self.lang_tags)
        return "".join(self.id_to_symbol[i] for i in ids if i >= n_control)

    def tag_id(self, task_id: str) -> int:
        try:
            return self.lang_tags[task_id]
        except KeyError:
            raise KeyError(f"no language tag registered for task {task_id!r}") from None

    def is_control(self, token_id: int) -> bool:
        return token_id < 4 + len(self.lang_tags)

    def to_json(self) -> dict:
        return {"symbols": self.id_to_symbol, "lang_tags": self.lang_tags}

    @classmethod
    def from_json(cls, blob: dict) -> "Vocabulary":
        symbols = list(blob["symbols"])
        return cls(
            id_to_symbol=symbols,
            symbol_to_id={s: i for i, s in enumerate(symbols)},
            lang_tags={k: int(v) for k, v in blob["lang_tags"].items()},
        )

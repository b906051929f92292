"""Experiment configuration: an INI-style file of [section] key=value pairs,
validated against a declared schema, plus dotted-key overrides.

Every knob is documented in the schema table below; docs/reference.md renders
the same table. Overrides are type-checked before any work starts.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from typing import Any


class ConfigError(ValueError):
    """Schema violation: unknown key, bad type, or malformed override."""


@dataclass(frozen=True)
class Field:
    default: Any
    kind: str  # int | float | str | bool | csv_float | csv_int | csv_str
    help: str


SCHEMA: dict[str, dict[str, Field]] = {
    "task": {
        "kind": Field("cipher", "str", "transduction kind: cipher | word_map | reversal | suffix_morph"),
        "alphabet_size": Field(12, "int", "letters in play (2..26)"),
        "mapping_entropy": Field(1.0, "float", "fraction of the alphabet that gets permuted (0 = identity)"),
        "suffix_count": Field(4, "int", "suffix table size for suffix_morph"),
        "noise_rate": Field(0.0, "float", "fraction of words with an extra deterministic rotation"),
        "seed": Field(11, "int", "task mapping seed"),
        "word_len_min": Field(2, "int", "lexicon word length lower bound"),
        "word_len_max": Field(5, "int", "lexicon word length upper bound"),
        "lexicon_size": Field(80, "int", "task lexicon size"),
    },
    "corpus": {
        "n_train": Field(200, "int", "training sentences"),
        "n_eval": Field(50, "int", "held-out eval-subset sentences (checkpoint selection)"),
        "n_devtest": Field(200, "int", "devtest sentences (final evaluation)"),
        "words_min": Field(3, "int", "sentence length lower bound, words"),
        "words_max": Field(6, "int", "sentence length upper bound, words"),
        "seed": Field(3, "int", "corpus sampling seed"),
        "tsv_path": Field("", "str", "when set, load this TSV instead of generating"),
    },
    "model": {
        "d_model": Field(64, "int", "model width"),
        "n_heads": Field(4, "int", "attention heads"),
        "d_ff": Field(128, "int", "feed-forward width"),
        "n_enc_layers": Field(2, "int", "encoder layers"),
        "n_dec_layers": Field(2, "int", "decoder layers"),
        "seed": Field(7, "int", "parameter init seed"),
        "init_checkpoint": Field("", "str", "load this checkpoint instead of init+pretrain"),
    },
    "lora": {
        "rank": Field(16, "int", "adapter rank r"),
        "alpha": Field(32.0, "float", "adapter scale numerator (contribution is alpha/r * B@A)"),
        "dropout": Field(0.05, "float", "adapter-input dropout during training"),
    },
    "pretrain": {
        "steps": Field(800, "int", "base pretraining steps (headroom lever)"),
        "lr": Field(0.01, "float", "pretraining learning rate"),
        "batch_size": Field(8, "int", "pretraining batch size"),
        "seed": Field(0, "int", "pretraining seed"),
    },
    "grpo": {
        "k": Field(12, "int", "hypotheses per step (group size)"),
        "eps_floor": Field(1e-4, "float", "stability floor added to the group reward std"),
        "eps_clip": Field(0.2, "float", "surrogate clip radius"),
        "beta": Field(0.001, "float", "KL coefficient"),
        "lr": Field(0.001, "float", "adapter learning rate (desk-scale default)"),
        "weight_decay": Field(0.0, "float", "AdamW decoupled weight decay (0 keeps no-op exactness)"),
        "temperature": Field(1.2, "float", "rollout sampling temperature"),
        "max_train_tokens": Field(64, "int", "rollout token cap"),
        "max_eval_tokens": Field(128, "int", "evaluation decode token cap"),
        "eval_every": Field(50, "int", "evaluation frequency in steps"),
        "eval_subset_size": Field(100, "int", "eval-subset sentences used per evaluation"),
        "total_steps": Field(600, "int", "optimizer steps"),
        "seed": Field(1, "int", "rollout/dropout seed"),
        "collapse_window": Field(50, "int", "variance-collapse monitor window, steps"),
        "collapse_floor": Field(1e-3, "float", "variance-collapse std floor"),
        "selection_metric": Field("chrf", "str", "best-checkpoint metric: chrf | reward"),
        "eval_decode": Field("greedy", "str", "in-training eval decode: greedy | beam"),
    },
    "sft": {
        "epochs": Field(3, "int", "supervised epochs"),
        "lr": Field(0.001, "float", "adapter learning rate"),
        "batch_size": Field(4, "int", "pairs per optimizer update"),
        "eval_every": Field(50, "int", "evaluation frequency in optimizer steps"),
        "seed": Field(1, "int", "batch order/dropout seed"),
    },
    "eval": {
        "beam_width": Field(4, "int", "beam width for final evaluations"),
        "max_tokens": Field(128, "int", "final evaluation decode cap"),
    },
    "experiment": {
        "arms": Field("sft:1,sft:3,grpo", "csv_str", "method arms beside the baseline"),
        "kl_grid": Field("0.0,0.001,0.01,0.05", "csv_float", "beta values for the KL ablation"),
        "n_grid": Field("50,100,200", "csv_int", "training-set sizes for the data-size ablation"),
        "ood_seed": Field(77, "int", "out-of-domain source pool seed (cross-domain template)"),
        "ood_words_min": Field(4, "int", "OOD pool sentence length lower bound"),
        "ood_words_max": Field(8, "int", "OOD pool sentence length upper bound"),
        "headroom_budgets": Field("100,300,800,2000,4000", "csv_int",
                                  "pretraining budgets for the headroom demonstration"),
        "headroom_grpo_steps": Field(300, "int", "GRPO steps per headroom-demo arm"),
        "forgetting_task_seeds": Field("11,21,31", "csv_int",
                                       "task seeds: first is trained, rest are held out"),
        "forgetting_threshold": Field(1.0, "float", "chrF++ degradation that counts as an event"),
        "forgetting_train_arm": Field("grpo", "str", "which method trains the audited adapters"),
    },
    "reward": {
        "embed_weight": Field(0.5, "float", "embedding-similarity component weight"),
        "qe_weight": Field(0.5, "float", "QE-proxy component weight"),
        "cline_sentences": Field(50, "int", "sentences per discriminability cline"),
        "cline_seed": Field(5, "int", "cline construction seed"),
    },
}


def _coerce(section: str, key: str, raw: Any) -> Any:
    field = SCHEMA[section][key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if field.kind == "int":
            return int(text)
        if field.kind == "float":
            return float(text)
        if field.kind == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if field.kind == "csv_float":
            return [float(v) for v in text.split(",") if v.strip() != ""]
        if field.kind == "csv_int":
            return [int(v) for v in text.split(",") if v.strip() != ""]
        if field.kind == "csv_str":
            return [v.strip() for v in text.split(",") if v.strip() != ""]
        return text
    except ValueError as exc:
        raise ConfigError(
            f"bad value for {section}.{key}: {raw!r} (expected {field.kind})"
        ) from exc


class Config:
    """Validated configuration; sections are dicts keyed by schema keys."""

    def __init__(self, values: dict[str, dict[str, Any]]):
        self._values = values

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self._values[section]

    def get(self, dotted: str) -> Any:
        section, key = dotted.split(".", 1)
        return self._values[section][key]

    def to_dict(self) -> dict:
        return {s: dict(kv) for s, kv in self._values.items()}


def defaults() -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for section, fields in SCHEMA.items():
        sec = {}
        for key, f in fields.items():
            sec[key] = _coerce(section, key, f.default) if isinstance(f.default, str) and \
                f.kind.startswith("csv") else f.default
        out[section] = sec
    return out


def load_config(path: str | None = None, overrides: list[str] = ()) -> Config:
    """Defaults, then the file, then dotted overrides; everything schema-checked."""
    values = defaults()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                values[section][key] = _coerce(section, key, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override key must be section.key, got {dotted!r}")
        section, key = dotted.split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        values[section][key] = _coerce(section, key, raw)
    return Config(values)


def schema_markdown() -> str:
    """Render the schema as the reference documentation table."""
    lines = []
    for section, fields in SCHEMA.items():
        lines.append(f"### [{section}]\n")
        lines.append("| key | type | default | meaning |")
        lines.append("|-----|------|---------|---------|")
        for key, f in fields.items():
            lines.append(f"| {key} | {f.kind} | `{f.default}` | {f.help} |")
        lines.append("")
    return "\n".join(lines)

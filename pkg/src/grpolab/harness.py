"""Experiment orchestration: baseline/SFT/GRPO comparison templates, the KL and
data-size ablations, the decoding-regime control, headroom analysis, the
forgetting audit, and deterministic report rendering.

Reports are pure functions of the persisted results.jsonl: rendering again
from the same logs reproduces report.csv and summary.txt byte-for-byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .config import Config
from .corpus import Difficulty, SplitCorpus, TaskSpec, gen_corpus, gen_task, load_tsv
from .grpo import GrpoConfig, TrainState, train as grpo_train
from .metrics import MetricScore, chrf_pp, paired_bootstrap, spearman
from .model import LoraConfig, ModelDims, PolicyModel
from .reward import default_components, reward_fn
from .sft import SftConfig, pretrain_base, sft_train
from .vocab import Vocabulary


class SampleSizeError(ValueError):
    """Too few tasks for a correlation analysis."""


@dataclass
class Bench:
    """Everything one task's experiments need: data, model, reward.

    With multi-task pretraining, ``task``/``corpus`` are the first (trained)
    task and ``all_tasks``/``all_corpora`` hold the full set."""

    task: TaskSpec
    corpus: SplitCorpus
    vocab: Vocabulary
    model: PolicyModel
    reward: Callable[[str, str], float]
    all_tasks: list[TaskSpec] = None
    all_corpora: list[SplitCorpus] = None


# ------------------------------------------------------------ construction


def build_task(cfg: Config, seed: int | None = None, task_id: str | None = None) -> TaskSpec:
    t = cfg["task"]
    return gen_task(
        t["kind"],
        Difficulty(
            alphabet_size=t["alphabet_size"],
            mapping_entropy=t["mapping_entropy"],
            suffix_count=t["suffix_count"],
            noise_rate=t["noise_rate"],
        ),
        seed if seed is not None else t["seed"],
        task_id=task_id,
        word_len=(t["word_len_min"], t["word_len_max"]),
        lexicon_size=t["lexicon_size"],
    )


def build_corpus(cfg: Config, task: TaskSpec, seed: int | None = None) -> SplitCorpus:
    c = cfg["corpus"]
    if c["tsv_path"]:
        corpus, _ = load_tsv(c["tsv_path"], n_eval=c["n_eval"], n_devtest=c["n_devtest"])
        return corpus
    return gen_corpus(
        task,
        n_train=c["n_train"],
        n_eval=c["n_eval"],
        n_devtest=c["n_devtest"],
        seed=seed if seed is not None else c["seed"],
        sentence_words=(c["words_min"], c["words_max"]),
    )


def model_dims(cfg: Config) -> ModelDims:
    m = cfg["model"]
    return ModelDims(
        d_model=m["d_model"],
        n_heads=m["n_heads"],
        d_ff=m["d_ff"],
        n_enc_layers=m["n_enc_layers"],
        n_dec_layers=m["n_dec_layers"],
    )


def lora_config(cfg: Config) -> LoraConfig:
    lo = cfg["lora"]
    return LoraConfig(rank=lo["rank"], alpha=lo["alpha"], dropout=lo["dropout"])


def grpo_config(cfg: Config, **over) -> GrpoConfig:
    g = dict(cfg["grpo"])
    g.update(over)
    return GrpoConfig(
        k=g["k"], eps_floor=g["eps_floor"], eps_clip=g["eps_clip"], beta=g["beta"],
        lr=g["lr"], weight_decay=g["weight_decay"], temperature=g["temperature"],
        max_train_tokens=g["max_train_tokens"], max_eval_tokens=g["max_eval_tokens"],
        eval_every=g["eval_every"], eval_subset_size=g["eval_subset_size"],
        total_steps=g["total_steps"], seed=g["seed"],
        collapse_window=g["collapse_window"], collapse_floor=g["collapse_floor"],
        selection_metric=g["selection_metric"], eval_decode=g["eval_decode"],
    )


def sft_config(cfg: Config, **over) -> SftConfig:
    s = dict(cfg["sft"])
    s.update(over)
    return SftConfig(
        epochs=s["epochs"], lr=s["lr"], batch_size=s["batch_size"],
        eval_every=s["eval_every"], seed=s["seed"],
        max_eval_tokens=cfg["grpo"]["max_eval_tokens"],
    )


def build_bench(
    cfg: Config,
    pretrain: bool = True,
    tasks: Sequence[TaskSpec] | None = None,
) -> Bench:
    """Build task(s), corpus, vocabulary and a (optionally pretrained) model.

    With several tasks the base model is pretrained on all of them round-robin
    and the bench carries the first (the trained-arm task)."""
    task_list = list(tasks) if tasks is not None else [build_task(cfg)]
    corpora = [build_corpus(cfg, t, seed=cfg["corpus"]["seed"] + i) for i, t in enumerate(task_list)]
    chars: set[str] = set()
    for t in task_list:
        chars |= t.char_inventory()
    vocab = Vocabulary.build(chars, [t.task_id for t in task_list])
    init_ckpt = cfg["model"]["init_checkpoint"]
    if init_ckpt:
        model, _ = PolicyModel.load_checkpoint(init_ckpt)
    else:
        model = PolicyModel.init(model_dims(cfg), vocab, seed=cfg["model"]["seed"],
                                 lora=lora_config(cfg))
        if pretrain and cfg["pretrain"]["steps"] > 0:
            p = cfg["pretrain"]
            pretrain_base(
                model,
                [c.train for c in corpora] if len(task_list) > 1 else corpora[0].train,
                [t.task_id for t in task_list] if len(task_list) > 1 else task_list[0].task_id,
                steps=p["steps"], lr=p["lr"], batch_size=p["batch_size"], seed=p["seed"],
            )
    weights = (cfg["reward"]["embed_weight"], cfg["reward"]["qe_weight"])
    return Bench(task_list[0], corpora[0], vocab, model, reward_fn(task_list[0], weights),
                 all_tasks=task_list, all_corpora=corpora)


# ------------------------------------------------------------- evaluation


def decode_corpus(
    model: PolicyModel,
    task_id: str,
    sources: Sequence[str],
    regime: str,
    beam_width: int,
    max_tokens: int,
    temperature: float = 1.0,
    seed: int = 0,
) -> list[str]:
    out = []
    for i, src in enumerate(sources):
        ids = model.vocab.encode(src)
        if regime == "beam":
            hyp = model.beam_decode(ids, task_id, beam_width, max_tokens)
        elif regime == "greedy":
            hyp = model.greedy_decode(ids, task_id, max_tokens)
        elif regime == "sample":
            hyp = model.sample_decode(ids, task_id, temperature, max_tokens,
                                      seed=seed + 31 * i)
        else:
            raise ValueError(f"unknown decode regime {regime!r}")
        out.append(hyp.text)
    return out


def eval_devtest(bench: Bench, regime: str, beam_width: int, max_tokens: int,
                 temperature: float = 1.0, seed: int = 0) -> MetricScore:
    hyps = decode_corpus(bench.model, bench.task.task_id,
                         [s for s, _ in bench.corpus.devtest],
                         regime, beam_width, max_tokens, temperature, seed)
    return chrf_pp(hyps, [t for _, t in bench.corpus.devtest])


# ---------------------------------------------------------------- reports


def write_jsonl(path: Path, records: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _cell(v) -> str:
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def render_reports(out_dir: Path) -> None:
    """Rebuild report.csv and summary.txt from results.jsonl (pure function)."""
    out_dir = Path(out_dir)
    records = read_jsonl(out_dir / "results.jsonl")
    if not records:
        return
    keys: list[str] = []
    for rec in records:
        for k in sorted(rec):
            if k not in keys:
                keys.append(k)
    rows = [[rec.get(k, "") for k in keys] for rec in records]
    write_csv(out_dir / "report.csv", keys, rows)
    lines = []
    for rec in records:
        lines.append("  ".join(f"{k}={_cell(rec.get(k, ''))}" for k in keys if k in rec))
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _sig_mark(p: float) -> bool:
    return p < 0.05


# ------------------------------------------------------- experiment A / B


def _run_arm(
    bench: Bench,
    arm: str,
    cfg: Config,
    out_dir: Path,
    train_pairs=None,
) -> tuple[TrainState, list[str]]:
    """Train one method arm from the bench's current (restored) adapters."""
    task_id = bench.task.task_id
    pairs = list(train_pairs if train_pairs is not None else bench.corpus.train)
    arm_dir = out_dir / bench.task.task_id / arm.replace(":", "")
    arm_dir.mkdir(parents=True, exist_ok=True)
    log_lines: list[str] = []
    if arm.startswith("sft"):
        epochs = int(arm.split(":")[1]) if ":" in arm else cfg["sft"]["epochs"]
        state = sft_train(
            bench.model, pairs, task_id, sft_config(cfg, epochs=epochs),
            eval_pairs=bench.corpus.eval_subset, out_dir=arm_dir, log_lines=log_lines,
        )
    elif arm == "grpo":
        state = grpo_train(
            bench.model, [s for s, _ in pairs], task_id, grpo_config(cfg),
            bench.reward, bench.corpus.eval_subset, out_dir=arm_dir, log_lines=log_lines,
        )
    else:
        raise ValueError(f"unknown arm {arm!r}")
    (arm_dir / "train_log.jsonl").write_text(
        "".join(line + "\n" for line in log_lines), encoding="utf-8")
    write_csv(arm_dir / "eval_trace.csv", ["step", "score"],
              [(s, f"{v:.4f}") for s, v in state.eval_trace])
    return state, log_lines


def run_experiment_a(cfg: Config, out_dir: Path) -> list[dict]:
    """Baseline vs SFT vs GRPO on one task; per-arm deltas with significance."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bench = build_bench(cfg)
    beam = cfg["eval"]["beam_width"]
    max_tok = cfg["eval"]["max_tokens"]
    base_hash = bench.model.base_param_hash()
    baseline = eval_devtest(bench, "beam", beam, max_tok)
    init_adapters = bench.model.clone_adapters()

    records = [{
        "template": "experiment_a", "task": bench.task.task_id, "arm": "baseline",
        "baseline_chrf": round(baseline.corpus_score, 4),
        "score_chrf": round(baseline.corpus_score, 4),
        "delta_chrf": 0.0, "p_value": 1.0, "significant": False,
        "best_step": 0, "collapse_events": 0,
        "base_hash_before": base_hash, "base_hash_after": base_hash,
    }]
    for arm in cfg["experiment"]["arms"]:
        bench.model.restore_adapters(init_adapters)
        try:
            state, _ = _run_arm(bench, arm, cfg, out_dir)
            bench.model.restore_adapters(state.best_adapters)
            score = eval_devtest(bench, "beam", beam, max_tok)
            sig = paired_bootstrap(baseline.sentence_scores, score.sentence_scores,
                                   n_resamples=1000, seed=cfg["grpo"]["seed"])
            records.append({
                "template": "experiment_a", "task": bench.task.task_id, "arm": arm,
                "baseline_chrf": round(baseline.corpus_score, 4),
                "score_chrf": round(score.corpus_score, 4),
                "delta_chrf": round(score.corpus_score - baseline.corpus_score, 4),
                "p_value": round(sig.p_value, 4),
                "significant": _sig_mark(sig.p_value),
                "best_step": state.best_step,
                "collapse_events": len(state.collapse_events),
                "base_hash_before": base_hash,
                "base_hash_after": bench.model.base_param_hash(),
            })
        except Exception as exc:  # arm isolation: record, continue
            records.append({
                "template": "experiment_a", "task": bench.task.task_id, "arm": arm,
                "error": f"{type(exc).__name__}: {exc}",
            })
    write_jsonl(out_dir / "results.jsonl", records)
    render_reports(out_dir)
    return records


def run_experiment_b(cfg: Config, out_dir: Path) -> list[dict]:
    """GRPO trained on an out-of-domain source pool, evaluated on the task
    devtest; both best- and final-checkpoint columns are reported."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bench = build_bench(cfg)
    e = cfg["experiment"]
    ood = gen_corpus(
        bench.task,
        n_train=cfg["corpus"]["n_train"], n_eval=0, n_devtest=0,
        seed=e["ood_seed"],
        sentence_words=(e["ood_words_min"], e["ood_words_max"]),
    )
    beam = cfg["eval"]["beam_width"]
    max_tok = cfg["eval"]["max_tokens"]
    base_hash = bench.model.base_param_hash()
    baseline = eval_devtest(bench, "beam", beam, max_tok)
    arm_dir = out_dir / bench.task.task_id / "grpo_ood"
    arm_dir.mkdir(parents=True, exist_ok=True)
    log_lines: list[str] = []
    state = grpo_train(
        bench.model, ood.train_sources, bench.task.task_id, grpo_config(cfg),
        bench.reward, bench.corpus.eval_subset, out_dir=arm_dir, log_lines=log_lines,
    )
    (arm_dir / "train_log.jsonl").write_text(
        "".join(line + "\n" for line in log_lines), encoding="utf-8")
    final_adapters = bench.model.clone_adapters()
    score_final = eval_devtest(bench, "beam", beam, max_tok)
    bench.model.restore_adapters(state.best_adapters)
    score_best = eval_devtest(bench, "beam", beam, max_tok)
    sig = paired_bootstrap(baseline.sentence_scores, score_best.sentence_scores,
                           n_resamples=1000, seed=cfg["grpo"]["seed"])
    records = [{
        "template": "experiment_b", "task": bench.task.task_id, "arm": "grpo_ood",
        "baseline_chrf": round(baseline.corpus_score, 4),
        "score_chrf_best": round(score_best.corpus_score, 4),
        "score_chrf_final": round(score_final.corpus_score, 4),
        "delta_best": round(score_best.corpus_score - baseline.corpus_score, 4),
        "delta_final": round(score_final.corpus_score - baseline.corpus_score, 4),
        "p_value_best": round(sig.p_value, 4),
        "significant": _sig_mark(sig.p_value),
        "best_step": state.best_step,
        "collapse_events": len(state.collapse_events),
        "collapse_flag": bool(state.collapse_events),
        "base_hash_before": base_hash,
        "base_hash_after": bench.model.base_param_hash(),
    }]
    bench.model.restore_adapters(final_adapters)
    write_jsonl(out_dir / "results.jsonl", records)
    render_reports(out_dir)
    return records


# -------------------------------------------------------------- ablations


def run_kl_ablation(cfg: Config, out_dir: Path) -> list[dict]:
    """Best chrF++ per KL coefficient; the spread across the grid is reported."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = cfg["experiment"]["kl_grid"]
    if not grid:
        raise ValueError("kl_grid is empty")
    bench = build_bench(cfg)
    beam, max_tok = cfg["eval"]["beam_width"], cfg["eval"]["max_tokens"]
    baseline = eval_devtest(bench, "beam", beam, max_tok)
    init_adapters = bench.model.clone_adapters()
    records = []
    best_scores = []
    for beta in grid:
        bench.model.restore_adapters(init_adapters)
        arm_dir = out_dir / bench.task.task_id / f"beta_{beta}"
        arm_dir.mkdir(parents=True, exist_ok=True)
        log_lines: list[str] = []
        state = grpo_train(
            bench.model, bench.corpus.train_sources, bench.task.task_id,
            grpo_config(cfg, beta=beta), bench.reward, bench.corpus.eval_subset,
            out_dir=arm_dir, log_lines=log_lines,
        )
        (arm_dir / "train_log.jsonl").write_text(
            "".join(line + "\n" for line in log_lines), encoding="utf-8")
        bench.model.restore_adapters(state.best_adapters)
        score = eval_devtest(bench, "beam", beam, max_tok)
        best_scores.append(score.corpus_score)
        records.append({
            "template": "kl_ablation", "task": bench.task.task_id, "beta": beta,
            "baseline_chrf": round(baseline.corpus_score, 4),
            "best_chrf": round(score.corpus_score, 4),
            "delta_chrf": round(score.corpus_score - baseline.corpus_score, 4),
            "best_step": state.best_step,
        })
    records.append({
        "template": "kl_ablation", "task": bench.task.task_id, "beta": "spread",
        "best_chrf": round(max(best_scores) - min(best_scores), 4),
    })
    write_jsonl(out_dir / "results.jsonl", records)
    render_reports(out_dir)
    return records


def run_datasize_ablation(cfg: Config, out_dir: Path) -> list[dict]:
    """SFT and GRPO across training-set sizes with significance vs baseline."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = cfg["experiment"]["n_grid"]
    if not grid:
        raise ValueError("n_grid is empty")
    bench = build_bench(cfg)
    if max(grid) > len(bench.corpus.train):
        raise ValueError(
            f"n_grid maximum {max(grid)} exceeds the {len(bench.corpus.train)}-sentence corpus")
    if min(grid) < 1:
        raise ValueError("n_grid values must be >= 1")
    beam, max_tok = cfg["eval"]["beam_width"], cfg["eval"]["max_tokens"]
    baseline = eval_devtest(bench, "beam", beam, max_tok)
    init_adapters = bench.model.clone_adapters()
    records = []
    for n in grid:
        subset = bench.corpus.train[:n]
        for arm in ("sft", "grpo"):
            bench.model.restore_adapters(init_adapters)
            state, _ = _run_arm(bench, arm if arm == "grpo" else f"sft:{cfg['sft']['epochs']}",
                                cfg, out_dir / f"n{n}", train_pairs=subset)
            bench.model.restore_adapters(state.best_adapters)
            score = eval_devtest(bench, "beam", beam, max_tok)
            sig = paired_bootstrap(baseline.sentence_scores, score.sentence_scores,
                                   n_resamples=1000, seed=cfg["grpo"]["seed"])
            records.append({
                "template": "datasize_ablation", "task": bench.task.task_id,
                "n": n, "arm": arm,
                "baseline_chrf": round(baseline.corpus_score, 4),
                "score_chrf": round(score.corpus_score, 4),
                "delta_chrf": round(score.corpus_score - baseline.corpus_score, 4),
                "p_value": round(sig.p_value, 4),
                "significant": _sig_mark(sig.p_value),
            })
    write_jsonl(out_dir / "results.jsonl", records)
    render_reports(out_dir)
    return records


def run_decoding_control(cfg: Config, out_dir: Path) -> list[dict]:
    """Score the untrained baseline under beam / greedy / temperature sampling,
    and the GRPO best checkpoint under beam: shows the gain is not a decoding
    artifact."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bench = build_bench(cfg)
    beam, max_tok = cfg["eval"]["beam_width"], cfg["eval"]["max_tokens"]
    temp = cfg["grpo"]["temperature"]
    records = []
    for regime, width in (("beam", beam), ("greedy", 1), ("sample", 0)):
        score = eval_devtest(bench, regime, width, max_tok, temperature=temp,
                             seed=cfg["grpo"]["seed"])
        records.append({
            "template": "decoding_control", "task": bench.task.task_id,
            "system": "baseline", "regime": regime,
            "temperature": temp if regime == "sample" else "",
            "chrf": round(score.corpus_score, 4),
        })
    arm_dir = out_dir / bench.task.task_id / "grpo"
    arm_dir.mkdir(parents=True, exist_ok=True)
    state = grpo_train(
        bench.model, bench.corpus.train_sources, bench.task.task_id, grpo_config(cfg),
        bench.reward, bench.corpus.eval_subset, out_dir=arm_dir,
    )
    bench.model.restore_adapters(state.best_adapters)
    score = eval_devtest(bench, "beam", beam, max_tok)
    records.append({
        "template": "decoding_control", "task": bench.task.task_id,
        "system": "grpo_best", "regime": "beam", "temperature": "",
        "chrf": round(score.corpus_score, 4),
    })
    write_jsonl(out_dir / "results.jsonl", records)
    render_reports(out_dir)
    return records


# ------------------------------------------------------- headroom analysis


@dataclass
class HeadroomReport:
    n: int
    rho: float
    p_value: float
    loo_rho: list[float]
    excluded: list[str]

    @property
    def loo_range(self) -> tuple[float, float]:
        return (min(self.loo_rho), max(self.loo_rho))


def run_headroom_analysis(
    rows: Sequence[tuple[str, float, float]],
    exclude: Sequence[str] = (),
    min_n: int = 5,
) -> HeadroomReport:
    """Spearman(baseline, delta) with leave-one-out folds over >=min_n tasks."""
    kept = [(t, b, d) for t, b, d in rows if t not in set(exclude)]
    if len(kept) < min_n:
        raise SampleSizeError(
            f"headroom analysis needs >= {min_n} tasks, got {len(kept)}")
    base = [b for _, b, _ in kept]
    delta = [d for _, _, d in kept]
    rho, p = spearman(base, delta)
    loo = []
    for i in range(len(kept)):
        b = base[:i] + base[i + 1 :]
        d = delta[:i] + delta[i + 1 :]
        loo.append(spearman(b, d)[0])
    return HeadroomReport(n=len(kept), rho=rho, p_value=p, loo_rho=loo,
                          excluded=list(exclude))


def headroom_fixture_report() -> dict:
    """Spearman statistics of the bundled reference rows: the full set and the
    variant excluding the flagged outlier, with leave-one-out over the latter."""
    rows = metrics.load_headroom_fixture()
    full = [(r.language, r.baseline, r.delta) for r in rows]
    flagged = [r.language for r in rows if r.flagged_outlier]
    all_report = run_headroom_analysis(full, min_n=5)
    excl_report = run_headroom_analysis(full, exclude=flagged, min_n=5)
    return {
        "n_full": all_report.n, "rho_full": all_report.rho, "p_full": all_report.p_value,
        "n_excl": excl_report.n, "rho_excl": excl_report.rho, "p_excl": excl_report.p_value,
        "excluded": flagged, "loo_excl": excl_report.loo_rho,
    }


def run_headroom_demo(cfg: Config, out_dir: Path) -> list[dict]:
    """Sweep pretraining budgets to span weak-to-strong baselines, GRPO each,
    and emit the Spearman(baseline, delta) report. The correlation's sign is
    reported, never asserted."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    budgets = cfg["experiment"]["headroom_budgets"]
    if len(budgets) < 5:
        raise SampleSizeError("headroom demo needs >= 5 budgets")
    beam, max_tok = cfg["eval"]["beam_width"], cfg["eval"]["max_tokens"]
    records = []
    rows = []
    for i, budget in enumerate(budgets):
        over = Config(cfg.to_dict())
        over["pretrain"]["steps"] = budget
        over["task"]["seed"] = cfg["task"]["seed"] + 97 * i
        over["grpo"]["total_steps"] = cfg["experiment"]["headroom_grpo_steps"]
        bench = build_bench(over)
        baseline = eval_devtest(bench, "beam", beam, max_tok)
        arm_dir = out_dir / bench.task.task_id / f"budget{budget}"
        arm_dir.mkdir(parents=True, exist_ok=True)
        state = grpo_train(
            bench.model, bench.corpus.train_sources, bench.task.task_id,
            grpo_config(over, total_steps=over["grpo"]["total_steps"]),
            bench.reward, bench.corpus.eval_subset, out_dir=arm_dir,
        )
        bench.model.restore_adapters(state.best_adapters)
        score = eval_devtest(bench, "beam", beam, max_tok)
        delta = score.corpus_score - baseline.corpus_score
        rows.append((bench.task.task_id, baseline.corpus_score, delta))
        records.append({
            "template": "headroom_demo", "task": bench.task.task_id,
            "pretrain_budget": budget,
            "baseline_chrf": round(baseline.corpus_score, 4),
            "delta_chrf": round(delta, 4),
        })
    report = run_headroom_analysis(rows)
    records.append({
        "template": "headroom_demo", "task": "spearman",
        "rho": round(report.rho, 4), "p_value": round(report.p_value, 4),
        "n": report.n,
        "loo_min": round(report.loo_range[0], 4),
        "loo_max": round(report.loo_range[1], 4),
    })
    write_jsonl(out_dir / "results.jsonl", records)
    render_reports(out_dir)
    return records


# --------------------------------------------------------- forgetting audit


def run_forgetting_audit(cfg: Config, out_dir: Path) -> list[dict]:
    """Pretrain one base on several tasks, fine-tune adapters on the first,
    then audit held-out task deltas against the untouched baseline."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    e = cfg["experiment"]
    seeds = e["forgetting_task_seeds"]
    if len(seeds) < 2:
        raise ValueError("forgetting audit needs at least one held-out task")
    tasks = [build_task(cfg, seed=s, task_id=f"{cfg['task']['kind']}-{s}") for s in seeds]
    bench = build_bench(cfg, tasks=tasks)
    beam, max_tok = cfg["eval"]["beam_width"], cfg["eval"]["max_tokens"]

    def task_score(task, corpus) -> MetricScore:
        hyps = decode_corpus(bench.model, task.task_id,
                             [s for s, _ in corpus.devtest], "beam", beam, max_tok)
        return chrf_pp(hyps, [t for _, t in corpus.devtest])

    baselines = {}
    for task, corpus in zip(bench.all_tasks, bench.all_corpora):
        baselines[task.task_id] = task_score(task, corpus).corpus_score

    arm = e["forgetting_train_arm"]
    state, _ = _run_arm(bench, arm if arm != "sft" else f"sft:{cfg['sft']['epochs']}",
                        cfg, out_dir)
    bench.model.restore_adapters(state.best_adapters)

    adapter_scores = {}
    for task, corpus in zip(bench.all_tasks, bench.all_corpora):
        adapter_scores[task.task_id] = task_score(task, corpus).corpus_score

    trained_id = bench.task.task_id
    heldout_scores = {t: s for t, s in adapter_scores.items() if t != trained_id}
    events = metrics.forgetting_audit(heldout_scores, baselines,
                                      threshold=e["forgetting_threshold"])
    event_tasks = {ev.task for ev in events}
    records = []
    for task in bench.all_tasks:
        tid = task.task_id
        records.append({
            "template": "forgetting_audit", "task": tid,
            "role": "trained" if tid == trained_id else "heldout",
            "baseline_chrf": round(baselines[tid], 4),
            "adapter_chrf": round(adapter_scores[tid], 4),
            "delta_chrf": round(adapter_scores[tid] - baselines[tid], 4),
            "event": tid in event_tasks,
            "threshold": e["forgetting_threshold"],
        })
    write_jsonl(out_dir / "results.jsonl", records)
    render_reports(out_dir)
    return records

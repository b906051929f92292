"""Command-line entry point.

Batch-oriented: a config file plus dotted-key overrides select everything; no
prompts. Errors print a single machine-parseable line on stderr and map to
distinct exit codes: 2 usage, 3 config/schema, 4 missing file, 5 data, 1 other.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import Config, ConfigError, load_config

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_FILE = 4
EXIT_DATA = 5

COMMANDS = (
    "gen-task",
    "pretrain-base",
    "train-grpo",
    "train-sft",
    "eval",
    "ablate-kl",
    "ablate-datasize",
    "decoding-control",
    "headroom",
    "reward-diagnostic",
    "forgetting-audit",
)


class _CliError(Exception):
    def __init__(self, code: int, category: str, message: str):
        super().__init__(message)
        self.code = code
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); classify instead
        raise _CliError(EXIT_CONFIG, "config", message)


def _base_parser(prog: str) -> _Parser:
    p = _Parser(prog=f"grpolab {prog}", add_help=True)
    p.add_argument("-c", "--config", default=None, help="INI config file")
    p.add_argument("-o", "--out", default=None, help="output directory")
    p.add_argument("-O", "--override", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _load(args) -> Config:
    if args.config is not None and not os.path.exists(args.config):
        raise _CliError(EXIT_MISSING_FILE, "io", f"config file not found: {args.config}")
    try:
        return load_config(args.config, args.override)
    except ConfigError as exc:
        raise _CliError(EXIT_CONFIG, "config", str(exc)) from exc


def _out_dir(args) -> Path:
    # Precedence: --out flag, then GRPOLAB_OUT, then ./grpolab-out.
    out = args.out or os.environ.get("GRPOLAB_OUT") or "grpolab-out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cmd_gen_task(args) -> int:
    import json

    from .corpus import write_tsv
    from .harness import build_bench, build_corpus, build_task

    cfg = _load(args)
    task = build_task(cfg)
    corpus = build_corpus(cfg, task)
    out = _out_dir(args)
    (out / "task.json").write_text(
        json.dumps(task.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    names = []
    for split, pairs in (("train", corpus.train), ("eval", corpus.eval_subset),
                         ("devtest", corpus.devtest)):
        name = f"{split}.tsv"
        write_tsv(out / name, pairs)
        names.append(name)
    (out / "manifest.txt").write_text("\n".join(names) + "\n", encoding="utf-8")
    print(f"task {task.task_id}: train={len(corpus.train)} eval={len(corpus.eval_subset)} "
          f"devtest={len(corpus.devtest)} -> {out}")
    return EXIT_OK


def _cmd_pretrain_base(args) -> int:
    from .harness import build_bench

    cfg = _load(args)
    out = _out_dir(args)
    bench = build_bench(cfg)
    path = out / "base.npz"
    bench.model.save_checkpoint(path, step=0, config_echo=cfg.to_dict())
    print(f"pretrained base saved: {path.name} hash={bench.model.base_param_hash()[:16]}")
    return EXIT_OK


def _cmd_train(args, method: str) -> int:
    from .grpo import train as grpo_train
    from .harness import build_bench, eval_devtest, grpo_config, render_reports, sft_config, write_csv, write_jsonl
    from .sft import sft_train

    cfg = _load(args)
    out = _out_dir(args)
    bench = build_bench(cfg)
    baseline = eval_devtest(bench, "beam", cfg["eval"]["beam_width"], cfg["eval"]["max_tokens"])
    log_lines: list[str] = []
    if method == "grpo":
        state = grpo_train(
            bench.model, bench.corpus.train_sources, bench.task.task_id,
            grpo_config(cfg), bench.reward, bench.corpus.eval_subset,
            out_dir=out, log_lines=log_lines,
        )
    else:
        state = sft_train(
            bench.model, bench.corpus.train, bench.task.task_id, sft_config(cfg),
            eval_pairs=bench.corpus.eval_subset, out_dir=out, log_lines=log_lines,
        )
    (out / "train_log.jsonl").write_text("".join(l + "\n" for l in log_lines), encoding="utf-8")
    bench.model.restore_adapters(state.best_adapters)
    score = eval_devtest(bench, "beam", cfg["eval"]["beam_width"], cfg["eval"]["max_tokens"])
    write_jsonl(out / "results.jsonl", [{
        "template": f"train_{method}", "task": bench.task.task_id,
        "baseline_chrf": round(baseline.corpus_score, 4),
        "score_chrf": round(score.corpus_score, 4),
        "delta_chrf": round(score.corpus_score - baseline.corpus_score, 4),
        "best_step": state.best_step,
        "collapse_events": len(state.collapse_events),
    }])
    render_reports(out)
    print(f"{method}: baseline {baseline.corpus_score:.2f} -> best {score.corpus_score:.2f} "
          f"(step {state.best_step}, {len(state.collapse_events)} collapse events)")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .harness import write_csv
    from .metrics import bleu, chrf_pp

    cfg = _load(args)
    for path in (args.hyp, args.ref):
        if not os.path.exists(path):
            raise _CliError(EXIT_MISSING_FILE, "io", f"file not found: {path}")
    hyps = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    refs = Path(args.ref).read_text(encoding="utf-8").splitlines()
    try:
        if args.metric == "chrf":
            score = chrf_pp(hyps, refs)
        else:
            score = bleu(hyps, refs, tokenizer=args.tokenizer)
    except ValueError as exc:
        raise _CliError(EXIT_DATA, "data", str(exc)) from exc
    out = _out_dir(args)
    write_csv(out / "eval.csv", ["sentence", score.name],
              [(i, f"{v:.4f}") for i, v in enumerate(score.sentence_scores)]
              + [("corpus", f"{score.corpus_score:.4f}")])
    print(f"{score.name} = {score.corpus_score:.4f}")
    return EXIT_OK


def _cmd_headroom(args) -> int:
    from .harness import headroom_fixture_report, run_headroom_analysis, write_csv

    cfg = _load(args)
    out = _out_dir(args)
    if args.results:
        if not os.path.exists(args.results):
            raise _CliError(EXIT_MISSING_FILE, "io", f"file not found: {args.results}")
        rows = []
        for line in Path(args.results).read_text(encoding="utf-8").splitlines()[1:]:
            if not line.strip():
                continue
            task, base, delta = line.split(",")[:3]
            rows.append((task, float(base), float(delta)))
        try:
            rep = run_headroom_analysis(rows)
        except Exception as exc:
            raise _CliError(EXIT_DATA, "data", str(exc)) from exc
        write_csv(out / "headroom.csv", ["n", "rho", "p_value", "loo_min", "loo_max"],
                  [(rep.n, rep.rho, rep.p_value, rep.loo_range[0], rep.loo_range[1])])
        print(f"spearman rho = {rep.rho:.4f} (n={rep.n}, p={rep.p_value:.4f})")
        return EXIT_OK
    rep = headroom_fixture_report()
    write_csv(out / "headroom.csv",
              ["variant", "n", "rho", "p_value"],
              [("full", rep["n_full"], rep["rho_full"], rep["p_full"]),
               ("excl_outlier", rep["n_excl"], rep["rho_excl"], rep["p_excl"])])
    print(f"builtin fixture: rho = {rep['rho_full']:.2f} (n={rep['n_full']}, "
          f"p={rep['p_full']:.3f}) / {rep['rho_excl']:.2f} excluding "
          f"{','.join(rep['excluded'])} (n={rep['n_excl']}, p={rep['p_excl']:.3f})")
    return EXIT_OK


def _cmd_reward_diagnostic(args) -> int:
    from .harness import build_corpus, build_task, write_csv
    from .reward import build_quality_cline, default_components, diagnostic_rows, discriminability

    cfg = _load(args)
    out = _out_dir(args)
    task = build_task(cfg)
    corpus = build_corpus(cfg, task)
    pairs = corpus.devtest or corpus.train
    n = min(cfg["reward"]["cline_sentences"], len(pairs))
    cline = build_quality_cline(pairs, n, seed=cfg["reward"]["cline_seed"])
    comps = default_components(task, (cfg["reward"]["embed_weight"], cfg["reward"]["qe_weight"]))
    header, rows = diagnostic_rows(cline, comps)
    write_csv(out / "cline.csv", header, rows)
    r = discriminability(cline, comps)
    print(f"discriminability pearson r = {r:.4f} over {n} sentences")
    return EXIT_OK


def _run_harness(args, runner_name: str) -> int:
    from . import harness

    cfg = _load(args)
    out = _out_dir(args)
    runner = getattr(harness, runner_name)
    records = runner(cfg, out)
    print(f"{runner_name}: {len(records)} result rows -> {out / 'report.csv'}")
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print("usage: grpolab <command> [options]\ncommands: " + ", ".join(COMMANDS))
        return EXIT_OK if argv else EXIT_USAGE
    command, rest = argv[0], argv[1:]
    if command not in COMMANDS:
        sys.stderr.write(f"error category=usage msg=unknown subcommand {command!r}\n")
        return EXIT_USAGE
    parser = _base_parser(command)
    if command == "eval":
        parser.add_argument("--hyp", required=True, help="hypotheses, one per line")
        parser.add_argument("--ref", required=True, help="references, one per line")
        parser.add_argument("--metric", choices=("chrf", "bleu"), default="chrf")
        parser.add_argument("--tokenizer", choices=("whitespace", "char"), default="whitespace")
    if command == "headroom":
        parser.add_argument("--fixture", choices=("builtin",), default="builtin",
                            help="use the bundled reference rows")
        parser.add_argument("--results", default=None,
                            help="CSV of task,baseline,delta rows to analyze instead")
    try:
        args = parser.parse_args(rest)
        if command == "gen-task":
            return _cmd_gen_task(args)
        if command == "pretrain-base":
            return _cmd_pretrain_base(args)
        if command == "train-grpo":
            return _cmd_train(args, "grpo")
        if command == "train-sft":
            return _cmd_train(args, "sft")
        if command == "eval":
            return _cmd_eval(args)
        if command == "ablate-kl":
            return _run_harness(args, "run_kl_ablation")
        if command == "ablate-datasize":
            return _run_harness(args, "run_datasize_ablation")
        if command == "decoding-control":
            return _run_harness(args, "run_decoding_control")
        if command == "headroom":
            return _cmd_headroom(args)
        if command == "reward-diagnostic":
            return _cmd_reward_diagnostic(args)
        if command == "forgetting-audit":
            return _run_harness(args, "run_forgetting_audit")
        raise AssertionError("unreachable")
    except _CliError as exc:
        sys.stderr.write(f"error category={exc.category} msg={exc}\n")
        return exc.code
    except FileNotFoundError as exc:
        sys.stderr.write(f"error category=io msg={exc}\n")
        return EXIT_MISSING_FILE
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except Exception as exc:
        sys.stderr.write(f"error category=runtime msg={type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())

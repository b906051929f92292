"""Supervised fine-tuning baseline and the base-model pretraining utility.

SFT trains the same adapter set as GRPO under teacher-forced cross-entropy;
pretraining applies the identical loss to the base parameters to manufacture
an unfine-tuned baseline of controllable strength.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .model import PolicyModel
from .optim import AdamW
from .vocab import BOS, EOS


@dataclass
class SftConfig:
    epochs: int = 3
    lr: float = 0.01
    batch_size: int = 4
    max_tokens: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    eval_every: int = 50
    max_eval_tokens: int = 128
    eval_decode: str = "greedy"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def target_tokens(model: PolicyModel, task_id: str, target_text: str) -> list[int]:
    if not target_text:
        raise ValueError("empty target")
    return [BOS, model.vocab.tag_id(task_id)] + model.vocab.encode(target_text) + [EOS]


def cross_entropy(
    model: PolicyModel, source_ids: list[int], tokens: list[int], dropout_rng=None
) -> Tensor:
    """Teacher-forced CE averaged over scored (content + EOS) positions."""
    n = len(tokens) - model._scored_from(tokens)
    if n < 1:
        raise ValueError("empty target")
    lp = model.score_sequences(source_ids, [tokens], dropout_rng=dropout_rng)
    return ad.scale(ad.reduce_sum(lp), -1.0 / n)


def sft_step(
    model: PolicyModel,
    source_text: str,
    target_text: str,
    task_id: str,
    opt: AdamW,
    dropout_rng=None,
) -> float:
    """Single-pair CE step on the adapter parameters; returns the loss value."""
    src = model.vocab.encode(source_text)
    toks = target_tokens(model, task_id, target_text)
    with Tape() as tape:
        loss = cross_entropy(model, src, toks, dropout_rng=dropout_rng)
    grads = tape.backward(loss, model.adapter_params())
    opt.step(grads)
    return float(loss.data)


def _accumulated_update(model, pairs, task_id, params, opt, dropout_rng) -> float:
    """One optimizer update from gradients averaged across a mini-batch.

    Batches accumulate across tape replays (one tape per pair) because the
    encoder path handles a single source at a time.
    """
    total: dict[int, np.ndarray] = {}
    loss_sum = 0.0
    for source_text, target_text in pairs:
        src = model.vocab.encode(source_text)
        toks = target_tokens(model, task_id, target_text)
        with Tape() as tape:
            loss = cross_entropy(model, src, toks, dropout_rng=dropout_rng)
        grads = tape.backward(loss, params)
        loss_sum += float(loss.data)
        for uid, g in grads.items():
            acc = total.get(uid)
            if acc is None:
                total[uid] = g
            else:
                acc += g
    scale = 1.0 / len(pairs)
    opt.step({uid: g * scale for uid, g in total.items()})
    return loss_sum * scale


def sft_train(
    model: PolicyModel,
    train_pairs: Sequence[tuple[str, str]],
    task_id: str,
    config: SftConfig,
    eval_pairs: Sequence[tuple[str, str]] = (),
    out_dir=None,
    log_lines: list[str] | None = None,
):
    """Adapter-only supervised training; mirrors the GRPO eval/trace schedule."""
    from .grpo import TrainState
    from .metrics import chrf_pp

    state = TrainState()
    opt = AdamW(
        model.adapter_params(),
        lr=config.lr,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        weight_decay=config.weight_decay,
    )

    def evaluate() -> float:
        hyps = []
        for src, _ in eval_pairs:
            ids = model.vocab.encode(src)
            if config.eval_decode == "greedy":
                hyp = model.greedy_decode(ids, task_id, config.max_eval_tokens)
            else:
                hyp = model.beam_decode(ids, task_id, 4, config.max_eval_tokens)
            hyps.append(hyp.text)
        return chrf_pp(hyps, [r for _, r in eval_pairs]).corpus_score

    def snapshot(score: float, step: int) -> None:
        if score > state.best_score:
            state.best_score = score
            state.best_step = step
            state.best_adapters = model.clone_adapters()
            if out_dir is not None:
                path = str(out_dir / "sft_best.npz")
                model.save_checkpoint(path, step=step)
                state.best_path = path

    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0xF, 0)))
    dropout_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0xF, 1)))
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(train_pairs))
        for lo in range(0, len(order), config.batch_size):
            batch = [train_pairs[i] for i in order[lo : lo + config.batch_size]]
            loss = _accumulated_update(model, batch, task_id, model.adapter_params(), opt, dropout_rng)
            step += 1
            if log_lines is not None:
                log_lines.append(json.dumps(
                    {"step": step, "method": "sft", "loss": loss}, sort_keys=True))
            if eval_pairs and step % config.eval_every == 0:
                score = evaluate()
                state.eval_trace.append((step, score))
                snapshot(score, step)
    state.step = step
    if eval_pairs:
        final = evaluate()
        state.final_score = final
        state.eval_trace.append((step, final))
        snapshot(final, step)
        if out_dir is not None:
            path = str(out_dir / "sft_final.npz")
            model.save_checkpoint(path, step=step)
            state.final_path = path
    return state


def pretrain_base(
    model: PolicyModel,
    train_pairs: Sequence[tuple[str, str]],
    task_ids: str | Sequence[str],
    steps: int,
    lr: float = 0.01,
    batch_size: int = 8,
    seed: int = 0,
) -> list[float]:
    """Train the base parameters (not adapters) for a fixed step budget.

    The budget is the headroom lever: small budgets manufacture weak baselines.
    The learning rate decays linearly to 10% over the budget so long budgets
    converge instead of oscillating. Multi-task pretraining interleaves tasks
    round-robin; pairs may be given as one list (single task) or a parallel
    list of lists.
    """
    if isinstance(task_ids, str):
        task_ids = [task_ids]
        groups = [list(train_pairs)]
    else:
        task_ids = list(task_ids)
        groups = [list(g) for g in train_pairs]
        if len(groups) != len(task_ids):
            raise ValueError("one pair list per task id required")
    frozen = model.set_adapters(False)  # adapters stay out of the pretraining path
    opt = AdamW(frozen.base_params(), lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xB, 0)))
    losses = []
    for step in range(steps):
        opt.lr = lr * (1.0 - 0.9 * step / max(steps, 1))
        ti = step % len(task_ids)
        pairs = groups[ti]
        batch = [pairs[i] for i in rng.integers(0, len(pairs), size=batch_size)]
        loss = _accumulated_update(frozen, batch, task_ids[ti], frozen.base_params(), opt, None)
        losses.append(loss)
    return losses

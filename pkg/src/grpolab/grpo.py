"""Group-relative policy optimization: advantages, clipped surrogate, KL anchor,
the step/train loops, variance-collapse monitoring and best-checkpoint selection.
"""

from __future__ import annotations

import json
import statistics
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .model import Hypothesis, PolicyModel
from .optim import AdamW
from .vocab import BOS, EOS


class StepAbortError(RuntimeError):
    """A ratio or KL term overflowed; carries the offending hypothesis index."""

    def __init__(self, message: str, hypothesis_index: int, hypothesis: Hypothesis | None = None):
        super().__init__(message)
        self.hypothesis_index = hypothesis_index
        self.hypothesis = hypothesis


@dataclass
class GrpoConfig:
    k: int = 12
    eps_floor: float = 1e-4
    eps_clip: float = 0.2
    beta: float = 0.001
    lr: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    temperature: float = 1.2
    max_train_tokens: int = 64
    max_eval_tokens: int = 128
    eval_every: int = 50
    eval_subset_size: int = 100
    total_steps: int = 600
    seed: int = 0
    collapse_window: int = 50
    collapse_floor: float = 1e-3
    selection_metric: str = "chrf"  # or "reward" for reference-free selection
    eval_decode: str = "greedy"

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.eps_floor <= 0:
            raise ValueError("eps_floor must be > 0")
        if not 0.0 < self.eps_clip < 1.0:
            raise ValueError("eps_clip must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.selection_metric not in ("chrf", "reward"):
            raise ValueError("selection_metric must be 'chrf' or 'reward'")


@dataclass
class GroupStats:
    rewards: np.ndarray
    mean: float
    std: float
    advantages: np.ndarray
    ratios: np.ndarray
    clip_active: np.ndarray
    l_clip: float
    l_kl: float
    total: float

    @property
    def clip_fraction(self) -> float:
        return float(self.clip_active.mean())


@dataclass
class CollapseEvent:
    step: int
    median_std: float


@dataclass
class TrainState:
    step: int = 0
    best_step: int = -1
    best_score: float = -np.inf
    final_score: float = np.nan
    best_adapters: dict | None = None
    best_path: str | None = None
    final_path: str | None = None
    collapse_events: list[CollapseEvent] = field(default_factory=list)
    eval_trace: list[tuple[int, float]] = field(default_factory=list)
    aborted_steps: list[int] = field(default_factory=list)


def compute_advantages(rewards: Sequence[float], eps: float) -> np.ndarray:
    """Group-standardized advantages with a stability floor on the population std."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("advantages need at least 2 rewards")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return (r - r.mean()) / (r.std() + eps)


def importance_ratios(group: Sequence[Hypothesis]) -> np.ndarray:
    """exp(logprob_theta - logprob_ref) per hypothesis, with overflow detection."""
    d = np.array([h.logprob_theta - h.logprob_ref for h in group])
    with np.errstate(over="ignore"):
        rho = np.exp(d)
    if not np.all(np.isfinite(rho)):
        i = int(np.argmax(~np.isfinite(rho)))
        raise StepAbortError(
            f"non-finite importance ratio for hypothesis {i} (log-diff {d[i]:.3g})",
            hypothesis_index=i,
            hypothesis=group[i],
        )
    return rho


def clipped_loss(rho: Tensor, advantages: np.ndarray, eps_clip: float) -> Tensor:
    """PPO-style pessimistic surrogate, negated for minimization.

    Advantages enter as constants; the gradient flows only through the ratios,
    and only where the unclipped branch is active.
    """
    a = Tensor(np.asarray(advantages, dtype=np.float64))
    if rho.shape != a.shape:
        raise ValueError(f"rho/advantage length mismatch: {rho.shape} vs {a.shape}")
    unclipped = ad.mul(rho, a)
    clipped = ad.mul(ad.clip_const(rho, 1.0 - eps_clip, 1.0 + eps_clip), a)
    term = ad.minimum(unclipped, clipped)
    return ad.scale(ad.reduce_sum(term), -1.0 / rho.shape[0])


def kl_penalty(logdiff: Tensor) -> Tensor:
    """Forward-KL surrogate mean(exp(d) - d - 1); nonnegative, zero iff d == 0."""
    return ad.mean(ad.add_const(ad.add(ad.exp(logdiff), ad.scale(logdiff, -1.0)), -1.0))


def kl_from_group(group: Sequence[Hypothesis]) -> float:
    """Diagnostic KL over stored rollout log-probabilities."""
    d = np.array([h.logprob_theta - h.logprob_ref for h in group])
    return float(np.mean(np.exp(d) - d - 1.0))


class CollapseMonitor:
    """Fires when the windowed median of group reward std drops below the floor."""

    def __init__(self, window: int = 50, floor: float = 1e-3):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.floor = floor
        self._stds: deque[float] = deque(maxlen=window)
        self._active = False

    def observe(self, step: int, reward_std: float) -> CollapseEvent | None:
        """Returns an event on entering the collapsed regime, else None."""
        self._stds.append(float(reward_std))
        if len(self._stds) < self.window:
            return None
        med = statistics.median(self._stds)
        if med < self.floor:
            if not self._active:
                self._active = True
                return CollapseEvent(step=step, median_std=med)
        else:
            self._active = False
        return None


def detect_variance_collapse(
    std_stream: Sequence[float], window: int = 50, floor: float = 1e-3
) -> CollapseEvent | None:
    """Scan a reward-std stream; return the first collapse event, if any."""
    monitor = CollapseMonitor(window=window, floor=floor)
    for step, s in enumerate(std_stream):
        event = monitor.observe(step, s)
        if event is not None:
            return event
    return None


def grpo_step(
    model: PolicyModel,
    source_text: str,
    task_id: str,
    config: GrpoConfig,
    reward_fn: Callable[[str, str], float],
    opt: AdamW,
    step_index: int,
) -> GroupStats:
    """One rollout group, one adapter update.

    Reference log-probs are recomputed fresh through the same teacher-forced
    path as the trainable ones, so identical policies give exact log-diff 0.
    """
    source_ids = model.vocab.encode(source_text)
    group_seed = int(np.random.SeedSequence(config.seed, spawn_key=(step_index,)).generate_state(1)[0])
    group = model.sample_group(
        source_ids, task_id, config.k, config.temperature, config.max_train_tokens, seed=group_seed
    )
    rewards = np.array([reward_fn(source_text, h.text) for h in group])
    advantages = compute_advantages(rewards, config.eps_floor)

    sequences = [h.tokens for h in group]
    ref = model.set_adapters(False)
    lp_ref = ref.score_sequences(source_ids, sequences).data

    dropout_rng = np.random.default_rng(
        np.random.SeedSequence(config.seed, spawn_key=(step_index, 1))
    )
    with Tape() as tape:
        lp_theta = model.score_sequences(source_ids, sequences, dropout_rng=dropout_rng)
        d = ad.add(lp_theta, Tensor(-lp_ref))
        if np.max(d.data) > 700.0 or not np.all(np.isfinite(d.data)):
            i = int(np.argmax(d.data))
            raise StepAbortError(
                f"log-ratio overflow at hypothesis {i} (d={d.data[i]:.3g})",
                hypothesis_index=i,
                hypothesis=group[i],
            )
        rho = ad.exp(d)
        l_clip = clipped_loss(rho, advantages, config.eps_clip)
        if config.beta > 0.0:
            l_kl = kl_penalty(d)
            total = ad.add(l_clip, ad.scale(l_kl, config.beta))
        else:
            l_kl = Tensor(0.0)
            total = l_clip
    grads = tape.backward(total, model.adapter_params())
    opt.step(grads)

    rho_np = rho.data
    clipped_vals = np.clip(rho_np, 1.0 - config.eps_clip, 1.0 + config.eps_clip) * advantages
    clip_active = clipped_vals < rho_np * advantages
    return GroupStats(
        rewards=rewards,
        mean=float(rewards.mean()),
        std=float(rewards.std()),
        advantages=advantages,
        ratios=rho_np,
        clip_active=clip_active,
        l_clip=float(l_clip.data),
        l_kl=float(l_kl.data),
        total=float(total.data),
    )


def train(
    model: PolicyModel,
    train_sources: Sequence[str],
    task_id: str,
    config: GrpoConfig,
    reward_fn: Callable[[str, str], float],
    eval_pairs: Sequence[tuple[str, str]],
    out_dir=None,
    log_lines: list[str] | None = None,
    method_tag: str = "grpo",
) -> TrainState:
    """GRPO training loop with periodic evaluation and best-checkpoint selection.

    Collapse events are logged and training continues; the mitigation is
    checkpoint selection, not halting. Evaluation uses chrF++ on the eval
    pairs, or mean hybrid reward when selection_metric is 'reward'.
    """
    if not train_sources:
        raise ValueError("empty training source list")
    from .metrics import chrf_pp  # local import: metrics is a leaf module

    state = TrainState()
    monitor = CollapseMonitor(config.collapse_window, config.collapse_floor)
    opt = AdamW(
        model.adapter_params(),
        lr=config.lr,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        weight_decay=config.weight_decay,
    )

    def evaluate() -> float:
        subset = list(eval_pairs)[: config.eval_subset_size]
        decode = model.greedy_decode if config.eval_decode == "greedy" else None
        hyps = []
        for src, _ in subset:
            ids = model.vocab.encode(src)
            if decode is not None:
                hyp = decode(ids, task_id, config.max_eval_tokens)
            else:
                hyp = model.beam_decode(ids, task_id, 4, config.max_eval_tokens)
            hyps.append(hyp.text)
        if config.selection_metric == "reward":
            return float(np.mean([reward_fn(s, h) for (s, _), h in zip(subset, hyps)]))
        return chrf_pp(hyps, [r for _, r in subset]).corpus_score

    def snapshot(score: float, step: int) -> None:
        if score > state.best_score:
            state.best_score = score
            state.best_step = step
            state.best_adapters = model.clone_adapters()
            if out_dir is not None:
                path = str(out_dir / f"{method_tag}_best.npz")
                model.save_checkpoint(path, step=step)
                state.best_path = path

    order_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0xE, 0)))
    order: list[int] = []
    for step in range(config.total_steps):
        if not order:
            order = list(order_rng.permutation(len(train_sources)))
        src = train_sources[order.pop()]
        try:
            stats = grpo_step(model, src, task_id, config, reward_fn, opt, step)
        except StepAbortError:
            # The step is dropped; training continues on the next source.
            state.aborted_steps.append(step)
            if log_lines is not None:
                log_lines.append(json.dumps(
                    {"step": step, "method": method_tag, "aborted": True}, sort_keys=True))
            state.step = step + 1
            continue
        event = monitor.observe(step, stats.std)
        if event is not None:
            state.collapse_events.append(event)
        if log_lines is not None:
            log_lines.append(json.dumps({
                "step": step,
                "method": method_tag,
                "reward_mean": stats.mean,
                "reward_std": stats.std,
                "l_clip": stats.l_clip,
                "l_kl": stats.l_kl,
                "total": stats.total,
                "clip_fraction": stats.clip_fraction,
                "collapse": event is not None,
            }, sort_keys=True))
        state.step = step + 1
        if (step + 1) % config.eval_every == 0 and (step + 1) != config.total_steps:
            score = evaluate()
            state.eval_trace.append((step + 1, score))
            snapshot(score, step + 1)

    final_score = evaluate()
    state.final_score = final_score
    state.eval_trace.append((config.total_steps, final_score))
    snapshot(final_score, config.total_steps)
    if out_dir is not None:
        path = str(out_dir / f"{method_tag}_final.npz")
        model.save_checkpoint(path, step=config.total_steps)
        state.final_path = path
    return state

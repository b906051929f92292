"""Tiny transformer encoder-decoder policy with LoRA adapters on q/v projections.

The same parameter set serves two policies: adapters enabled is the trainable
policy, adapters disabled is the frozen reference. Base weights are never
updated after pretraining; only adapter matrices receive gradients.

Two forward paths exist on purpose. Teacher-forced scoring runs over autodiff
tensors (recordable on a tape); generation runs an incremental numpy decoder
with per-layer key/value caches. A consistency test pins the two paths to
each other.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vocab import BOS, EOS, PAD, Vocabulary

CHECKPOINT_FORMAT = "grpolab-ckpt-1"
_LN_EPS = 1e-5
_NEG_LARGE = -1e30


@dataclass(frozen=True)
class ModelDims:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    max_positions: int = 256

    def __post_init__(self):
        if min(self.d_model, self.n_heads, self.d_ff, self.n_enc_layers, self.n_dec_layers) <= 0:
            raise ValueError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 16
    alpha: float = 32.0
    dropout: float = 0.05

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclass
class Hypothesis:
    """One decoded target sequence with its scores under both policies."""

    tokens: list[int]  # BOS, task tag, content..., EOS (EOS absent if truncated)
    text: str
    logprob_theta: float
    logprob_ref: float
    finished: bool


def _sinusoidal_table(max_positions: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_positions, dtype=np.float64)[:, None]
    dim = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (dim // 2)) / d_model)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def _attention_blocks(dims: ModelDims) -> list[str]:
    blocks = [f"enc{i}.attn" for i in range(dims.n_enc_layers)]
    for i in range(dims.n_dec_layers):
        blocks += [f"dec{i}.self", f"dec{i}.cross"]
    return blocks


class PolicyModel:
    """Encoder-decoder policy; ``adapters_enabled`` selects pi_theta vs pi_ref."""

    def __init__(
        self,
        dims: ModelDims,
        vocab: Vocabulary,
        base: dict[str, Tensor],
        adapters: dict[str, Tensor],
        lora: LoraConfig,
        adapters_enabled: bool = True,
    ):
        self.dims = dims
        self.vocab = vocab
        self.base = base
        self.adapters = adapters
        self.lora = lora
        self.adapters_enabled = adapters_enabled
        self._pos = _sinusoidal_table(dims.max_positions, dims.d_model)

    # ------------------------------------------------------------------ init

    @classmethod
    def init(
        cls,
        dims: ModelDims,
        vocab: Vocabulary,
        seed: int,
        lora: LoraConfig = LoraConfig(),
    ) -> "PolicyModel":
        """Deterministic initialization; adapter B matrices start at zero so the
        enabled and disabled policies coincide exactly at step 0."""
        rng = np.random.default_rng(seed)
        d, f, v = dims.d_model, dims.d_ff, len(vocab)
        std = 1.0 / np.sqrt(d)

        def w(shape, scale=std):
            return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

        # Learned positional embeddings: at toy scale the optimizer must be
        # free to balance content against position, or alignment is slow.
        base: dict[str, Tensor] = {
            "emb": w((v, d)),
            "pos": w((dims.max_positions, d)),
            "head": w((d, v)),
        }

        def add_ln(prefix):
            base[f"{prefix}.g"] = Tensor(np.ones(d), requires_grad=True)
            base[f"{prefix}.b"] = Tensor(np.zeros(d), requires_grad=True)

        def add_attn(prefix):
            for name in ("wq", "wk", "wv", "wo"):
                base[f"{prefix}.{name}"] = w((d, d))

        def add_ffn(prefix):
            base[f"{prefix}.w1"] = w((d, f))
            base[f"{prefix}.b1"] = Tensor(np.zeros(f), requires_grad=True)
            base[f"{prefix}.w2"] = w((f, d), scale=1.0 / np.sqrt(f))
            base[f"{prefix}.b2"] = Tensor(np.zeros(d), requires_grad=True)

        for i in range(dims.n_enc_layers):
            add_ln(f"enc{i}.ln1")
            add_attn(f"enc{i}.attn")
            add_ln(f"enc{i}.ln2")
            add_ffn(f"enc{i}.ffn")
        for i in range(dims.n_dec_layers):
            add_ln(f"dec{i}.ln1")
            add_attn(f"dec{i}.self")
            add_ln(f"dec{i}.ln2")
            add_attn(f"dec{i}.cross")
            add_ln(f"dec{i}.ln3")
            add_ffn(f"dec{i}.ffn")
        add_ln("enc_out_ln")
        add_ln("dec_out_ln")

        adapters: dict[str, Tensor] = {}
        for block in _attention_blocks(dims):
            for proj in ("q", "v"):
                adapters[f"{block}.{proj}.A"] = w((d, lora.rank), scale=1.0 / np.sqrt(d))
                adapters[f"{block}.{proj}.B"] = Tensor(
                    np.zeros((lora.rank, d)), requires_grad=True
                )

        for name, t in list(base.items()) + list(adapters.items()):
            t.name = name
        return cls(dims, vocab, base, adapters, lora)

    # ------------------------------------------------------------- utilities

    def set_adapters(self, enabled: bool) -> "PolicyModel":
        """Cheap view sharing all parameters, with the policy flag flipped."""
        view = PolicyModel.__new__(PolicyModel)
        view.dims = self.dims
        view.vocab = self.vocab
        view.base = self.base
        view.adapters = self.adapters
        view.lora = self.lora
        view.adapters_enabled = enabled
        view._pos = self._pos
        return view

    def adapter_params(self) -> list[Tensor]:
        return [self.adapters[k] for k in sorted(self.adapters)]

    def base_params(self) -> list[Tensor]:
        return [self.base[k] for k in sorted(self.base)]

    def base_param_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.base):
            h.update(name.encode())
            h.update(self.base[name].data.tobytes())
        return h.hexdigest()

    def clone_adapters(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.adapters.items()}

    def restore_adapters(self, snapshot: dict[str, np.ndarray]) -> None:
        for k, arr in snapshot.items():
            self.adapters[k].data[...] = arr

    # ------------------------------------------------- tensor (taped) forward

    def _proj(self, x: Tensor, block: str, which: str, dropout_rng) -> Tensor:
        y = ad.matmul(x, self.base[f"{block}.w{which}"])
        if self.adapters_enabled and which in ("q", "v"):
            a = self.adapters[f"{block}.{which}.A"]
            b = self.adapters[f"{block}.{which}.B"]
            xin = x
            if dropout_rng is not None and self.lora.dropout > 0.0:
                keep = dropout_rng.random(x.shape) >= self.lora.dropout
                mask = Tensor(keep / (1.0 - self.lora.dropout))
                xin = ad.mul(x, mask)
            delta = ad.scale(ad.matmul(ad.matmul(xin, a), b), self.lora.scaling)
            y = ad.add(y, delta)
        return y

    def _mha(self, x: Tensor, block: str, memory: Tensor | None, causal: bool, dropout_rng) -> Tensor:
        d, nh = self.dims.d_model, self.dims.n_heads
        dh = d // nh
        kv_src = x if memory is None else memory
        q = self._proj(x, block, "q", dropout_rng)
        k = ad.matmul(kv_src, self.base[f"{block}.wk"])
        v = self._proj(kv_src, block, "v", dropout_rng)

        mask = None
        if causal:
            t = x.shape[-2]
            tri = np.where(np.tril(np.ones((t, t))) > 0, 0.0, _NEG_LARGE)
            shape = x.shape[:-2] + (t, t)
            mask = Tensor(np.broadcast_to(tri, shape).copy())

        heads = []
        for h in range(nh):
            lo, hi = h * dh, (h + 1) * dh
            qh = ad.slice_last(q, lo, hi)
            kh = ad.slice_last(k, lo, hi)
            vh = ad.slice_last(v, lo, hi)
            scores = ad.scale(ad.matmul(qh, ad.transpose_last(kh)), 1.0 / np.sqrt(dh))
            if mask is not None:
                scores = ad.add(scores, mask)
            attn = ad.softmax_last(scores)
            heads.append(ad.matmul(attn, vh))
        ctx = ad.concat_last(heads)
        return ad.matmul(ctx, self.base[f"{block}.wo"])

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        h = ad.add(ad.matmul(x, self.base[f"{prefix}.w1"]), self.base[f"{prefix}.b1"])
        h = ad.relu(h)
        return ad.add(ad.matmul(h, self.base[f"{prefix}.w2"]), self.base[f"{prefix}.b2"])

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x, self.base[f"{prefix}.g"], self.base[f"{prefix}.b"], eps=_LN_EPS)

    def encode(self, source_ids: list[int], dropout_rng=None) -> Tensor:
        """Encoder forward over one source; returns (S, d_model)."""
        ids = np.asarray(list(source_ids) + [EOS], dtype=np.int64)
        self._check_ids(ids)
        pos_ids = np.arange(len(ids))
        x = ad.add(ad.gather_rows(self.base["emb"], ids),
                   ad.gather_rows(self.base["pos"], pos_ids))
        for i in range(self.dims.n_enc_layers):
            h = self._ln(x, f"enc{i}.ln1")
            x = ad.add(x, self._mha(h, f"enc{i}.attn", None, causal=False, dropout_rng=dropout_rng))
            h = self._ln(x, f"enc{i}.ln2")
            x = ad.add(x, self._ffn(h, f"enc{i}.ffn"))
        return self._ln(x, "enc_out_ln")

    def decode_logits(self, enc_out: Tensor, tgt_in: np.ndarray, dropout_rng=None) -> Tensor:
        """Teacher-forced decoder logits: tgt_in (B, T) int -> (B, T, V)."""
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        b, t = tgt_in.shape
        self._check_ids(tgt_in)
        pos_ids = np.broadcast_to(np.arange(t), (b, t))
        x = ad.add(ad.gather_rows(self.base["emb"], tgt_in),
                   ad.gather_rows(self.base["pos"], pos_ids))
        for i in range(self.dims.n_dec_layers):
            h = self._ln(x, f"dec{i}.ln1")
            x = ad.add(x, self._mha(h, f"dec{i}.self", None, causal=True, dropout_rng=dropout_rng))
            h = self._ln(x, f"dec{i}.ln2")
            x = ad.add(x, self._mha(h, f"dec{i}.cross", enc_out, causal=False, dropout_rng=dropout_rng))
            h = self._ln(x, f"dec{i}.ln3")
            x = ad.add(x, self._ffn(h, f"dec{i}.ffn"))
        x = self._ln(x, "dec_out_ln")
        return ad.matmul(x, self.base["head"])

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.vocab)):
            raise ValueError(
                f"token id out of vocabulary (ids in [{ids.min()}, {ids.max()}], "
                f"vocab size {len(self.vocab)})"
            )

    def score_sequences(
        self,
        source_ids: list[int],
        sequences: list[list[int]],
        dropout_rng=None,
    ) -> Tensor:
        """Sum log-probabilities of full decoder sequences, batched: -> (B,).

        Sequences are [BOS, tag?, content..., EOS?]; leading control tokens
        are conditioning only and carry no probability mass. Padded positions
        are masked out.
        """
        if not sequences:
            raise ValueError("score_sequences: empty batch")
        enc_out = self.encode(source_ids, dropout_rng=dropout_rng)
        tmax = max(len(s) for s in sequences)
        b = len(sequences)
        tgt = np.full((b, tmax), PAD, dtype=np.int64)
        weight = np.zeros((b, tmax - 1), dtype=np.float64)
        for i, seq in enumerate(sequences):
            if seq[0] != BOS:
                raise ValueError("decoder sequence must begin with BOS")
            tgt[i, : len(seq)] = seq
            start = self._scored_from(seq)
            weight[i, start - 1 : len(seq) - 1] = 1.0
        logits = self.decode_logits(enc_out, tgt[:, :-1], dropout_rng=dropout_rng)
        logp = ad.log_softmax_last(logits)
        picked = ad.take_along_last(logp, tgt[:, 1:])
        return ad.reduce_sum(ad.mul(picked, Tensor(weight)), axis=1)

    def _scored_from(self, seq: list[int]) -> int:
        # Skip BOS and one optional language tag: they are forced conditioning.
        if len(seq) > 1 and seq[1] in self.vocab.lang_tags.values():
            return 2
        return 1

    # ------------------------------------------------- numpy incremental path

    def _np_params(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.base.items()}

    def _np_lora(self, x: np.ndarray, block: str, which: str) -> np.ndarray:
        if not self.adapters_enabled:
            return np.zeros(x.shape[:-1] + (self.dims.d_model,))
        a = self.adapters[f"{block}.{which}.A"].data
        b = self.adapters[f"{block}.{which}.B"].data
        return (x @ a) @ b * self.lora.scaling

    @staticmethod
    def _np_ln(x, g, b):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + _LN_EPS) * g + b

    @staticmethod
    def _np_softmax(x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def start_session(self, source_ids: list[int], batch: int) -> "DecodeSession":
        enc_out = self.encode(source_ids).data  # no tape active in callers
        return DecodeSession(self, enc_out, batch)

    # ------------------------------------------------------------ public ops

    def sequence_logprob(self, source_ids: list[int], target_tokens: list[int]) -> float:
        """Sum log-probability of a complete BOS...EOS target under this policy."""
        if not target_tokens or target_tokens[0] != BOS or target_tokens[-1] != EOS:
            raise ValueError("target must begin with BOS and end with EOS")
        return float(self.score_sequences(source_ids, [list(target_tokens)]).data[0])

    def sample_group(
        self,
        source_ids: list[int],
        task_id: str,
        k: int,
        temperature: float,
        max_tokens: int,
        seed: int,
    ) -> list[Hypothesis]:
        """Draw K hypotheses by temperature sampling, scoring both policies in
        the same rollout pass. Deterministic in (inputs, seed); each hypothesis
        owns a counter-split substream so K can change without reshuffling."""
        if k < 2:
            raise ValueError("group size K must be >= 2 (group std undefined otherwise)")
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        rngs = [
            np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(i,))))
            for i in range(k)
        ]
        return self._rollout(source_ids, task_id, k, max_tokens, "sample",
                             temperature=temperature, rngs=rngs)

    def greedy_decode(self, source_ids: list[int], task_id: str, max_tokens: int) -> Hypothesis:
        return self._rollout(source_ids, task_id, 1, max_tokens, "greedy")[0]

    def sample_decode(
        self, source_ids: list[int], task_id: str, temperature: float,
        max_tokens: int, seed: int,
    ) -> Hypothesis:
        """One temperature-sampled hypothesis (decoding-regime control runs)."""
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0,))))
        return self._rollout(source_ids, task_id, 1, max_tokens, "sample",
                             temperature=temperature, rngs=[rng])[0]

    def beam_decode(
        self, source_ids: list[int], task_id: str, beam_width: int, max_tokens: int
    ) -> Hypothesis:
        """Beam search over accumulated (untempered) log-probability.

        Beams whose chosen extension is EOS retire into a completed pool;
        width 1 reduces exactly to greedy decoding.
        """
        if beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if beam_width == 1:
            return self.greedy_decode(source_ids, task_id, max_tokens)
        return self._beam(source_ids, task_id, beam_width, max_tokens)

    # ---------------------------------------------------------- decode loops

    def _sampling_mask(self) -> np.ndarray:
        # Generation may emit characters and EOS; PAD/BOS/UNK/tags are barred.
        mask = np.zeros(len(self.vocab))
        n_control = 4 + len(self.vocab.lang_tags)
        mask[:n_control] = _NEG_LARGE
        mask[EOS] = 0.0
        return mask

    def _rollout(self, source_ids, task_id, batch, max_tokens, mode,
                 temperature=1.0, rngs=None) -> list[Hypothesis]:
        tag = self.vocab.tag_id(task_id)
        theta = self if self.adapters_enabled else self.set_adapters(True)
        sess = theta.start_session(source_ids, batch)
        mask = self._sampling_mask()

        sess.step(np.full(batch, BOS, dtype=np.int64))
        prev = np.full(batch, tag, dtype=np.int64)

        tokens: list[list[int]] = [[] for _ in range(batch)]
        lp_t = np.zeros(batch)
        finished = np.zeros(batch, dtype=bool)

        for _ in range(max_tokens):
            logits = sess.step(prev)
            # Scores are the policy's true (untempered, unmasked) log-probs;
            # the mask only bars control tokens from being selected.
            logp = logits - _logsumexp(logits)
            masked = logits + mask

            nxt = np.full(batch, PAD, dtype=np.int64)
            for i in range(batch):
                if finished[i]:
                    continue
                if mode == "greedy":
                    tok = int(np.argmax(masked[i]))
                else:
                    p = self._np_softmax(masked[i] / temperature)
                    tok = int(np.searchsorted(np.cumsum(p), rngs[i].random(), side="right"))
                    tok = min(tok, len(p) - 1)
                lp_t[i] += logp[i, tok]
                if tok == EOS:
                    finished[i] = True
                else:
                    tokens[i].append(tok)
                nxt[i] = tok
            prev = nxt
            if finished.all():
                break

        # Both stored scores come from batched teacher-forced passes in the
        # same rollout (fresh per group, never cached across steps). Using one
        # numeric path for theta and ref makes identical policies give an
        # exactly-zero log-difference.
        seqs = [
            [BOS, tag] + tokens[i] + ([EOS] if finished[i] else [])
            for i in range(batch)
        ]
        lp_theta = theta.score_sequences(source_ids, seqs).data
        lp_ref = self.set_adapters(False).score_sequences(source_ids, seqs).data
        out = []
        for i in range(batch):
            out.append(Hypothesis(
                tokens=seqs[i],
                text=self.vocab.decode(tokens[i]),
                logprob_theta=float(lp_theta[i]),
                logprob_ref=float(lp_ref[i]),
                finished=bool(finished[i]),
            ))
        return out

    def _beam(self, source_ids, task_id, width, max_tokens) -> Hypothesis:
        tag = self.vocab.tag_id(task_id)
        theta = self if self.adapters_enabled else self.set_adapters(True)
        sess = theta.start_session(source_ids, width)
        mask = self._sampling_mask()

        sess.step(np.full(width, BOS, dtype=np.int64))
        logits = sess.step(np.full(width, tag, dtype=np.int64))
        logp = logits[0] - _logsumexp(logits[0])

        order = np.argsort(-(logp + mask), kind="stable")[:width]
        pool: list[tuple[float, list[int]]] = []
        beams: list[list[int]] = []
        scores: list[float] = []
        for tok in order:
            if tok == EOS:
                pool.append((float(logp[tok]), []))
            else:
                beams.append([int(tok)])
                scores.append(float(logp[tok]))

        for _ in range(max_tokens - 1):
            if not beams:
                break
            if pool and max(scores) <= max(s for s, _ in pool):
                break  # extensions only lower scores: nothing can beat the pool
            n = len(beams)
            prev = np.full(width, PAD, dtype=np.int64)
            prev[:n] = [b[-1] for b in beams]
            logits = sess.step(prev)
            lp = logits[:n] - _logsumexp(logits[:n])
            cand = np.asarray(scores)[:, None] + lp + mask
            flat = np.argsort(-cand, axis=None, kind="stable")[:width]
            new_beams, new_scores, new_parents = [], [], []
            for idx in flat:
                bi, tok = divmod(int(idx), lp.shape[1])
                if tok == EOS:
                    pool.append((float(scores[bi] + lp[bi, tok]), beams[bi]))
                else:
                    new_beams.append(beams[bi] + [tok])
                    new_scores.append(float(scores[bi] + lp[bi, tok]))
                    new_parents.append(bi)
            beams, scores = new_beams, new_scores
            if beams:
                sel = np.asarray(new_parents + [0] * (width - len(new_parents)), dtype=np.int64)
                sess.select_rows(sel)

        candidates = [(s, b, True) for s, b in pool]
        candidates += [(s, b, False) for s, b in zip(scores, beams)]
        _, best, finished = max(candidates, key=lambda c: c[0])
        full = [BOS, tag] + best + ([EOS] if finished else [])
        return Hypothesis(
            tokens=full,
            text=self.vocab.decode(best),
            logprob_theta=_score_np(theta, source_ids, full),
            logprob_ref=_score_np(self.set_adapters(False), source_ids, full),
            finished=finished,
        )

    # ------------------------------------------------------------ checkpoint

    def save_checkpoint(self, path, step: int = 0, config_echo: dict | None = None) -> None:
        meta = {
            "format": CHECKPOINT_FORMAT,
            "dims": self.dims.__dict__,
            "lora": {"rank": self.lora.rank, "alpha": self.lora.alpha,
                     "dropout": self.lora.dropout},
            "vocab": self.vocab.to_json(),
            "step": int(step),
            "adapters_enabled": self.adapters_enabled,
            "config_echo": config_echo or {},
        }
        arrays = {f"base:{k}": t.data for k, t in self.base.items()}
        arrays.update({f"lora:{k}": t.data for k, t in self.adapters.items()})
        np.savez_compressed(path, __meta__=np.frombuffer(
            json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load_checkpoint(cls, path) -> tuple["PolicyModel", int]:
        with np.load(path) as blob:
            meta = json.loads(bytes(blob["__meta__"]).decode())
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"unsupported checkpoint format: {meta.get('format')!r}")
            dims = ModelDims(**meta["dims"])
            lora = LoraConfig(**meta["lora"])
            vocab = Vocabulary.from_json(meta["vocab"])
            base, adapters = {}, {}
            for key in blob.files:
                if key.startswith("base:"):
                    base[key[5:]] = Tensor(blob[key].copy(), requires_grad=True, name=key[5:])
                elif key.startswith("lora:"):
                    adapters[key[5:]] = Tensor(blob[key].copy(), requires_grad=True, name=key[5:])
        model = cls(dims, vocab, base, adapters, lora,
                    adapters_enabled=meta["adapters_enabled"])
        return model, meta["step"]


class DecodeSession:
    """Incremental decoder over cached keys/values for a batch sharing one source."""

    def __init__(self, model: PolicyModel, enc_out: np.ndarray, batch: int):
        self.m = model
        self.batch = batch
        self.t = 0
        p = model._np_params()
        self.cross_kv = []
        for i in range(model.dims.n_dec_layers):
            block = f"dec{i}.cross"
            k = enc_out @ p[f"{block}.wk"]
            v = enc_out @ p[f"{block}.wv"] + model._np_lora(enc_out, block, "v")
            self.cross_kv.append((k, v))
        d = model.dims.d_model
        self.self_k = [np.zeros((batch, 0, d)) for _ in range(model.dims.n_dec_layers)]
        self.self_v = [np.zeros((batch, 0, d)) for _ in range(model.dims.n_dec_layers)]

    def select_rows(self, rows: np.ndarray) -> None:
        """Reorder cached state by parent row (beam search bookkeeping)."""
        for i in range(len(self.self_k)):
            self.self_k[i] = self.self_k[i][rows]
            self.self_v[i] = self.self_v[i][rows]

    def step(self, tokens: np.ndarray) -> np.ndarray:
        """Feed one token per batch row at the current position; return (B, V) logits."""
        m, p = self.m, self.m._np_params()
        dims = m.dims
        nh, dh = dims.n_heads, dims.d_model // dims.n_heads
        if self.t >= dims.max_positions:
            raise ValueError("decode exceeded max positions")
        x = p["emb"][tokens] + p["pos"][self.t]
        for i in range(dims.n_dec_layers):
            sblock, cblock = f"dec{i}.self", f"dec{i}.cross"
            h = m._np_ln(x, p[f"dec{i}.ln1.g"], p[f"dec{i}.ln1.b"])
            q = h @ p[f"{sblock}.wq"] + m._np_lora(h, sblock, "q")
            k_new = h @ p[f"{sblock}.wk"]
            v_new = h @ p[f"{sblock}.wv"] + m._np_lora(h, sblock, "v")
            self.self_k[i] = np.concatenate([self.self_k[i], k_new[:, None, :]], axis=1)
            self.self_v[i] = np.concatenate([self.self_v[i], v_new[:, None, :]], axis=1)
            ctx = np.empty_like(q)
            for hh in range(nh):
                lo, hi = hh * dh, (hh + 1) * dh
                qh = q[:, lo:hi]
                kh = self.self_k[i][:, :, lo:hi]
                vh = self.self_v[i][:, :, lo:hi]
                scores = np.einsum("bd,btd->bt", qh, kh) / np.sqrt(dh)
                w = m._np_softmax(scores)
                ctx[:, lo:hi] = np.einsum("bt,btd->bd", w, vh)
            x = x + ctx @ p[f"{sblock}.wo"]

            h = m._np_ln(x, p[f"dec{i}.ln2.g"], p[f"dec{i}.ln2.b"])
            q = h @ p[f"{cblock}.wq"] + m._np_lora(h, cblock, "q")
            ck, cv = self.cross_kv[i]
            ctx = np.empty_like(q)
            for hh in range(nh):
                lo, hi = hh * dh, (hh + 1) * dh
                scores = q[:, lo:hi] @ ck[:, lo:hi].T / np.sqrt(dh)
                w = m._np_softmax(scores)
                ctx[:, lo:hi] = w @ cv[:, lo:hi]
            x = x + ctx @ p[f"{cblock}.wo"]

            h = m._np_ln(x, p[f"dec{i}.ln3.g"], p[f"dec{i}.ln3.b"])
            h = np.maximum(h @ p[f"dec{i}.ffn.w1"] + p[f"dec{i}.ffn.b1"], 0.0)
            x = x + h @ p[f"dec{i}.ffn.w2"] + p[f"dec{i}.ffn.b2"]

        x = m._np_ln(x, p["dec_out_ln.g"], p["dec_out_ln.b"])
        self.t += 1
        return x @ p["head"]


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    out = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    return out if x.ndim > 1 else float(out[0])


def _score_np(model: PolicyModel, source_ids, tokens: list[int]) -> float:
    """Value-only sequence score via the tensor path (no tape active)."""
    return float(model.score_sequences(source_ids, [tokens]).data[0])

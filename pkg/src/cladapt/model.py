"""Toy hybrid CTC/attention encoder-decoder with adapter slots.

A pre-layer-norm Transformer encoder maps frame matrices to states; a CTC
head reads the encoder states directly while a Transformer decoder attends
to them.  The training objective is the weighted sum
``c * ctc + (1 - c) * ce``.  Adapter slots sit between the self-attention
and feedforward sublayers of every encoder layer (the decoder has none);
an empty slot and an identity-initialized adapter are bit-equivalent.

Vocabulary convention: id 0 is the CTC blank, id 1 is the shared
begin/end-of-sequence sentinel, content tokens start at 2.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import rng as rngmod
from .adapters import AdapterBank, apply_adapter
from .autodiff import (
    ShapeError,
    Tensor,
    add,
    concat,
    embedding_lookup,
    gather,
    layer_norm,
    log_softmax,
    logaddexp,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    scaled_dot_attention,
    slice_,
    transpose,
)

BLANK_ID = 0
EOS_ID = 1
NUM_SPECIALS = 2  # blank + shared bos/eos sentinel


class CtcLengthError(ValueError):
    """The reference is longer than the frame count admits under CTC."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feature_dim: int
    num_encoder_layers: int = 4
    num_decoder_layers: int = 2
    attention_dim: int = 64
    feedforward_dim: int = 256
    num_heads: int = 4
    ctc_weight: float = 0.3

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (blank + end-of-sequence)")
        if self.attention_dim % self.num_heads != 0:
            raise ValueError(
                f"attention_dim {self.attention_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must lie in [0, 1]")
        if self.feature_dim < 1 or self.num_encoder_layers < 1 or self.num_decoder_layers < 1:
            raise ValueError("dimensions must be positive")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "feature_dim": self.feature_dim,
            "num_encoder_layers": self.num_encoder_layers,
            "num_decoder_layers": self.num_decoder_layers,
            "attention_dim": self.attention_dim,
            "feedforward_dim": self.feedforward_dim,
            "num_heads": self.num_heads,
            "ctc_weight": self.ctc_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Utterance:
    frames: np.ndarray                 # F x f, float64
    tokens: tuple[int, ...]
    task_id: int | None = None
    utt_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.tokens = tuple(int(t) for t in self.tokens)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be a nonempty F x f matrix, got {self.frames.shape}")
        if any(t in (BLANK_ID, EOS_ID) for t in self.tokens):
            raise ValueError("references must not contain the blank or sentinel ids")
        if any(t < 0 for t in self.tokens):
            raise ValueError("token ids must be nonnegative")


@lru_cache(maxsize=64)
def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    pe = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return pe


@lru_cache(maxsize=64)
def causal_mask(length: int) -> np.ndarray:
    mask = np.zeros((length, length))
    mask[np.triu_indices(length, k=1)] = -np.inf
    return mask


def ctc_min_frames(tokens) -> int:
    """Frames required for the reference to have any CTC alignment."""
    tokens = list(tokens)
    repeats = sum(1 for a, b in zip(tokens, tokens[1:]) if a == b)
    return len(tokens) + repeats


def teacher_forcing(tokens_batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(decoder inputs, targets): sentinel-prefixed inputs, sentinel-suffixed targets."""
    tokens_batch = np.asarray(tokens_batch, dtype=np.int64)
    B = tokens_batch.shape[0]
    sent = np.full((B, 1), EOS_ID, dtype=np.int64)
    dec_in = np.concatenate([sent, tokens_batch], axis=1)
    targets = np.concatenate([tokens_batch, sent], axis=1)
    return dec_in, targets


# parameter group per name prefix; groups drive freezing and weight decay
_GROUP_RULES = (
    ("enc_in.", "embeddings"),
    ("dec.emb", "embeddings"),
    ("ctc_head.", "heads"),
    ("out_head.", "heads"),
    ("dec.", "decoder"),
)


def group_of(name: str) -> str:
    for prefix, group in _GROUP_RULES:
        if name.startswith(prefix):
            return group
    if name.startswith("enc."):
        return "encoder-attention" if ".attn." in name or ".ln1." in name else "encoder-feedforward"
    raise KeyError(f"no parameter group for {name!r}")


SHARED_GROUPS = ("encoder-attention", "encoder-feedforward", "decoder", "embeddings", "heads")


class Model:
    """Parameters plus forward passes; training mutates one instance at a time."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._build()

    # -- construction -------------------------------------------------------

    def _weight(self, name: str, fan_in: int, shape: tuple[int, ...]) -> None:
        gen = rngmod.generator("model-init", self.seed, name)
        self.params[name] = Tensor(gen.normal(size=shape) / np.sqrt(fan_in), requires_grad=True)

    def _zeros(self, name: str, shape) -> None:
        self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def _ones(self, name: str, shape) -> None:
        self.params[name] = Tensor(np.ones(shape), requires_grad=True)

    def _ln(self, name: str, dim: int) -> None:
        self._ones(f"{name}.gain", dim)
        self._zeros(f"{name}.bias", dim)

    def _attn_block(self, name: str, dim: int) -> None:
        for proj in ("wq", "wk", "wv", "wo"):
            self._weight(f"{name}.{proj}", dim, (dim, dim))
        for bias in ("bq", "bk", "bv", "bo"):
            self._zeros(f"{name}.{bias}", dim)

    def _ff_block(self, name: str, dim: int, hidden: int) -> None:
        self._weight(f"{name}.w1", dim, (dim, hidden))
        self._zeros(f"{name}.b1", hidden)
        self._weight(f"{name}.w2", hidden, (hidden, dim))
        self._zeros(f"{name}.b2", dim)

    def _build(self) -> None:
        cfg = self.config
        h = cfg.attention_dim
        self._weight("enc_in.w", cfg.feature_dim, (cfg.feature_dim, h))
        self._zeros("enc_in.b", h)
        for i in range(cfg.num_encoder_layers):
            self._ln(f"enc.{i}.ln1", h)
            self._attn_block(f"enc.{i}.attn", h)
            self._ln(f"enc.{i}.ln2", h)
            self._ff_block(f"enc.{i}.ff", h, cfg.feedforward_dim)
        self._ln("enc.ln_out", h)

        gen = rngmod.generator("model-init", self.seed, "dec.emb")
        self.params["dec.emb"] = Tensor(gen.normal(size=(cfg.vocab_size, h)), requires_grad=True)
        for i in range(cfg.num_decoder_layers):
            self._ln(f"dec.{i}.ln1", h)
            self._attn_block(f"dec.{i}.self_attn", h)
            self._ln(f"dec.{i}.ln2", h)
            self._attn_block(f"dec.{i}.cross_attn", h)
            self._ln(f"dec.{i}.ln3", h)
            self._ff_block(f"dec.{i}.ff", h, cfg.feedforward_dim)
        self._ln("dec.ln_out", h)

        self._weight("ctc_head.w", h, (h, cfg.vocab_size))
        self._zeros("ctc_head.b", cfg.vocab_size)
        self._weight("out_head.w", h, (h, cfg.vocab_size))
        self._zeros("out_head.b", cfg.vocab_size)

    # -- parameter bookkeeping ----------------------------------------------

    def named_parameters(self):
        return sorted(self.params.items())

    def group_members(self, group: str) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if group_of(n) == group]

    def fingerprint(self, group: str | None = None) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            if group is None or group_of(name) == group:
                h.update(name.encode())
                h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def clone(self) -> "Model":
        other = Model.__new__(Model)
        other.config = self.config
        other.seed = self.seed
        other.params = {n: Tensor(t.data.copy(), requires_grad=True)
                        for n, t in self.params.items()}
        return other

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    # -- forward passes ------------------------------------------------------

    def _mha(self, prefix: str, query: Tensor, kv: Tensor, mask=None) -> Tensor:
        p = self.params
        nh = self.config.num_heads
        h = self.config.attention_dim
        dh = h // nh

        def heads(x, which):
            proj = add(matmul(x, p[f"{prefix}.w{which}"]), p[f"{prefix}.b{which}"])
            split = reshape(proj, proj.shape[:-1] + (nh, dh))
            return transpose(split, (0, 2, 1, 3))  # [B, nh, L, dh]

        att = scaled_dot_attention(heads(query, "q"), heads(kv, "k"), heads(kv, "v"), mask)
        merged = reshape(transpose(att, (0, 2, 1, 3)), query.shape[:-1] + (h,))
        return add(matmul(merged, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])

    def _ff(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        return add(matmul(relu(add(matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"])),
                          p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _norm(self, prefix: str, x: Tensor) -> Tensor:
        return layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"])

    def encode(self, frames, bank: AdapterBank | None = None) -> Tensor:
        """Frame matrix (or batch of them) -> encoder states, F' = F."""
        squeeze = False
        if isinstance(frames, Tensor):
            data = frames.data
        else:
            data = np.asarray(frames, dtype=np.float64)
        if data.ndim == 2:
            data, squeeze = data[None], True
        if data.ndim != 3:
            raise ShapeError(f"encode: frames must be [F, f] or [B, F, f], got {data.shape}")
        B, F, f = data.shape
        if F < 1:
            raise ValueError("encode: zero-length frame matrix")
        if f != self.config.feature_dim:
            raise ShapeError(f"encode: feature dim {f} != configured {self.config.feature_dim}")
        if not np.all(np.isfinite(data)):
            raise ValueError("encode: frames must be finite")
        if bank is not None:
            if bank.hidden_dim != self.config.attention_dim:
                raise ShapeError(
                    f"encode: adapter dim {bank.hidden_dim} != attention dim {self.config.attention_dim}")
            if len(bank.adapters) != self.config.num_encoder_layers:
                raise ShapeError(
                    f"encode: bank has {len(bank.adapters)} adapters for "
                    f"{self.config.num_encoder_layers} encoder layers")

        x = add(matmul(Tensor(data), self.params["enc_in.w"]), self.params["enc_in.b"])
        x = add(x, Tensor(positional_encoding(F, self.config.attention_dim)))
        for i in range(self.config.num_encoder_layers):
            normed = self._norm(f"enc.{i}.ln1", x)
            x = add(x, self._mha(f"enc.{i}.attn", normed, normed))
            if bank is not None:
                x = apply_adapter(bank.adapters[i], x)
            x = add(x, self._ff(f"enc.{i}.ff", self._norm(f"enc.{i}.ln2", x)))
        x = self._norm("enc.ln_out", x)
        return reshape(x, x.shape[1:]) if squeeze else x

    def ctc_logprobs(self, states: Tensor) -> Tensor:
        logits = add(matmul(states, self.params["ctc_head.w"]), self.params["ctc_head.b"])
        return log_softmax(logits)

    def decoder_logprobs(self, states: Tensor, dec_in: np.ndarray) -> Tensor:
        """Teacher-forced decoder distributions: [B, L, vocab] log-probs."""
        if states.data.ndim == 2:
            states = reshape(states, (1,) + states.shape)
        dec_in = np.asarray(dec_in, dtype=np.int64)
        if dec_in.ndim == 1:
            dec_in = dec_in[None]
        B, L = dec_in.shape
        x = embedding_lookup(self.params["dec.emb"], dec_in)
        x = add(x, Tensor(positional_encoding(L, self.config.attention_dim)))
        mask = Tensor(causal_mask(L))
        for i in range(self.config.num_decoder_layers):
            normed = self._norm(f"dec.{i}.ln1", x)
            x = add(x, self._mha(f"dec.{i}.self_attn", normed, normed, mask))
            x = add(x, self._mha(f"dec.{i}.cross_attn", self._norm(f"dec.{i}.ln2", x), states))
            x = add(x, self._ff(f"dec.{i}.ff", self._norm(f"dec.{i}.ln3", x)))
        x = self._norm("dec.ln_out", x)
        logits = add(matmul(x, self.params["out_head.w"]), self.params["out_head.b"])
        return log_softmax(logits)

    # -- losses ---------------------------------------------------------------

    def _validate_tokens(self, tokens_batch: np.ndarray) -> None:
        if tokens_batch.size and tokens_batch.max() >= self.config.vocab_size:
            raise ValueError(
                f"token id {tokens_batch.max()} outside vocabulary of {self.config.vocab_size}")

    def ctc_neg_logprob_batch(self, logp: Tensor, tokens_batch: np.ndarray) -> Tensor:
        """-log p(y | X) for a batch sharing one label length; returns [B]."""
        tokens_batch = np.asarray(tokens_batch, dtype=np.int64)
        self._validate_tokens(tokens_batch)
        B, F, v = logp.shape
        w = tokens_batch.shape[1]
        for b in range(B):
            need = ctc_min_frames(tokens_batch[b])
            if F < need:
                raise CtcLengthError(
                    f"reference of {w} tokens needs >= {need} frames under CTC, got {F}")
        S = 2 * w + 1
        ext = np.full((B, S), BLANK_ID, dtype=np.int64)
        ext[:, 1::2] = tokens_batch
        neg_inf = -np.inf

        if w > 0:
            # the two-step skip lands on label states s >= 3 whose label
            # differs from the one two states back
            skip_ok = np.zeros((B, S), dtype=bool)
            skip_ok[:, 3::2] = tokens_batch[:, 1:] != tokens_batch[:, :-1]
            skip_mask = Tensor(np.where(skip_ok, 0.0, neg_inf))
        init_mask = np.full(S, neg_inf)
        init_mask[: min(2, S)] = 0.0

        frame0 = gather(slice_(logp, (slice(None), 0)), ext)
        alpha = add(frame0, Tensor(init_mask))
        pad1 = Tensor(np.full((B, 1), neg_inf))
        pad2 = Tensor(np.full((B, 2), neg_inf))
        for t in range(1, F):
            stay_or_step = logaddexp(alpha, concat([pad1, slice_(alpha, (slice(None), slice(0, S - 1)))]))
            if w > 0 and S > 2:
                skipped = add(concat([pad2, slice_(alpha, (slice(None), slice(0, S - 2)))]), skip_mask)
                stay_or_step = logaddexp(stay_or_step, skipped)
            alpha = add(stay_or_step, gather(slice_(logp, (slice(None), t)), ext))
        if S == 1:
            final = reshape(alpha, (B,))
        else:
            final = logaddexp(reshape(slice_(alpha, (slice(None), S - 1)), (B,)),
                              reshape(slice_(alpha, (slice(None), S - 2)), (B,)))
        return neg(final)

    def ctc_loss(self, encoder_states: Tensor, tokens) -> Tensor:
        """-log of the total CTC path probability for one utterance."""
        states = encoder_states
        if states.data.ndim == 2:
            states = reshape(states, (1,) + states.shape)
        toks = tuple(tokens)
        batch = np.array(toks, dtype=np.int64).reshape(1, len(toks))
        return reshape(self.ctc_neg_logprob_batch(self.ctc_logprobs(states), batch), ())

    def ce_neg_logprob_batch(self, states: Tensor, tokens_batch: np.ndarray) -> Tensor:
        """Mean per-token negative log-likelihood per utterance; returns [B]."""
        tokens_batch = np.asarray(tokens_batch, dtype=np.int64)
        self._validate_tokens(tokens_batch)
        dec_in, targets = teacher_forcing(tokens_batch)
        lp = self.decoder_logprobs(states, dec_in)
        picked = gather(lp, targets[..., None])
        per_utt = mean(reshape(picked, targets.shape), axis=-1)
        return neg(per_utt)

    def ce_loss(self, encoder_states: Tensor, tokens) -> Tensor:
        """Mean per-token NLL with teacher forcing; empty refs predict one sentinel."""
        states = encoder_states
        if states.data.ndim == 2:
            states = reshape(states, (1,) + states.shape)
        toks = tuple(tokens)
        batch = np.array(toks, dtype=np.int64).reshape(1, len(toks))
        return reshape(self.ce_neg_logprob_batch(states, batch), ())

    def hybrid_loss(self, utterance: Utterance, bank: AdapterBank | None = None) -> Tensor:
        """c * ctc + (1 - c) * ce for one utterance (task routing is the caller's job)."""
        states = self.encode(utterance.frames[None], bank)
        c = self.config.ctc_weight
        batch = np.array(utterance.tokens, dtype=np.int64).reshape(1, len(utterance.tokens))
        ctc = reshape(self.ctc_neg_logprob_batch(self.ctc_logprobs(states), batch), ())
        ce = reshape(self.ce_neg_logprob_batch(states, batch), ())
        return add(mul(Tensor(c), ctc), mul(Tensor(1.0 - c), ce))

    def hybrid_loss_batch(self, frames: np.ndarray, tokens_batch: np.ndarray,
                          bank: AdapterBank | None = None) -> tuple[Tensor, float, float]:
        """Mean hybrid loss over a same-length batch; returns (loss, ctc value, ce value)."""
        states = self.encode(frames, bank)
        c = self.config.ctc_weight
        ctc = mean(self.ctc_neg_logprob_batch(self.ctc_logprobs(states), tokens_batch))
        ce = mean(self.ce_neg_logprob_batch(states, tokens_batch))
        loss = add(mul(Tensor(c), ctc), mul(Tensor(1.0 - c), ce))
        return loss, float(ctc.data), float(ce.data)

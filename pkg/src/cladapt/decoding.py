"""Decoding: beam search with joint CTC rescoring, with or without task labels.

Without a task label there are two routes: score the utterance once per
learned bank and keep the best hybrid output (``conf_infer``), or decode a
single time through the elementwise average of all banks (``avg_apt``).
The decoder counts per-utterance decodes so tests can pin the T-vs-1 cost
difference between the two routes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import AdapterBank, BankRegistry, average_banks
from .autodiff import Tensor, no_grad
from .metrics import corpus_wer
from .model import BLANK_ID, EOS_ID, Model, Utterance, ctc_min_frames


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    decoder_logprob: float
    ctc_logprob: float
    joint_score: float           # c * ctc + (1 - c) * decoder
    bank_id: int | None = None


def ctc_logprob(log_probs: np.ndarray, tokens) -> float:
    """log p(tokens | X) under CTC; -inf when no alignment exists."""
    tokens = tuple(tokens)
    F = log_probs.shape[0]
    if ctc_min_frames(tokens) > F:
        return -np.inf
    w = len(tokens)
    S = 2 * w + 1
    ext = np.full(S, BLANK_ID, dtype=np.int64)
    ext[1::2] = tokens
    skip_ok = np.zeros(S, dtype=bool)
    if w > 1:
        skip_ok[3::2] = np.array(tokens[1:]) != np.array(tokens[:-1])
    alpha = np.full(S, -np.inf)
    alpha[0] = log_probs[0, BLANK_ID]
    if S > 1:
        alpha[1] = log_probs[0, ext[1]]
    for t in range(1, F):
        prev = alpha
        merged = np.logaddexp(prev, np.concatenate([[-np.inf], prev[:-1]]))
        if S > 2:
            skipped = np.concatenate([[-np.inf, -np.inf], prev[:-2]])
            merged = np.where(skip_ok, np.logaddexp(merged, skipped), merged)
        alpha = merged + log_probs[t, ext]
    return float(alpha[-1] if S == 1 else np.logaddexp(alpha[-1], alpha[-2]))


class Decoder:
    """Beam-search decoding over one model, with decode accounting."""

    def __init__(self, model: Model, beam_width: int = 4, max_length: int | None = None):
        if beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        self.model = model
        self.beam_width = beam_width
        self.max_length = max_length
        self.decode_count = 0           # one per (utterance, pass through the model)
        self.average_build_count = 0    # bank averages computed (cache misses)
        self._avg_cache: tuple[int, AdapterBank] | None = None

    def reset_counters(self) -> None:
        self.decode_count = 0
        self.average_build_count = 0

    # -- task label known ----------------------------------------------------

    def decode(self, utterance: Utterance, bank: AdapterBank | None = None) -> Hypothesis:
        return self.decode_many([utterance], bank)[0]

    def decode_many(self, utterances: list[Utterance],
                    bank: AdapterBank | None = None) -> list[Hypothesis]:
        """Decode a mixed-length list; groups equal-length utterances internally."""
        out: list[Hypothesis | None] = [None] * len(utterances)
        by_frames: dict[int, list[int]] = {}
        for i, utt in enumerate(utterances):
            by_frames.setdefault(utt.frames.shape[0], []).append(i)
        for indices in by_frames.values():
            frames = np.stack([utterances[i].frames for i in indices])
            for i, hyp in zip(indices, self._beam_search(frames, bank)):
                out[i] = hyp
        self.decode_count += len(utterances)
        return out  # type: ignore[return-value]

    def _beam_search(self, frames: np.ndarray, bank: AdapterBank | None) -> list[Hypothesis]:
        cfg = self.model.config
        U, F, _ = frames.shape
        B = self.beam_width
        maxlen = F if self.max_length is None else min(F, self.max_length)
        with no_grad():
            enc = self.model.encode(frames, bank)
            ctc_tables = self.model.ctc_logprobs(enc).data
            enc_data = enc.data

            tokens = np.zeros((U, 1, 0), dtype=np.int64)      # [U, nb, t]
            scores = np.zeros((U, 1))
            finished: list[list[tuple[tuple[int, ...], float]]] = [[] for _ in range(U)]

            for step in range(maxlen + 1):
                nb = tokens.shape[1]
                prefix = np.concatenate(
                    [np.full((U, nb, 1), EOS_ID, dtype=np.int64), tokens], axis=2)
                flat_in = prefix.reshape(U * nb, step + 1)
                states = np.repeat(enc_data, nb, axis=0)
                lp = self.model.decoder_logprobs(
                    Tensor(states), flat_in).data[:, -1, :].reshape(U, nb, -1)
                lp[:, :, BLANK_ID] = -np.inf
                if step == maxlen:  # out of frames: force-finish what is still alive
                    for u in range(U):
                        for b in range(nb):
                            finished[u].append((tuple(tokens[u, b]),
                                                scores[u, b] + lp[u, b, EOS_ID]))
                    break
                cand = (scores[:, :, None] + lp).reshape(U, nb * cfg.vocab_size)
                top = np.argsort(-cand, axis=1, kind="stable")[:, :B]
                new_tokens = np.zeros((U, B, step + 1), dtype=np.int64)
                new_scores = np.full((U, B), -np.inf)
                alive = np.zeros(U, dtype=np.int64)
                for u in range(U):
                    if len(finished[u]) >= B:
                        continue
                    for flat in top[u]:
                        b, tok = divmod(int(flat), cfg.vocab_size)
                        score = cand[u, flat]
                        if score == -np.inf:
                            continue
                        if tok == EOS_ID:
                            finished[u].append((tuple(tokens[u, b]), float(score)))
                        else:
                            new_tokens[u, alive[u], :step] = tokens[u, b]
                            new_tokens[u, alive[u], step] = tok
                            new_scores[u, alive[u]] = score
                            alive[u] += 1
                if not alive.any():
                    break
                width = int(alive.max())
                tokens, scores = new_tokens[:, :width], new_scores[:, :width]
                # retired rows keep -inf scores and never win a top-B slot

        results = []
        c = cfg.ctc_weight
        for u in range(U):
            beam = sorted(finished[u], key=lambda h: (-h[1], h[0]))[: B]
            best = None
            for toks, dec_lp in beam:
                ctc_lp = ctc_logprob(ctc_tables[u], toks)
                joint = c * ctc_lp + (1.0 - c) * dec_lp
                cand_h = Hypothesis(tokens=toks, decoder_logprob=dec_lp,
                                    ctc_logprob=ctc_lp, joint_score=joint)
                if best is None or (joint, cand_h.tokens) > (best.joint_score, best.tokens):
                    best = cand_h
            results.append(best)
        return results

    # -- task label unknown ---------------------------------------------------

    def conf_infer(self, utterance: Utterance,
                   registry: BankRegistry) -> tuple[Hypothesis, int]:
        hyp, task = self.conf_infer_many([utterance], registry)[0]
        return hyp, task

    def conf_infer_many(self, utterances: list[Utterance],
                        registry: BankRegistry) -> list[tuple[Hypothesis, int]]:
        """One decode per learned bank; keep the best joint score per utterance.

        Ties go to the lowest task id.
        """
        if len(registry) == 0:
            raise ValueError("conf_infer needs at least one learned bank")
        best: list[tuple[Hypothesis, int] | None] = [None] * len(utterances)
        for task_id in registry.task_ids:
            bank = registry.get(task_id)
            for i, hyp in enumerate(self.decode_many(utterances, bank)):
                tagged = Hypothesis(tokens=hyp.tokens, decoder_logprob=hyp.decoder_logprob,
                                    ctc_logprob=hyp.ctc_logprob, joint_score=hyp.joint_score,
                                    bank_id=task_id)
                if best[i] is None or tagged.joint_score > best[i][0].joint_score:
                    best[i] = (tagged, task_id)
        return best  # type: ignore[return-value]

    def averaged_bank(self, registry: BankRegistry) -> AdapterBank:
        """Elementwise-average bank, cached per registry version."""
        if len(registry) == 0:
            raise ValueError("avg_apt needs at least one learned bank")
        if self._avg_cache is None or self._avg_cache[0] != registry.version:
            self._avg_cache = (registry.version, average_banks(registry.all_banks()))
            self.average_build_count += 1
        return self._avg_cache[1]

    def avg_apt_decode(self, utterance: Utterance, registry: BankRegistry) -> Hypothesis:
        return self.avg_apt_decode_many([utterance], registry)[0]

    def avg_apt_decode_many(self, utterances: list[Utterance],
                            registry: BankRegistry) -> list[Hypothesis]:
        bank = self.averaged_bank(registry)
        return self.decode_many(utterances, bank)


def evaluate_corpus_wer(decoder: Decoder, utterances: list[Utterance],
                        bank: AdapterBank | None = None) -> float:
    """Corpus-level WER of decoding the given utterances against their references."""
    hyps = decoder.decode_many(utterances, bank)
    return corpus_wer((u.tokens, h.tokens) for u, h in zip(utterances, hyps))

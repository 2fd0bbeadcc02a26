"""Streaming greedy decoding with wait policies and end-of-audio flushing.

Chunks arrive one at a time.  Between arrivals the decoder keeps asking for
text until the policy (learned or fixed) says wait.  When the last chunk
arrives the end-of-audio vector goes in with it and every remaining step is
forced to be text until ``<EOS>``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import EmissionLog, FrameStream, Vocabulary
from .policy import (
    WAIT,
    PolicyConfig,
    alignatt_decision,
    apply_wait_penalty,
    early_exit_decision,
    greedy_text_token,
    greedy_token,
    wait_k_decision,
)

INTERMIXED = "intermixed"
CROSS_ATTENTION = "cross_attention"


class IncompatiblePolicyError(ValueError):
    pass


class TruncatedOutputError(RuntimeError):
    """Flushing hit its token cap before ``<EOS>``; carries the partial result."""

    def __init__(self, message: str, tokens: Sequence[int], log: EmissionLog):
        super().__init__(message)
        self.tokens = tuple(tokens)
        self.log = log


@dataclass(frozen=True)
class FlushConfig:
    eoa_vector: np.ndarray | None = None  # None: the model's own
    max_flush_tokens: int = 64
    max_tokens_per_chunk: int = 32

    def __post_init__(self):
        if self.max_flush_tokens < 1 or self.max_tokens_per_chunk < 1:
            raise ValueError("token caps must be >= 1")


@dataclass
class DecoderState:
    heard: int = 0
    emitted: list[int] = field(default_factory=list)
    chunks: list[int] = field(default_factory=list)
    model_calls: int = 0
    policy_calls: int = 0
    finished: bool = False

    def emit(self, token: int, chunk: int, eos_id: int) -> None:
        self.emitted.append(int(token))
        self.chunks.append(chunk)
        self.finished = token == eos_id

    def log(self, stream: FrameStream) -> EmissionLog:
        return EmissionLog.from_chunks(
            self.emitted, self.chunks, stream.num_chunks, stream.chunk_ms, self.model_calls, self.policy_calls
        )


def check_compatible(model, policy: PolicyConfig) -> None:
    arch = getattr(model, "architecture", None)
    if arch not in (INTERMIXED, CROSS_ATTENTION):
        raise IncompatiblePolicyError(f"unknown model architecture {arch!r}")
    if policy.name == "alignatt" and arch != CROSS_ATTENTION:
        raise IncompatiblePolicyError("alignatt needs a cross-attention model")
    if policy.name in ("intermixed", "intermixed+early_exit") and arch != INTERMIXED:
        raise IncompatiblePolicyError(f"{policy.name} needs an intermixed model")
    if policy.name == "intermixed+early_exit" and not model.has_early_exit:
        raise IncompatiblePolicyError("model has no early-exit head")


def stream_decode(model, policy: PolicyConfig, stream: FrameStream, flush: FlushConfig | None = None):
    """Decode one utterance; returns ``(tokens, EmissionLog)``."""
    check_compatible(model, policy)
    flush = flush or FlushConfig()
    if stream.num_chunks < 1:
        raise ValueError("empty stream")
    if model.architecture == INTERMIXED:
        state = _decode_intermixed(model, policy, stream, flush)
    else:
        state = _decode_cross(model, policy, stream, flush)
    return tuple(state.emitted), state.log(stream)


def decode_offline(model, stream: FrameStream, flush: FlushConfig | None = None):
    return stream_decode(model, PolicyConfig("offline"), stream, flush)


def _flush_guard(state: DecoderState, flushed: int, flush: FlushConfig, stream: FrameStream) -> None:
    if flushed >= flush.max_flush_tokens and not state.finished:
        raise TruncatedOutputError(
            f"no <EOS> within {flush.max_flush_tokens} tokens after end of audio", state.emitted, state.log(stream)
        )


def _fixed_decision(policy: PolicyConfig, state: DecoderState) -> str:
    if policy.name == "wait_k":
        return wait_k_decision(state.heard, len(state.emitted), policy.k)
    return WAIT  # offline


class _Replay:
    """Session for models that only score whole prefixes."""

    def __init__(self, model):
        self.model = model
        self.slots: list = []

    def push(self, slot) -> None:
        self.slots.append(slot)

    def step_logits(self) -> np.ndarray:
        return self.model.step_logits(self.slots)

    def early_exit_logits(self) -> np.ndarray:
        return self.model.early_exit_logits(self.slots)


def _decode_intermixed(model, policy: PolicyConfig, stream: FrameStream, flush: FlushConfig) -> DecoderState:
    vocab: Vocabulary = model.vocab
    eoa = model.eoa_vector if flush.eoa_vector is None else np.asarray(flush.eoa_vector, dtype=np.float64)
    T = stream.num_chunks
    state = DecoderState()
    session = model.session() if hasattr(model, "session") else _Replay(model)
    learned = policy.name in ("intermixed", "intermixed+early_exit")
    use_exit = policy.name == "intermixed+early_exit"

    for t in range(1, T + 1):
        frames = stream.chunk(t)
        if t == T:
            frames = np.vstack([frames, eoa[None, :]])
        session.push(frames)
        state.heard = t

        if t == T:
            flushed = 0
            while not state.finished:
                _flush_guard(state, flushed, flush, stream)
                logits = session.step_logits()
                state.model_calls += 1
                tok = greedy_text_token(logits, vocab.wait_id)
                state.emit(tok, t, vocab.eos_id)
                session.push(tok)
                flushed += 1
            return state

        for _ in range(flush.max_tokens_per_chunk):
            if learned:
                if use_exit:
                    state.policy_calls += 1
                    if early_exit_decision(session.early_exit_logits(), policy.nu) == WAIT:
                        break
                logits = apply_wait_penalty(session.step_logits(), policy.kappa, vocab.wait_id)
                state.model_calls += 1
                tok = greedy_token(logits)
                if tok == vocab.wait_id:
                    break
            else:
                state.policy_calls += 1
                if _fixed_decision(policy, state) == WAIT:
                    break
                state.model_calls += 1
                tok = greedy_text_token(session.step_logits(), vocab.wait_id)
            state.emit(tok, t, vocab.eos_id)
            session.push(tok)
            if state.finished:
                return state
    return state


def _decode_cross(model, policy: PolicyConfig, stream: FrameStream, flush: FlushConfig) -> DecoderState:
    from .model.crossattn import chunk_matrix, cross_attention_peak

    vocab: Vocabulary = model.vocab
    rows = chunk_matrix(stream)
    T = stream.num_chunks
    state = DecoderState()
    # encoder positions each decoder position could see when it was computed
    visible: list[int] = []

    for t in range(1, T + 1):
        state.heard = t
        if t == T:
            flushed = 0
            while not state.finished:
                _flush_guard(state, flushed, flush, stream)
                logits, _ = model.next_logits(rows, True, state.emitted, [*visible, T + 1])
                state.model_calls += 1
                tok = greedy_text_token(logits, vocab.wait_id)
                state.emit(tok, t, vocab.eos_id)
                visible.append(T + 1)
                flushed += 1
            return state

        for _ in range(flush.max_tokens_per_chunk):
            state.policy_calls += 1
            if policy.name == "alignatt":
                logits, attn = model.next_logits(rows[:t], False, state.emitted, [*visible, t])
                state.model_calls += 1
                if alignatt_decision(cross_attention_peak(attn, t), t, policy.f) == WAIT:
                    break
            else:
                if _fixed_decision(policy, state) == WAIT:
                    break
                logits, _ = model.next_logits(rows[:t], False, state.emitted, [*visible, t])
                state.model_calls += 1
            tok = greedy_text_token(logits, vocab.wait_id)
            state.emit(tok, t, vocab.eos_id)
            visible.append(t)
            if state.finished:
                return state
    return state


# -- emission-log files ----------------------------------------------------


def write_logs(path, logs: Iterable[tuple[str, EmissionLog]], vocab: Vocabulary, header: dict | None = None) -> None:
    """JSONL, one record per utterance, optional header line; written atomically."""
    path = Path(path)
    lines = []
    if header is not None:
        lines.append(json.dumps({"header": header}, sort_keys=True))
    lines += [json.dumps(log.to_record(utt, vocab), sort_keys=True) for utt, log in logs]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_logs(path, vocab: Vocabulary) -> tuple[dict, list[tuple[str, EmissionLog]]]:
    header: dict = {}
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if "header" in rec:
                    header = rec["header"]
                    continue
                out.append((rec["utt"], EmissionLog.from_record(rec, vocab)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: bad emission record ({exc})") from exc
    return header, out

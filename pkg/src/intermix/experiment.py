"""Glue for training runs, corpus decoding and parameter sweeps."""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .align import Supervision
from .core import EmissionLog, Vocabulary
from .decode import FlushConfig, TruncatedOutputError, stream_decode
from .metrics import ReportRow, all_from_times, summarize
from .model.crossattn import CrossAttentionModel, CrossAttnConfig, cross_attention_loss, make_item
from .model.intermixed import IntermixedModel, ToyModelConfig, collate, pack_supervision
from .model.losses import multitask_loss, step_sequence_loss
from .model.train import TrainConfig, train
from .policy import PolicyConfig
from .synth import Lexicon, SynthExample, corrupt_alignment, supervise

log = logging.getLogger(__name__)


def supervisions(
    examples: Sequence[SynthExample], vocab: Vocabulary, corrupt_fraction: float = 0.0, seed: int = 0
) -> list[Supervision]:
    out = []
    for i, ex in enumerate(examples):
        a = ex.gold_alignment
        if corrupt_fraction:
            a = corrupt_alignment(a, corrupt_fraction, seed=seed + i)
        out.append(supervise(ex, vocab, a))
    return out


def reference_latency(examples: Sequence[SynthExample], sups: Sequence[Supervision], chunk_ms: int) -> float:
    """Token-weighted ALL of the supervision itself."""
    lags, n = 0.0, 0
    for ex, sup in zip(examples, sups, strict=True):
        times = np.asarray(sup.word_emit_chunk, dtype=np.float64) * chunk_ms / 1000
        lags += all_from_times(times, ex.frames.duration_s) * len(times)
        n += len(times)
    return lags / n


def train_intermixed(
    examples: Sequence[SynthExample],
    lex: Lexicon,
    model_config: ToyModelConfig,
    train_config: TrainConfig,
    corrupt_fraction: float = 0.0,
) -> tuple[IntermixedModel, list[float]]:
    model = IntermixedModel(model_config)
    sups = supervisions(examples, lex.vocab, corrupt_fraction, seed=train_config.seed)
    items = [pack_supervision(s, ex.frames, lex.vocab, model.eoa_vector) for s, ex in zip(sups, examples)]
    smoothing = train_config.label_smoothing
    if model.has_early_exit and train_config.policy_weight:
        loss = functools.partial(multitask_loss, policy_weight=train_config.policy_weight, smoothing=smoothing)
    else:
        loss = functools.partial(step_sequence_loss, smoothing=smoothing)
    history = train(model, items, train_config, loss, collate)
    return model, history


def train_cross_attention(
    examples: Sequence[SynthExample], config: CrossAttnConfig, train_config: TrainConfig
) -> tuple[CrossAttentionModel, list[float]]:
    model = CrossAttentionModel(config)
    items = [make_item(ex.frames, ex.target_tokens, config) for ex in examples]
    history = train(model, items, train_config, cross_attention_loss, model.collate)
    return model, history


@dataclass
class CorpusDecode:
    utt_ids: list[str]
    hyps: list[tuple[int, ...]]
    refs: list[tuple[int, ...]]
    logs: list[EmissionLog]
    # utterances whose flush hit the cap; their partial output is kept and scored
    truncated: list[str] = field(default_factory=list)

    def row(self, policy: PolicyConfig, corpus: str) -> ReportRow:
        return summarize(policy.name, policy.parameter, corpus, self.logs, self.hyps, self.refs)

    @property
    def exact_match(self) -> float:
        return float(np.mean([h == r for h, r in zip(self.hyps, self.refs)]))


def decode_corpus(model, examples: Sequence[SynthExample], policy: PolicyConfig, flush: FlushConfig | None = None) -> CorpusDecode:
    out = CorpusDecode([], [], [], [])
    for ex in examples:
        try:
            toks, elog = stream_decode(model, policy, ex.frames, flush)
        except TruncatedOutputError as exc:
            log.warning("%s: %s", ex.utt_id, exc)
            toks, elog = exc.tokens, exc.log
            out.truncated.append(ex.utt_id)
        out.utt_ids.append(ex.utt_id)
        out.hyps.append(tuple(toks))
        out.refs.append(tuple(ex.target_tokens))
        out.logs.append(elog)
    return out


def policy_grid(name: str, kappas=(), nus=(), ks=(), fs=(), kappa: float = 0.0) -> list[PolicyConfig]:
    """One policy config per value of the parameter ``name`` sweeps."""
    if name == "intermixed":
        return [PolicyConfig(name, kappa=float(x)) for x in kappas]
    if name == "intermixed+early_exit":
        return [PolicyConfig(name, kappa=kappa, nu=float(x)) for x in nus]
    if name == "wait_k":
        return [PolicyConfig(name, k=int(x)) for x in ks]
    if name == "alignatt":
        return [PolicyConfig(name, f=int(x)) for x in fs]
    return [PolicyConfig(name)]


def sweep(model, examples, policies: Sequence[PolicyConfig], corpus: str, flush: FlushConfig | None = None) -> list[ReportRow]:
    rows = []
    for p in policies:
        rows.append(decode_corpus(model, examples, p, flush).row(p, corpus))
        log.info("%s %s: %s", p.name, p.parameter, rows[-1])
    return rows

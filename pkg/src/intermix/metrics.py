"""Latency, energy and quality measures for emission logs.

All latencies are logical: a token emitted at chunk ``c`` is stamped
``c * chunk_ms``; tokens emitted while flushing are stamped with the audio
duration.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import EmissionLog

REPORT_COLUMNS = (
    "policy",
    "parameter",
    "corpus",
    "all_s",
    "al_s",
    "laal_s",
    "calls_per_token",
    "policy_calls_per_token",
    "exact_match",
    "similarity",
)


def _check(times) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if times.size == 0:
        raise ValueError("latency is undefined for an empty output")
    return times


def logical_lags(times, duration: float) -> np.ndarray:
    """Per-token lag behind an even spread: token i is due at ``i * duration / U``."""
    times = _check(times)
    U = len(times)
    return times - np.arange(1, U + 1) * duration / U


def all_from_times(times, duration: float) -> float:
    return float(np.mean(logical_lags(times, duration)))


def al_from_times(times, duration: float, target_len: float) -> float:
    """Average lagging against the staircase ``(i - 1) * duration / target_len``."""
    times = _check(times)
    gamma = target_len / duration
    reached = np.nonzero(times >= duration)[0]
    tau = int(reached[0]) + 1 if reached.size else len(times)
    i = np.arange(tau)
    return float(np.mean(times[:tau] - i / gamma))


def average_logical_latency(log: EmissionLog) -> float:
    return all_from_times(log.emit_times(), log.duration_s)


def average_lagging(log: EmissionLog, reference_length: int | None = None) -> float:
    """Hypothesis-length AL by default; pass ``reference_length`` for reference mode."""
    U = len(log.emissions)
    return al_from_times(log.emit_times(), log.duration_s, reference_length or U)


def laal(log: EmissionLog, hyp_len: int | None = None, ref_len: int = 0) -> float:
    hyp_len = len(log.emissions) if hyp_len is None else hyp_len
    return al_from_times(log.emit_times(), log.duration_s, max(hyp_len, ref_len))


def calls_per_output_token(log: EmissionLog) -> float:
    U = len(log.emissions)
    if U == 0:
        raise ValueError("no output tokens")
    return log.model_calls / U


def policy_calls_per_output_token(log: EmissionLog) -> float:
    U = len(log.emissions)
    if U == 0:
        raise ValueError("no output tokens")
    return log.policy_calls / U


def edit_distance(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class QualityReport:
    exact_match_rate: float
    similarity: float


def quality_proxy(hyp: Sequence, ref: Sequence) -> QualityReport:
    """Exact match and ``1 - edit_distance / max_len`` for one pair."""
    longest = max(len(hyp), len(ref))
    sim = 1.0 if longest == 0 else 1.0 - edit_distance(hyp, ref) / longest
    return QualityReport(float(list(hyp) == list(ref)), sim)


def corpus_quality(hyps: Sequence[Sequence], refs: Sequence[Sequence]) -> QualityReport:
    reports = [quality_proxy(h, r) for h, r in zip(hyps, refs, strict=True)]
    return QualityReport(
        float(np.mean([q.exact_match_rate for q in reports])),
        float(np.mean([q.similarity for q in reports])),
    )


@dataclass(frozen=True)
class LatencyReport:
    """Corpus latency.

    ALL is token-weighted over the corpus; AL and LAAL average per utterance.
    """

    all_seconds: float
    al_seconds: float
    laal_seconds: float
    per_utterance_all: tuple[float, ...] = field(repr=False)
    per_utterance_al: tuple[float, ...] = field(repr=False)
    per_utterance_laal: tuple[float, ...] = field(repr=False)


def corpus_latency(logs: Sequence[EmissionLog], ref_lens: Sequence[int] | None = None) -> LatencyReport:
    if not logs:
        raise ValueError("empty corpus")
    ref_lens = ref_lens if ref_lens is not None else [len(g.emissions) for g in logs]
    lags = [logical_lags(g.emit_times(), g.duration_s) for g in logs]
    per_all = tuple(float(x.mean()) for x in lags)
    per_al = tuple(average_lagging(g) for g in logs)
    per_laal = tuple(laal(g, ref_len=r) for g, r in zip(logs, ref_lens, strict=True))
    return LatencyReport(
        float(np.concatenate(lags).mean()),
        float(np.mean(per_al)),
        float(np.mean(per_laal)),
        per_all,
        per_al,
        per_laal,
    )


@dataclass
class ReportRow:
    policy: str
    parameter: float
    corpus: str
    all_s: float
    al_s: float
    laal_s: float
    calls_per_token: float
    policy_calls_per_token: float
    exact_match: float
    similarity: float

    def as_list(self) -> list:
        return [getattr(self, c) for c in REPORT_COLUMNS]


def summarize(policy: str, parameter: float, corpus: str, logs, hyps, refs) -> ReportRow:
    lat = corpus_latency(logs, [len(r) for r in refs])
    q = corpus_quality(hyps, refs)
    n_tokens = sum(len(g.emissions) for g in logs)
    return ReportRow(
        policy,
        parameter,
        corpus,
        lat.all_seconds,
        lat.al_seconds,
        lat.laal_seconds,
        sum(g.model_calls for g in logs) / n_tokens,
        sum(g.policy_calls for g in logs) / n_tokens,
        q.exact_match_rate,
        q.similarity,
    )


def rows_to_csv(rows: Sequence[ReportRow], root_seed: int | None = None) -> str:
    buf = io.StringIO()
    if root_seed is not None:
        buf.write(f"# root_seed={root_seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in sorted(rows, key=lambda r: (r.policy, r.parameter, r.corpus)):
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r.as_list()])
    return buf.getvalue()

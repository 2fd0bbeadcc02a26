"""Phrase alignments and their compilation into step-sequence supervision.

Each target word is anchored to the final word of its aligned source phrase.
A word may be emitted once the chunk holding its anchor's last frame has been
heard, and words come out in order, so emission chunks are a running maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Protocol, Sequence

from .core import EmissionLog, FrameStream, StepSequence, Vocabulary

SPEECH = "speech"
TEXT = "text"


@dataclass(frozen=True)
class AlignedPair:
    """Inclusive word-index spans ``[begin, end]`` on both sides.

    ``source_words``/``target_words`` optionally carry the phrase text as an
    external aligner reported it; validation checks them against the sentence.
    """

    source_span: tuple[int, int]
    target_span: tuple[int, int]
    valid: bool = True
    source_words: tuple | None = None
    target_words: tuple | None = None


@dataclass(frozen=True)
class PhraseAlignment:
    pairs: tuple[AlignedPair, ...]

    def valid_pairs(self) -> list[AlignedPair]:
        return [p for p in self.pairs if p.valid]

    def to_json(self) -> list[dict]:
        return [
            {"source": list(p.source_span), "target": list(p.target_span), "valid": p.valid}
            for p in self.pairs
        ]

    @classmethod
    def from_json(cls, data: list[dict]) -> "PhraseAlignment":
        return cls(
            tuple(
                AlignedPair(tuple(d["source"]), tuple(d["target"]), bool(d.get("valid", True)))
                for d in data
            )
        )


class Slot(NamedTuple):
    """One input position of the intermixed model: a speech chunk or a token."""

    kind: str
    index: int


@dataclass(frozen=True)
class Supervision:
    steps: StepSequence
    input_layout: tuple[Slot, ...]
    word_emit_chunk: tuple[int, ...]
    num_chunks: int


class AlignmentProvider(Protocol):
    """Anything that can produce a phrase alignment for a sentence pair."""

    def align(self, source: Sequence, target: Sequence) -> PhraseAlignment: ...


def _span_ok(span, n: int) -> bool:
    b, e = span
    return 0 <= b <= e < n


def validate_and_repair(a: PhraseAlignment, source: Sequence, target: Sequence) -> PhraseAlignment:
    """Drop pairs that do not fit the texts and re-attach orphaned target words.

    ``target`` excludes ``<EOS>``.  A target word left uncovered inherits the
    source span of the nearest following valid pair; when no valid pair
    follows, it is anchored on the final source word.
    """
    n_src, n_tgt = len(source), len(target)
    covered = [False] * n_tgt
    kept, rejected = [], []
    for p in a.pairs:
        ok = p.valid and _span_ok(p.source_span, n_src) and _span_ok(p.target_span, n_tgt)
        if ok and p.source_words is not None:
            b, e = p.source_span
            ok = tuple(source[b : e + 1]) == tuple(p.source_words)
        if ok and p.target_words is not None:
            b, e = p.target_span
            ok = tuple(target[b : e + 1]) == tuple(p.target_words)
        if ok:
            b, e = p.target_span
            ok = not any(covered[b : e + 1])
        if ok:
            for j in range(p.target_span[0], p.target_span[1] + 1):
                covered[j] = True
            kept.append(p)
        else:
            rejected.append(replace(p, valid=False))

    kept.sort(key=lambda p: p.target_span[0])
    final_word = (max(n_src - 1, 0), max(n_src - 1, 0))
    repairs = []
    j = 0
    while j < n_tgt:
        if covered[j]:
            j += 1
            continue
        run_end = j
        while run_end + 1 < n_tgt and not covered[run_end + 1]:
            run_end += 1
        following = [p for p in kept if p.target_span[0] > run_end]
        src = following[0].source_span if following else final_word
        repairs.append(AlignedPair(src, (j, run_end)))
        j = run_end + 1

    valid = sorted(kept + repairs, key=lambda p: p.target_span[0])
    return PhraseAlignment(tuple(valid + rejected))


def anchor_target_words(a: PhraseAlignment, num_target_words: int | None = None) -> list[int]:
    """Source word index each target word waits for (end of its source phrase)."""
    pairs = a.valid_pairs()
    if num_target_words is None:
        num_target_words = max((p.target_span[1] + 1 for p in pairs), default=0)
    anchors: list[int | None] = [None] * num_target_words
    for p in pairs:
        b, e = p.target_span
        if not 0 <= b <= e < num_target_words:
            raise ValueError(f"target span {p.target_span} outside 0..{num_target_words - 1}")
        for j in range(b, e + 1):
            if anchors[j] is not None:
                raise ValueError(f"target word {j} covered twice; repair the alignment first")
            anchors[j] = p.source_span[1]
    missing = [j for j, x in enumerate(anchors) if x is None]
    if missing:
        raise ValueError(f"target words {missing} unaligned; repair the alignment first")
    return anchors  # type: ignore[return-value]


def compile_step_sequence(
    anchors: Sequence[int],
    word_end_frames: Sequence[int],
    stream: FrameStream,
    target: Sequence[int],
    vocab: Vocabulary,
) -> Supervision:
    """Build the step sequence and intermixed input layout for one utterance.

    ``target`` ends with ``<EOS>`` and ``anchors`` covers the words before it.
    ``<EOS>`` is emitted at the final chunk.
    """
    if not target or target[-1] != vocab.eos_id:
        raise ValueError("target must end with <EOS>")
    if len(anchors) != len(target) - 1:
        raise ValueError("need one anchor per target word before <EOS>")
    T = stream.num_chunks
    fpc = stream.frames_per_chunk
    emit = []
    prev = 1
    for a in anchors:
        frame = word_end_frames[a]
        if frame > len(stream.frames):
            raise ValueError(f"anchor frame {frame} beyond stream end ({len(stream.frames)} frames)")
        prev = max(prev, math.ceil(frame / fpc))
        emit.append(prev)
    emit.append(T)

    steps: list[int] = []
    heard = 1
    for tok, c in zip(target, emit):
        steps.extend([vocab.wait_id] * (c - heard))
        heard = c
        steps.append(tok)

    layout = [Slot(SPEECH, 1)]
    heard = 1
    for s in steps[:-1]:
        if s == vocab.wait_id:
            heard += 1
            layout.append(Slot(SPEECH, heard))
        else:
            layout.append(Slot(TEXT, s))
    return Supervision(tuple(steps), tuple(layout), tuple(emit), T)


def format_layout(layout: Sequence[Slot], vocab: Vocabulary) -> list[str]:
    return [f"e{s.index}" if s.kind == SPEECH else f"z({vocab.token_of(s.index)})" for s in layout]


def reference_log(sup: Supervision, vocab: Vocabulary, chunk_ms: int) -> EmissionLog:
    """Emission log of a decoder that follows the supervision exactly."""
    text = [s for s in sup.steps if s != vocab.wait_id]
    return EmissionLog.from_chunks(text, sup.word_emit_chunk, sup.num_chunks, chunk_ms)


class GoldAlignmentProvider:
    """Returns the alignment a synthetic example was generated with."""

    def __init__(self, alignments: dict):
        self._alignments = alignments

    def align(self, source, target) -> PhraseAlignment:
        key = (tuple(source), tuple(target))
        try:
            return self._alignments[key]
        except KeyError:
            raise KeyError("no gold alignment for this sentence pair") from None

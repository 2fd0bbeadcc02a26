"""Step sequences, vocabularies, frame streams and emission logs.

A step sequence interleaves text tokens with wait tokens ``W``.  Each ``W``
consumes one more audio chunk; the first chunk is available before any step is
taken, so a text token at position ``i`` has heard ``1 + (#W before i)``
chunks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

WAIT_TOKEN = "<W>"
EOS_TOKEN = "<EOS>"
EOA_TOKEN = "<EOA>"

StepSequence = tuple[int, ...]


@dataclass(frozen=True)
class Vocabulary:
    """Augmented output vocabulary: text words, ``<EOS>`` and the wait token.

    Ids are dense: words take ``0..n-1``, ``<EOS>`` is ``n`` and ``W`` is
    ``n + 1``.
    """

    words: tuple[str, ...]

    def __post_init__(self):
        reserved = {WAIT_TOKEN, EOS_TOKEN, EOA_TOKEN}
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary words must be distinct")
        if reserved & set(self.words):
            raise ValueError("vocabulary words may not use reserved symbols")

    @classmethod
    def of_size(cls, n: int, prefix: str = "t") -> "Vocabulary":
        width = max(2, len(str(n - 1)))
        return cls(tuple(f"{prefix}{i:0{width}d}" for i in range(n)))

    @property
    def eos_id(self) -> int:
        return len(self.words)

    @property
    def wait_id(self) -> int:
        return len(self.words) + 1

    @property
    def size(self) -> int:
        return len(self.words) + 2

    @property
    def text_ids(self) -> tuple[int, ...]:
        """Ids of the text vocabulary, ``<EOS>`` included."""
        return tuple(range(len(self.words) + 1))

    def token_of(self, token_id: int) -> str:
        if token_id == self.wait_id:
            return WAIT_TOKEN
        if token_id == self.eos_id:
            return EOS_TOKEN
        if 0 <= token_id < len(self.words):
            return self.words[token_id]
        raise KeyError(f"token id {token_id} outside vocabulary of size {self.size}")

    def id_of(self, token: str) -> int:
        if token == WAIT_TOKEN:
            return self.wait_id
        if token == EOS_TOKEN:
            return self.eos_id
        try:
            return self.words.index(token)
        except ValueError:
            raise KeyError(f"unknown token {token!r}") from None

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id_of(t) for t in tokens)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.token_of(i) for i in ids]


def check_steps(y: Sequence[int], vocab: Vocabulary, complete: bool = True) -> None:
    """Raise ``ValueError`` unless ``y`` is a well-formed step sequence."""
    for s in y:
        if not 0 <= s < vocab.size:
            raise ValueError(f"step {s} outside vocabulary")
    n_eos = sum(1 for s in y if s == vocab.eos_id)
    if n_eos > 1 or (n_eos == 1 and y[-1] != vocab.eos_id):
        raise ValueError("<EOS> may occur only once, as the final step")
    if complete and n_eos != 1:
        raise ValueError("a complete step sequence ends with <EOS>")


def words_of(y: Sequence[int], vocab: Vocabulary) -> tuple[int, ...]:
    return tuple(s for s in y if s != vocab.wait_id)


def count_text(y: Sequence[int], vocab: Vocabulary) -> int:
    return sum(1 for s in y if s != vocab.wait_id)


def count_wait(y: Sequence[int], vocab: Vocabulary) -> int:
    return sum(1 for s in y if s == vocab.wait_id)


def wait_emit_of(y: Sequence[int], vocab: Vocabulary) -> str:
    """Project a step sequence onto wait/emit decisions, one letter per step."""
    return "".join("W" if s == vocab.wait_id else "E" for s in y)


def interleave(words: Sequence[int], decisions: str, vocab: Vocabulary) -> StepSequence:
    """Inverse of (``words_of``, ``wait_emit_of``)."""
    if decisions.count("E") != len(words):
        raise ValueError("number of emit decisions must equal number of words")
    it = iter(words)
    return tuple(vocab.wait_id if d == "W" else next(it) for d in decisions)


def offline_step_sequence(w: Sequence[int], num_chunks: int, vocab: Vocabulary) -> StepSequence:
    """All output after the full audio: ``T - 1`` waits, then every word."""
    if not w:
        raise ValueError("empty word sequence")
    if w[-1] != vocab.eos_id:
        raise ValueError("word sequence must end with <EOS>")
    if num_chunks < 1:
        raise ValueError("need at least one chunk")
    return (vocab.wait_id,) * (num_chunks - 1) + tuple(w)


def emit_chunks_of(y: Sequence[int], vocab: Vocabulary) -> tuple[int, ...]:
    """Number of chunks heard when each text step of ``y`` is taken."""
    chunks, heard = [], 1
    for s in y:
        if s == vocab.wait_id:
            heard += 1
        else:
            chunks.append(heard)
    return tuple(chunks)


@dataclass(frozen=True, eq=False)
class FrameStream:
    """Feature frames cut into fixed, non-overlapping chunks (1-based)."""

    frames: np.ndarray
    frames_per_chunk: int = 8
    chunk_ms: int = 640

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 2 or len(frames) == 0:
            raise ValueError("frames must be a non-empty 2-d array")
        if self.frames_per_chunk < 1 or self.chunk_ms <= 0:
            raise ValueError("frames_per_chunk and chunk_ms must be positive")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def num_chunks(self) -> int:
        return math.ceil(len(self.frames) / self.frames_per_chunk)

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_s(self) -> float:
        return self.num_chunks * self.chunk_ms / 1000.0

    def chunk(self, c: int) -> np.ndarray:
        if not 1 <= c <= self.num_chunks:
            raise IndexError(f"chunk {c} outside 1..{self.num_chunks}")
        return self.frames[(c - 1) * self.frames_per_chunk : c * self.frames_per_chunk]

    def chunk_of_frame(self, frame: int) -> int:
        """Chunk containing 1-based ``frame``."""
        if not 1 <= frame <= len(self.frames):
            raise IndexError(f"frame {frame} outside stream of {len(self.frames)} frames")
        return math.ceil(frame / self.frames_per_chunk)


@dataclass(frozen=True)
class Emission:
    token: int
    chunk: int
    order: int


@dataclass(frozen=True)
class EmissionLog:
    emissions: tuple[Emission, ...]
    model_calls: int
    policy_calls: int
    total_chunks: int
    chunk_ms: int = 640

    def __post_init__(self):
        chunks = [e.chunk for e in self.emissions]
        if any(b < a for a, b in zip(chunks, chunks[1:])):
            raise ValueError("emission chunks must be non-decreasing")
        if any(not 1 <= c <= self.total_chunks for c in chunks):
            raise ValueError("emission chunk outside the stream")

    @classmethod
    def from_chunks(cls, tokens, chunks, total_chunks, chunk_ms=640, model_calls=0, policy_calls=0):
        ems = tuple(Emission(int(t), int(c), i) for i, (t, c) in enumerate(zip(tokens, chunks)))
        return cls(ems, model_calls, policy_calls, total_chunks, chunk_ms)

    @property
    def tokens(self) -> tuple[int, ...]:
        return tuple(e.token for e in self.emissions)

    @property
    def duration_s(self) -> float:
        return self.total_chunks * self.chunk_ms / 1000.0

    def emit_times(self) -> np.ndarray:
        """Emission times in seconds; a token emitted at chunk c has heard c chunks."""
        return np.array([e.chunk * self.chunk_ms / 1000.0 for e in self.emissions], dtype=np.float64)

    def to_record(self, utt: str, vocab: Vocabulary) -> dict:
        return {
            "utt": utt,
            "emissions": [{"token": vocab.token_of(e.token), "chunk": e.chunk} for e in self.emissions],
            "model_calls": self.model_calls,
            "policy_calls": self.policy_calls,
            "T": self.total_chunks,
            "chunk_ms": self.chunk_ms,
        }

    @classmethod
    def from_record(cls, record: dict, vocab: Vocabulary) -> "EmissionLog":
        ems = record["emissions"]
        return cls.from_chunks(
            [vocab.id_of(e["token"]) for e in ems],
            [e["chunk"] for e in ems],
            total_chunks=record["T"],
            chunk_ms=record["chunk_ms"],
            model_calls=record["model_calls"],
            policy_calls=record["policy_calls"],
        )


@dataclass
class UtteranceRecord:
    """The per-utterance JSONL record shared by corpus and supervision files."""

    source: list[str]
    target: list[str]
    steps: list[str]
    chunk_ms: int
    frames_per_chunk: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "source": list(self.source),
            "target": list(self.target),
            "steps": list(self.steps),
            "chunk_ms": self.chunk_ms,
            "frames_per_chunk": self.frames_per_chunk,
        }
        out.update(self.extra)
        return out

    @classmethod
    def from_json(cls, d: dict) -> "UtteranceRecord":
        core = {"source", "target", "steps", "chunk_ms", "frames_per_chunk"}
        missing = core - d.keys()
        if missing:
            raise KeyError(f"record lacks fields {sorted(missing)}")
        return cls(
            list(d["source"]),
            list(d["target"]),
            list(d["steps"]),
            int(d["chunk_ms"]),
            int(d["frames_per_chunk"]),
            {k: v for k, v in d.items() if k not in core},
        )

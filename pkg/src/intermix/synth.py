"""Synthetic "speech" corpora with gold word timings and phrase alignments.

Source words fall into three classes by id: modifiers, nouns and verbs.  A
phrase is zero or more modifiers followed by a noun or verb head.  Target
words are a fixed permutation of source words.  Reordering modes:

``monotonic``
    target phrases keep source word order.
``local_swap``
    each target phrase is reversed (head first), phrase order kept.
``block_reorder``
    as ``local_swap``, and a verb phrase trades places with the phrase that
    follows it, so its translation must wait for later audio.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .align import AlignedPair, PhraseAlignment, Supervision, anchor_target_words, compile_step_sequence
from .core import FrameStream, UtteranceRecord, Vocabulary

REORDER_MODES = ("monotonic", "local_swap", "block_reorder")
SILENCE_STD = 0.01


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 12
    min_source_len: int = 3
    max_source_len: int = 6
    frames_per_token_mean: int = 6
    frames_per_token_jitter: int = 2
    feature_dim: int = 16
    frames_per_chunk: int = 8
    chunk_ms: int = 640
    reorder_mode: str = "block_reorder"
    # weights for phrase lengths 1, 2, 3, ...
    phrase_len_weights: tuple[float, ...] = (0.45, 0.35, 0.2)
    verb_prob: float = 0.35
    lead_silence_max_frames: int = 6
    # some utterances open with a long pause so models see silence of varied length
    long_silence_prob: float = 0.3
    long_silence_max_chunks: int = 10
    silence_prefix_chunks: int = 0
    noise_std: float = 0.08
    # the word-end marker's strength is drawn from [marker_min, 1]
    marker_min: float = 0.3
    # allow the same word twice in a row in the source
    adjacent_repeats: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 3:
            raise ValueError("vocab_size must allow modifier, noun and verb classes (>= 3)")
        if not 1 <= self.min_source_len <= self.max_source_len:
            raise ValueError("need 1 <= min_source_len <= max_source_len")
        if self.frames_per_token_mean < 1 or not 0 <= self.frames_per_token_jitter < self.frames_per_token_mean:
            raise ValueError("need 0 <= frames_per_token_jitter < frames_per_token_mean")
        if self.feature_dim < 2 or self.frames_per_chunk < 1 or self.chunk_ms <= 0:
            raise ValueError("feature_dim >= 2, frames_per_chunk >= 1 and chunk_ms > 0 required")
        if self.reorder_mode not in REORDER_MODES:
            raise ValueError(f"reorder_mode must be one of {REORDER_MODES}")
        w = np.asarray(self.phrase_len_weights, dtype=float)
        if len(w) == 0 or (w < 0).any() or w.sum() <= 0:
            raise ValueError("phrase_len_weights must be non-negative with positive sum")
        if not 0.0 <= self.verb_prob <= 1.0:
            raise ValueError("verb_prob must be a probability")
        if self.lead_silence_max_frames < 0 or self.silence_prefix_chunks < 0 or self.noise_std < 0:
            raise ValueError("silence lengths and noise_std must be non-negative")
        if not 0.0 <= self.marker_min <= 1.0:
            raise ValueError("marker_min must lie in [0, 1]")
        if not 0.0 <= self.long_silence_prob <= 1.0 or self.long_silence_max_chunks < 0:
            raise ValueError("long_silence_prob must be a probability and long_silence_max_chunks >= 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "phrase_len_weights" in d:
            d["phrase_len_weights"] = tuple(d["phrase_len_weights"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SynthExample:
    utt_id: str
    source_tokens: tuple[int, ...]
    target_tokens: tuple[int, ...]  # ends with <EOS>
    frames: FrameStream
    word_end_frames: tuple[int, ...]  # 1-based last frame of each source word
    gold_alignment: PhraseAlignment
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Lexicon:
    """Fixed per-seed mapping shared by every example of a corpus."""

    vocab: Vocabulary
    source_words: tuple[str, ...]
    translation: tuple[int, ...]  # source id -> target id
    embeddings: np.ndarray

    def word_class(self, k: int) -> str:
        n = len(self.source_words)
        if k < n // 3:
            return "modifier"
        if k < (2 * n) // 3:
            return "noun"
        return "verb"


def make_lexicon(config: SynthConfig) -> Lexicon:
    rng = np.random.default_rng([config.seed, 0x1E8])
    n = config.vocab_size
    vocab = Vocabulary.of_size(n, prefix="t")
    source_words = tuple(Vocabulary.of_size(n, prefix="s").words)
    translation = tuple(int(i) for i in rng.permutation(n))
    # last feature dimension is reserved for the word-final marker
    emb = rng.standard_normal((n, config.feature_dim - 1))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return Lexicon(vocab, source_words, translation, emb)


def _sample_phrases(config: SynthConfig, lex: Lexicon, rng: np.random.Generator) -> list[list[int]]:
    n = config.vocab_size
    mods = np.arange(0, n // 3)
    nouns = np.arange(n // 3, (2 * n) // 3)
    verbs = np.arange((2 * n) // 3, n)
    weights = np.asarray(config.phrase_len_weights, dtype=float)
    weights = weights / weights.sum()
    goal = int(rng.integers(config.min_source_len, config.max_source_len + 1))
    phrases: list[list[int]] = []
    total, prev = 0, None
    while total < goal:
        room = config.max_source_len - total
        length = int(rng.choice(len(weights), p=weights)) + 1
        length = min(length, room)
        if length > 1 and len(mods) == 0:
            length = 1
        head_pool = verbs if rng.random() < config.verb_prob else nouns
        phrase: list[int] = []
        for pool in [mods] * (length - 1) + [head_pool]:
            if not config.adjacent_repeats and prev is not None and len(pool) > 1:
                pool = pool[pool != prev]
            prev = int(rng.choice(pool))
            phrase.append(prev)
        phrases.append(phrase)
        total += length
    return phrases


def _arrange_target(phrases: list[list[int]], mode: str, lex: Lexicon) -> list[int]:
    """Order of source phrases on the target side."""
    order = list(range(len(phrases)))
    if mode == "block_reorder":
        i = 0
        while i < len(order) - 1:
            if lex.word_class(phrases[order[i]][-1]) == "verb":
                order[i], order[i + 1] = order[i + 1], order[i]
                i += 2
            else:
                i += 1
    return order


def _silence(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return SILENCE_STD * rng.standard_normal((n, dim))


def generate_example(config: SynthConfig, index: int, lex: Lexicon | None = None) -> SynthExample:
    """Generate example ``index``; depends only on ``(config, index)``."""
    lex = lex or make_lexicon(config)
    rng = np.random.default_rng([config.seed, index])
    phrases = _sample_phrases(config, lex, rng)
    source = [k for p in phrases for k in p]

    spans, pos = [], 0
    for p in phrases:
        spans.append((pos, pos + len(p) - 1))
        pos += len(p)

    target: list[int] = []
    pairs = []
    for pi in _arrange_target(phrases, config.reorder_mode, lex):
        words = [lex.translation[k] for k in phrases[pi]]
        if config.reorder_mode != "monotonic":
            words.reverse()
        pairs.append(AlignedPair(spans[pi], (len(target), len(target) + len(words) - 1)))
        target.extend(words)
    target.append(lex.vocab.eos_id)

    dim = config.feature_dim
    lead = int(rng.integers(0, config.lead_silence_max_frames + 1))
    if config.long_silence_max_chunks and rng.random() < config.long_silence_prob:
        lead += int(rng.integers(1, config.long_silence_max_chunks * config.frames_per_chunk + 1))
    blocks = [_silence(rng, lead, dim)]
    ends, n_frames = [], lead
    for k in source:
        m = config.frames_per_token_mean + int(
            rng.integers(-config.frames_per_token_jitter, config.frames_per_token_jitter + 1)
        )
        block = config.noise_std * rng.standard_normal((m, dim))
        block[:, :-1] += lex.embeddings[k]
        # word ends are not always clearly audible
        block[-1, -1] += rng.uniform(config.marker_min, 1.0)
        blocks.append(block)
        n_frames += m
        ends.append(n_frames)
    pad = -n_frames % config.frames_per_chunk
    blocks.append(_silence(rng, pad, dim))
    frames = FrameStream(np.concatenate(blocks), config.frames_per_chunk, config.chunk_ms)

    ex = SynthExample(
        utt_id=f"utt{index:06d}",
        source_tokens=tuple(source),
        target_tokens=tuple(target),
        frames=frames,
        word_end_frames=tuple(ends),
        gold_alignment=PhraseAlignment(tuple(pairs)),
    )
    if config.silence_prefix_chunks:
        ex = inject_silence(ex, config.silence_prefix_chunks, seed=config.seed)
    return ex


def generate_corpus(config: SynthConfig, n: int, start: int = 0) -> list[SynthExample]:
    config.validate()
    if n < 1:
        raise ValueError("n must be >= 1")
    lex = make_lexicon(config)
    return [generate_example(config, start + i, lex) for i in range(n)]


def inject_silence(ex: SynthExample, chunks: int, seed: int = 0) -> SynthExample:
    """Prepend ``chunks`` whole chunks of near-silent frames."""
    if chunks < 0:
        raise ValueError("chunks must be >= 0")
    if chunks == 0:
        return ex
    fpc = ex.frames.frames_per_chunk
    n = chunks * fpc
    rng = np.random.default_rng([seed, 0x5117, zlib.crc32(ex.utt_id.encode())])
    frames = np.concatenate([_silence(rng, n, ex.frames.feature_dim), ex.frames.frames])
    return replace(
        ex,
        frames=FrameStream(frames, fpc, ex.frames.chunk_ms),
        word_end_frames=tuple(f + n for f in ex.word_end_frames),
        meta={**ex.meta, "silence_chunks": ex.meta.get("silence_chunks", 0) + chunks},
    )


def corrupt_alignment(a: PhraseAlignment, fraction: float, seed: int = 0, mode: str = "premature_word_level") -> PhraseAlignment:
    """Word-level alignment that anchors some target words too early.

    Every phrase pair is split into one pair per target word, each anchored on
    the source phrase's final word (timing-equivalent to the phrase pair).  A
    seeded ``fraction`` of target words is then moved to a uniformly chosen
    earlier source word.
    """
    if mode != "premature_word_level":
        raise ValueError(f"unknown corruption mode {mode!r}")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    singles = []
    for p in a.valid_pairs():
        end = p.source_span[1]
        for j in range(p.target_span[0], p.target_span[1] + 1):
            singles.append((j, end))
    singles.sort()
    rng = np.random.default_rng([seed, 0xC0AA])
    eligible = [i for i, (_, src) in enumerate(singles) if src > 0]
    n_shift = int(round(fraction * len(eligible)))
    chosen = set(rng.choice(eligible, size=n_shift, replace=False).tolist()) if n_shift else set()
    pairs = []
    for i, (j, src) in enumerate(singles):
        if i in chosen:
            src = int(rng.integers(0, src))
        pairs.append(AlignedPair((src, src), (j, j)))
    return PhraseAlignment(tuple(pairs))


class CorruptingProvider:
    """Wraps another alignment provider and corrupts what it returns."""

    def __init__(self, inner, fraction: float, seed: int = 0):
        self.inner = inner
        self.fraction = fraction
        self.seed = seed

    def align(self, source, target) -> PhraseAlignment:
        return corrupt_alignment(self.inner.align(source, target), self.fraction, self.seed)


def supervise(ex: SynthExample, vocab: Vocabulary, alignment: PhraseAlignment | None = None) -> Supervision:
    """Compile an example's (gold or given) alignment into supervision."""
    alignment = alignment if alignment is not None else ex.gold_alignment
    anchors = anchor_target_words(alignment, len(ex.target_tokens) - 1)
    return compile_step_sequence(anchors, ex.word_end_frames, ex.frames, ex.target_tokens, vocab)


# -- persistence -----------------------------------------------------------


def example_record(ex: SynthExample, lex: Lexicon, sup: Supervision | None = None) -> dict:
    vocab = lex.vocab
    sup = sup or supervise(ex, vocab)
    rec = UtteranceRecord(
        source=[lex.source_words[k] for k in ex.source_tokens],
        target=vocab.decode(ex.target_tokens),
        steps=vocab.decode(sup.steps),
        chunk_ms=ex.frames.chunk_ms,
        frames_per_chunk=ex.frames.frames_per_chunk,
        extra={
            "utt": ex.utt_id,
            "word_end_frames": list(ex.word_end_frames),
            "alignment": ex.gold_alignment.to_json(),
        },
    )
    return rec.to_json()


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _npz_bytes(arrays: dict) -> bytes:
    """An ``np.load``-readable archive with fixed timestamps, so reruns are byte-identical."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, arr in arrays.items():
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(arr))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, member.getvalue())
    return buf.getvalue()


def save_corpus(path, examples: Sequence[SynthExample], config: SynthConfig, header: dict | None = None) -> None:
    """Write ``<path>`` (JSONL) and ``<path>.frames.npz`` next to it."""
    path = Path(path)
    lex = make_lexicon(config)
    lines = [json.dumps({"header": {**(header or {}), "root_seed": config.seed, "synth_config": config.to_json()}})]
    lines += [json.dumps(example_record(ex, lex)) for ex in examples]
    _atomic_write_bytes(path.with_name(path.name + ".frames.npz"), _npz_bytes({ex.utt_id: ex.frames.frames for ex in examples}))
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def load_corpus(path) -> tuple[SynthConfig, list[SynthExample]]:
    path = Path(path)
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or "header" not in lines[0]:
        raise ValueError(f"{path}: missing corpus header")
    config = SynthConfig.from_json(lines[0]["header"]["synth_config"])
    lex = make_lexicon(config)
    src_index = {w: i for i, w in enumerate(lex.source_words)}
    with np.load(path.with_name(path.name + ".frames.npz")) as npz:
        frames = {k: npz[k] for k in npz.files}
    examples = []
    for d in lines[1:]:
        rec = UtteranceRecord.from_json(d)
        utt = rec.extra["utt"]
        examples.append(
            SynthExample(
                utt_id=utt,
                source_tokens=tuple(src_index[w] for w in rec.source),
                target_tokens=lex.vocab.encode(rec.target),
                frames=FrameStream(frames[utt], rec.frames_per_chunk, rec.chunk_ms),
                word_end_frames=tuple(rec.extra["word_end_frames"]),
                gold_alignment=PhraseAlignment.from_json(rec.extra["alignment"]),
            )
        )
    return config, examples

"""Decoder-only step model over interleaved speech chunks and text tokens.

A speech slot expands to its chunk's frames (the final chunk also carries the
end-of-audio frame); a text slot is one token embedding.  Only the output at
the last position of each slot is exposed as that step's prediction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from ..align import SPEECH, Supervision
from ..core import FrameStream, Vocabulary
from .layers import DecoderBlock, causal_mask

# A materialised slot: frames of one chunk, or a token id.
InputSlot = Union[np.ndarray, int]


@dataclass(frozen=True)
class ToyModelConfig:
    vocab_words: tuple[str, ...]
    feature_dim: int
    width: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    early_exit_layer: int | None = 2
    dropout: float = 0.1
    rope_base: float = 10000.0
    seed: int = 0

    def __post_init__(self):
        if self.early_exit_layer is not None and not 1 <= self.early_exit_layer <= self.layers:
            raise ValueError("early_exit_layer must name one of the model's layers")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(tuple(self.vocab_words))

    def to_json(self) -> dict:
        d = asdict(self)
        d["vocab_words"] = list(self.vocab_words)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ToyModelConfig":
        return cls(**{**d, "vocab_words": tuple(d["vocab_words"])})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def materialize(layout, stream: FrameStream, eoa_vector: np.ndarray) -> list[InputSlot]:
    """Turn layout slots into model inputs; the last chunk gets the EOA frame."""
    T = stream.num_chunks
    out: list[InputSlot] = []
    for slot in layout:
        if slot.kind == SPEECH:
            frames = stream.chunk(slot.index)
            if slot.index == T:
                frames = np.vstack([frames, eoa_vector[None, :]])
            out.append(frames)
        else:
            out.append(int(slot.index))
    return out


@dataclass
class PackedSequence:
    frames: np.ndarray  # (L, F)
    tokens: np.ndarray  # (L,)
    is_text: np.ndarray  # (L,)
    exposed: np.ndarray  # (n_slots,) last position of each slot
    targets: np.ndarray | None = None  # (n_slots,) step ids
    policy_targets: np.ndarray | None = None  # (n_slots,) 0 = wait, 1 = emit


def pack(slots: Sequence[InputSlot], feature_dim: int) -> PackedSequence:
    frames, tokens, is_text, exposed = [], [], [], []
    pos = 0
    for s in slots:
        if isinstance(s, (int, np.integer)):
            frames.append(np.zeros((1, feature_dim)))
            tokens.append([int(s)])
            is_text.append([True])
            pos += 1
        else:
            n = len(s)
            frames.append(np.asarray(s, dtype=np.float64))
            tokens.append([0] * n)
            is_text.append([False] * n)
            pos += n
        exposed.append(pos - 1)
    return PackedSequence(
        np.concatenate(frames),
        np.concatenate(tokens).astype(np.int64),
        np.concatenate(is_text).astype(bool),
        np.asarray(exposed, dtype=np.int64),
    )


def pack_supervision(sup: Supervision, stream: FrameStream, vocab: Vocabulary, eoa_vector: np.ndarray) -> PackedSequence:
    seq = pack(materialize(sup.input_layout, stream, eoa_vector), stream.feature_dim)
    seq.targets = np.asarray(sup.steps, dtype=np.int64)
    seq.policy_targets = (seq.targets != vocab.wait_id).astype(np.int64)
    return seq


def collate(seqs: Sequence[PackedSequence]) -> dict:
    B = len(seqs)
    L = max(len(s.tokens) for s in seqs)
    S = max(len(s.exposed) for s in seqs)
    F_ = seqs[0].frames.shape[1]
    frames = np.zeros((B, L, F_))
    tokens = np.zeros((B, L), dtype=np.int64)
    is_text = np.zeros((B, L), dtype=bool)
    exposed = np.zeros((B, S), dtype=np.int64)
    step_mask = np.zeros((B, S), dtype=bool)
    targets = np.zeros((B, S), dtype=np.int64)
    policy = np.zeros((B, S), dtype=np.int64)
    for b, s in enumerate(seqs):
        n, m = len(s.tokens), len(s.exposed)
        frames[b, :n] = s.frames
        tokens[b, :n] = s.tokens
        is_text[b, :n] = s.is_text
        exposed[b, :m] = s.exposed
        step_mask[b, :m] = True
        if s.targets is not None:
            targets[b, :m] = s.targets
            policy[b, :m] = s.policy_targets
    return {
        "frames": torch.from_numpy(frames),
        "tokens": torch.from_numpy(tokens),
        "is_text": torch.from_numpy(is_text),
        "exposed": torch.from_numpy(exposed),
        "step_mask": torch.from_numpy(step_mask),
        "targets": torch.from_numpy(targets),
        "policy_targets": torch.from_numpy(policy),
    }


class IntermixedModel(nn.Module):
    architecture = "intermixed"

    def __init__(self, config: ToyModelConfig):
        super().__init__()
        self.config = config
        self.vocab = config.vocab
        w = config.width
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.frame_proj = nn.Linear(config.feature_dim, w)
            self.token_emb = nn.Embedding(self.vocab.size, w)
            self.type_emb = nn.Embedding(2, w)
            self.blocks = nn.ModuleList(
                DecoderBlock(w, config.heads, config.mlp_ratio, rope_base=config.rope_base, dropout=config.dropout)
                for _ in range(config.layers)
            )
            self.ln_out = nn.LayerNorm(w)
            self.head = nn.Linear(w, self.vocab.size)
            if config.early_exit_layer is not None:
                self.exit_ln = nn.LayerNorm(w)
                self.exit_head = nn.Linear(w, 2)
        # end-of-audio frame: all zeros, never trained
        self.register_buffer("eoa", torch.zeros(config.feature_dim), persistent=False)
        self.eval()

    @property
    def has_early_exit(self) -> bool:
        return self.config.early_exit_layer is not None

    @property
    def eoa_vector(self) -> np.ndarray:
        return self.eoa.detach().cpu().numpy().astype(np.float64)

    def _dtype(self):
        return self.head.weight.dtype

    def embed(self, batch) -> torch.Tensor:
        dt = self._dtype()
        is_text = batch["is_text"]
        speech = self.frame_proj(batch["frames"].to(dt))
        text = self.token_emb(batch["tokens"])
        x = torch.where(is_text[..., None], text, speech)
        return x + self.type_emb(is_text.long())

    def hidden(self, batch, upto: int | None = None) -> list[torch.Tensor]:
        """States after each of the first ``upto`` layers (all layers by default)."""
        x = self.embed(batch)
        L = x.shape[1]
        mask = causal_mask(L, x.device)
        pos = torch.arange(L, device=x.device)
        states = []
        for block in self.blocks[: upto if upto is not None else len(self.blocks)]:
            x = block(x, mask, pos)
            states.append(x)
        return states

    @staticmethod
    def _gather(x, exposed):
        return torch.gather(x, 1, exposed[..., None].expand(-1, -1, x.shape[-1]))

    def step_logits_batch(self, batch) -> torch.Tensor:
        h = self.hidden(batch)[-1]
        return self.head(self.ln_out(self._gather(h, batch["exposed"])))

    def both_logits_batch(self, batch) -> tuple[torch.Tensor, torch.Tensor]:
        """Step and early-exit logits from one pass through the stack."""
        states = self.hidden(batch)
        exposed = batch["exposed"]
        step = self.head(self.ln_out(self._gather(states[-1], exposed)))
        early = states[self.config.early_exit_layer - 1]
        return step, self.exit_head(self.exit_ln(self._gather(early, exposed)))

    def exit_logits_batch(self, batch) -> torch.Tensor:
        if not self.has_early_exit:
            raise ValueError("model has no early-exit head")
        h = self.hidden(batch, upto=self.config.early_exit_layer)[-1]
        return self.exit_head(self.exit_ln(self._gather(h, batch["exposed"])))

    # -- single-prefix API used by the decoder ----------------------------

    def session(self) -> "PrefixCache":
        """Incremental evaluator for a growing layout."""
        return PrefixCache(self)

    def step_logits(self, slots: Sequence[InputSlot]) -> np.ndarray:
        if not slots:
            raise ValueError("empty layout prefix")
        cache = self.session()
        for s in slots:
            cache.push(s)
        return cache.step_logits()

    def early_exit_logits(self, slots: Sequence[InputSlot]) -> np.ndarray:
        if not self.has_early_exit:
            raise ValueError("model has no early-exit head")
        if not slots:
            raise ValueError("empty layout prefix")
        cache = self.session()
        for s in slots:
            cache.push(s)
        return cache.early_exit_logits()

    def all_step_logits(self, slots: Sequence[InputSlot]) -> np.ndarray:
        """Logits after every slot, shape (len(slots), |vocab|)."""
        cache = self.session()
        out = []
        for s in slots:
            cache.push(s)
            out.append(cache.step_logits())
        return np.stack(out)


class PrefixCache:
    """Keys and values of every layer for the slots pushed so far.

    Each slot's rows pass through each layer as one block, in slot order,
    whatever the interleaving of pushes and queries.  The logits for slot
    ``i`` therefore never depend on anything pushed after it.  Layers above
    the early-exit layer only run when the full step logits are requested.
    """

    def __init__(self, model: IntermixedModel):
        self.model = model
        n = len(model.blocks)
        self.caches: list[dict] = [{} for _ in range(n)]
        self.queues: list[list[torch.Tensor]] = [[] for _ in range(n)]
        self.done = [0] * n  # rows processed per layer
        self.last: list[torch.Tensor | None] = [None] * n
        self.n_slots = 0

    @torch.no_grad()
    def push(self, slot: InputSlot) -> None:
        m = self.model
        dt = m._dtype()
        if isinstance(slot, (int, np.integer)):
            x = m.token_emb(torch.tensor([int(slot)])) + m.type_emb.weight[1]
        else:
            frames = torch.tensor(np.asarray(slot), dtype=dt)
            if frames.ndim != 2 or frames.shape[1] != m.config.feature_dim:
                raise ValueError(f"speech slot must be (n, {m.config.feature_dim})")
            x = m.frame_proj(frames) + m.type_emb.weight[0]
        self.queues[0].append(x[None])
        self.n_slots += 1

    @torch.no_grad()
    def _advance(self, layers: int) -> None:
        if self.n_slots == 0:
            raise ValueError("empty layout prefix")
        for i in range(layers):
            block = self.model.blocks[i]
            while self.queues[i]:
                x = self.queues[i].pop(0)
                y = block.cached(x, self.done[i], self.caches[i])
                self.done[i] += x.shape[1]
                self.last[i] = y[0, -1]
                if i + 1 < len(self.queues):
                    self.queues[i + 1].append(y)

    @torch.no_grad()
    def step_logits(self) -> np.ndarray:
        m = self.model
        self._advance(len(m.blocks))
        return m.head(m.ln_out(self.last[-1])).double().numpy()

    @torch.no_grad()
    def early_exit_logits(self) -> np.ndarray:
        m = self.model
        if not m.has_early_exit:
            raise ValueError("model has no early-exit head")
        k = m.config.early_exit_layer
        self._advance(k)
        return m.exit_head(m.exit_ln(self.last[k - 1])).double().numpy()


def forward_step(model: IntermixedModel, slots: Sequence[InputSlot]) -> np.ndarray:
    """Logits over the augmented vocabulary for the step after ``slots``."""
    return model.step_logits(slots)


def early_exit_logits(model: IntermixedModel, slots: Sequence[InputSlot]) -> np.ndarray:
    """(wait, emit) logits from the early layer only."""
    return model.early_exit_logits(slots)

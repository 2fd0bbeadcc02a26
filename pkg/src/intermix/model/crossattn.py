"""Encoder-decoder baseline: text decoder cross-attending to chunk encodings.

The encoder sees one vector per chunk (its frames concatenated and projected)
under a causal mask, so chunk ``t``'s encoding depends on chunks ``<= t`` only.
Each decoder position carries the number of encoder positions it may attend
to; in wait-k training position ``u`` (1-based) sees chunks ``<= k + u``.
Once the stream has ended, an untrained random end-of-audio vector is
appended as one more encoder position.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from ..core import FrameStream, Vocabulary
from .layers import DecoderBlock, causal_mask
from .losses import sequence_nll

MASK_POLICIES = ("offline", "wait_k")


@dataclass(frozen=True)
class CrossAttnConfig:
    vocab_words: tuple[str, ...]
    feature_dim: int
    frames_per_chunk: int = 8
    width: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    mask_policy: str = "offline"
    k: int = 1
    dropout: float = 0.1
    rope_base: float = 10000.0
    seed: int = 0

    def __post_init__(self):
        if self.mask_policy not in MASK_POLICIES:
            raise ValueError(f"mask_policy must be one of {MASK_POLICIES}")
        if self.k < 0:
            raise ValueError("k must be >= 0")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(tuple(self.vocab_words))

    def to_json(self) -> dict:
        d = asdict(self)
        d["vocab_words"] = list(self.vocab_words)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CrossAttnConfig":
        return cls(**{**d, "vocab_words": tuple(d["vocab_words"])})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def chunk_matrix(stream: FrameStream) -> np.ndarray:
    """(T, frames_per_chunk * F); a short final chunk is zero-padded."""
    fpc, F_ = stream.frames_per_chunk, stream.feature_dim
    out = np.zeros((stream.num_chunks, fpc * F_))
    for c in range(1, stream.num_chunks + 1):
        ch = stream.chunk(c)
        out[c - 1, : ch.size] = ch.reshape(-1)
    return out


def visible_keys(u: int, T: int, mask_policy: str, k: int) -> int:
    """Encoder positions visible to decoder position ``u`` (1-based) in training."""
    if mask_policy == "offline" or k + u >= T:
        return T + 1
    return k + u


@dataclass
class CrossAttnItem:
    chunks: np.ndarray  # (T, fpc*F)
    targets: np.ndarray  # (U,) including <EOS>
    visible: np.ndarray  # (U,) visible encoder positions per decoder position


def make_item(stream: FrameStream, target: Sequence[int], config: CrossAttnConfig) -> CrossAttnItem:
    T = stream.num_chunks
    vis = [visible_keys(u, T, config.mask_policy, config.k) for u in range(1, len(target) + 1)]
    return CrossAttnItem(chunk_matrix(stream), np.asarray(target, dtype=np.int64), np.asarray(vis, dtype=np.int64))


class CrossAttentionModel(nn.Module):
    architecture = "cross_attention"
    has_early_exit = False

    def __init__(self, config: CrossAttnConfig):
        super().__init__()
        self.config = config
        self.vocab = config.vocab
        w = config.width
        d_in = config.frames_per_chunk * config.feature_dim
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.chunk_proj = nn.Linear(d_in, w)
            self.enc_blocks = nn.ModuleList(
                DecoderBlock(w, config.heads, config.mlp_ratio, rope_base=config.rope_base, dropout=config.dropout)
                for _ in range(config.enc_layers)
            )
            self.ln_enc = nn.LayerNorm(w)
            self.token_emb = nn.Embedding(self.vocab.size + 1, w)
            self.dec_blocks = nn.ModuleList(
                DecoderBlock(w, config.heads, config.mlp_ratio, cross=True, rope_base=config.rope_base, dropout=config.dropout)
                for _ in range(config.dec_layers)
            )
            self.ln_out = nn.LayerNorm(w)
            self.head = nn.Linear(w, self.vocab.size)
            eoa = torch.randn(d_in)
        # saved with the checkpoint, never trained
        self.register_buffer("eoa", eoa)
        self.eval()

    @property
    def bos_id(self) -> int:
        return self.vocab.size

    def collate(self, items: Sequence[CrossAttnItem]) -> dict:
        B = len(items)
        K = max(len(it.chunks) for it in items) + 1
        U = max(len(it.targets) for it in items)
        d_in = items[0].chunks.shape[1]
        eoa = self.eoa.detach().double().numpy()
        chunks = np.zeros((B, K, d_in))
        enc_valid = np.zeros((B, K), dtype=bool)
        dec_in = np.zeros((B, U), dtype=np.int64)
        targets = np.zeros((B, U), dtype=np.int64)
        tmask = np.zeros((B, U), dtype=bool)
        cross = np.zeros((B, U, K), dtype=bool)
        for b, it in enumerate(items):
            T, n = len(it.chunks), len(it.targets)
            chunks[b, :T] = it.chunks
            chunks[b, T] = eoa
            enc_valid[b, : T + 1] = True
            dec_in[b, 0] = self.bos_id
            dec_in[b, 1:n] = it.targets[:-1]
            targets[b, :n] = it.targets
            tmask[b, :n] = True
            for u in range(n):
                cross[b, u, : it.visible[u]] = True
            # padded decoder rows still need one key to stay finite
            cross[b, n:, 0] = True
        return {
            "chunks": torch.from_numpy(chunks),
            "enc_valid": torch.from_numpy(enc_valid),
            "dec_in": torch.from_numpy(dec_in),
            "targets": torch.from_numpy(targets),
            "step_mask": torch.from_numpy(tmask),
            "cross_mask": torch.from_numpy(cross),
        }

    def forward(self, batch, probs_out: list | None = None) -> torch.Tensor:
        dt = self.head.weight.dtype
        x = self.chunk_proj(batch["chunks"].to(dt))
        K = x.shape[1]
        enc_mask = causal_mask(K)[None, None] & batch["enc_valid"][:, None, None, :]
        kpos = torch.arange(K)
        for blk in self.enc_blocks:
            x = blk(x, enc_mask, kpos)
        memory = self.ln_enc(x)

        y = self.token_emb(batch["dec_in"])
        U = y.shape[1]
        dmask = causal_mask(U)
        upos = torch.arange(U)
        cmask = batch["cross_mask"][:, None]
        for blk in self.dec_blocks:
            y = blk(y, dmask, upos, memory=memory, cross_mask=cmask, probs_out=probs_out)
        return self.head(self.ln_out(y))

    @torch.no_grad()
    def next_logits(self, chunks: np.ndarray, flushing: bool, prefix: Sequence[int], visible: Sequence[int]):
        """Logits for the token after ``prefix`` and the last row's cross-attention.

        ``chunks`` holds the heard chunk rows; ``visible[j]`` is the number of
        encoder positions decoder position ``j`` may attend to (the last entry
        is for the position being predicted).  Attention comes back as
        (layers, heads, keys).
        """
        enc = np.asarray(chunks, dtype=np.float64)
        if flushing:
            enc = np.vstack([enc, self.eoa.detach().double().numpy()[None]])
        K, U = len(enc), len(prefix) + 1
        if len(visible) != U or max(visible) > K or min(visible) < 1:
            raise ValueError("visible counts must cover every decoder position and stay in range")
        dec_in = np.array([self.bos_id, *prefix], dtype=np.int64)
        cross = np.zeros((1, U, K), dtype=bool)
        for j, n in enumerate(visible):
            cross[0, j, :n] = True
        batch = {
            "chunks": torch.from_numpy(enc[None]),
            "enc_valid": torch.ones(1, K, dtype=torch.bool),
            "dec_in": torch.from_numpy(dec_in[None]),
            "cross_mask": torch.from_numpy(cross),
        }
        probs: list = []
        logits = self.forward(batch, probs_out=probs)
        attn = torch.stack([p[0, :, -1, :] for p in probs]).double().numpy()
        return logits[0, -1].double().numpy(), attn


def cross_attention_loss(model: CrossAttentionModel, batch) -> torch.Tensor:
    logits = model(batch)
    return sequence_nll(logits, batch["targets"], batch["step_mask"].to(logits.dtype))


def cross_attention_peak(attn: np.ndarray, heard: int) -> int:
    """1-based chunk with the most layer/head-averaged attention among the heard ones.

    Ties go to the earliest chunk.
    """
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim == 1:
        attn = attn[None, None]
    if not 1 <= heard <= attn.shape[-1]:
        raise IndexError(f"heard={heard} outside 1..{attn.shape[-1]}")
    avg = attn.reshape(-1, attn.shape[-1]).mean(axis=0)[:heard]
    return int(np.argmax(avg)) + 1

"""Small pre-norm transformer pieces with rotary position encoding."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def rotate(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    """Apply rotary encoding to ``x`` of shape (B, H, L, D) at ``positions`` (L,)."""
    half = x.shape[-1] // 2
    freqs = base ** (-torch.arange(half, dtype=x.dtype, device=x.device) / half)
    ang = positions.to(x.dtype)[:, None] * freqs[None, :]
    cos, sin = ang.cos(), ang.sin()
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int, rope_base: float | None = 10000.0):
        super().__init__()
        if width % heads or (width // heads) % 2:
            raise ValueError("width must split into heads of even size")
        self.heads = heads
        self.head_dim = width // heads
        self.rope_base = rope_base
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.o = nn.Linear(width, width)

    def _split(self, x):
        B, L, _ = x.shape
        return x.view(B, L, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, mask, memory=None, q_pos=None, k_pos=None, return_probs=False):
        """``mask`` is boolean, broadcastable to (B, H, Lq, Lk); True = may attend."""
        kv = x if memory is None else memory
        q, k, v = self._split(self.q(x)), self._split(self.k(kv)), self._split(self.v(kv))
        if self.rope_base is not None:
            q = rotate(q, q_pos, self.rope_base)
            k = rotate(k, k_pos, self.rope_base)
        if not return_probs:
            # fused kernel; every row must see at least one key
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
            return self.o(out.transpose(1, 2).reshape(x.shape[0], x.shape[1], -1))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask, float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        # rows with nothing visible (padding) would be NaN
        probs = torch.nan_to_num(probs, nan=0.0)
        out = (probs @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.o(out), probs

    def cached(self, x, start: int, cache: dict):
        """Attend new rows ``x`` (positions ``start..``) to themselves and to ``cache``.

        ``cache`` holds the rotated keys and values of earlier rows and is
        extended in place.
        """
        r = x.shape[1]
        pos = torch.arange(start, start + r)
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        if self.rope_base is not None:
            q = rotate(q, pos, self.rope_base)
            k = rotate(k, pos, self.rope_base)
        if "k" in cache:
            k = torch.cat([cache["k"], k], dim=2)
            v = torch.cat([cache["v"], v], dim=2)
        cache["k"], cache["v"] = k, v
        mask = torch.arange(start + r)[None, :] <= pos[:, None]
        scores = (q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)).masked_fill(~mask, float("-inf"))
        out = (torch.softmax(scores, dim=-1) @ v).transpose(1, 2).reshape(1, r, -1)
        return self.o(out)


class MLP(nn.Module):
    def __init__(self, width: int, ratio: int):
        super().__init__()
        self.up = nn.Linear(width, ratio * width)
        self.down = nn.Linear(ratio * width, width)

    def forward(self, x):
        return self.down(F.gelu(self.up(x)))


class DecoderBlock(nn.Module):
    """Self-attention block, optionally followed by cross-attention."""

    def __init__(
        self, width: int, heads: int, mlp_ratio: int = 4, cross: bool = False, rope_base: float = 10000.0, dropout: float = 0.0
    ):
        super().__init__()
        self.drop = nn.Dropout(dropout)
        self.ln_self = nn.LayerNorm(width)
        self.self_attn = Attention(width, heads, rope_base)
        self.cross = cross
        if cross:
            self.ln_cross = nn.LayerNorm(width)
            # keys are chunk positions, queries token positions: no shared clock
            self.cross_attn = Attention(width, heads, rope_base=None)
        self.ln_mlp = nn.LayerNorm(width)
        self.mlp = MLP(width, mlp_ratio)

    def forward(self, x, mask, pos, memory=None, cross_mask=None, probs_out=None):
        x = x + self.drop(self.self_attn(self.ln_self(x), mask, q_pos=pos, k_pos=pos))
        if self.cross:
            out, probs = self.cross_attn(self.ln_cross(x), cross_mask, memory=memory, return_probs=True)
            if probs_out is not None:
                probs_out.append(probs)
            x = x + self.drop(out)
        return x + self.drop(self.mlp(self.ln_mlp(x)))

    def cached(self, x, start: int, cache: dict):
        """Self-attention block over new rows, reusing earlier rows' keys and values."""
        if self.cross:
            raise NotImplementedError("cached evaluation is for self-attention blocks")
        x = x + self.self_attn.cached(self.ln_self(x), start, cache)
        return x + self.mlp(self.ln_mlp(x))


def causal_mask(L: int, device=None) -> torch.Tensor:
    return torch.ones(L, L, dtype=torch.bool, device=device).tril()

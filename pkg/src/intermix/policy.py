"""Wait policies: fixed wait-k, AlignAtt, and the penalties of the learned ones.

Decisions are the strings ``"W"`` (wait for another chunk) and ``"E"`` (emit).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

WAIT = "W"
EMIT = "E"

POLICY_NAMES = ("wait_k", "alignatt", "intermixed", "intermixed+early_exit", "offline")


@dataclass(frozen=True)
class PenaltyConfig:
    kappa: float = 0.0
    nu: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.kappa) and math.isfinite(self.nu)):
            raise ValueError("penalties must be finite")


@dataclass(frozen=True)
class PolicyConfig:
    """A named policy and its parameters, as selected on the command line."""

    name: str = "intermixed"
    kappa: float = 0.0
    nu: float = 0.0
    k: int = 1
    f: int = 8

    def __post_init__(self):
        if self.name not in POLICY_NAMES:
            raise ValueError(f"unknown policy {self.name!r}; choose from {POLICY_NAMES}")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.f < 1:
            raise ValueError("f must be >= 1")
        PenaltyConfig(self.kappa, self.nu)

    @property
    def parameter(self) -> float:
        """The swept parameter of this policy, for report rows."""
        return {
            "wait_k": self.k,
            "alignatt": self.f,
            "intermixed": self.kappa,
            "intermixed+early_exit": self.nu,
            "offline": 0,
        }[self.name]


def wait_k_decision(t: int, u: int, k: int) -> str:
    """Emit iff more than ``k + u`` chunks have been heard."""
    return EMIT if t > k + u else WAIT


def alignatt_decision(peak: int, heard: int, f: int) -> str:
    """Wait while the attention peak lies within the last ``f`` heard chunks."""
    return WAIT if peak > heard - f else EMIT


def apply_wait_penalty(logits: np.ndarray, kappa: float, wait_id: int) -> np.ndarray:
    out = np.array(logits, dtype=np.float64, copy=True)
    out[wait_id] -= kappa
    return out


def early_exit_decision(logits, nu: float) -> str:
    """``logits`` is ``(wait, emit)``; ties go to emit so the step model decides."""
    return WAIT if logits[0] - nu > logits[1] else EMIT


def greedy_token(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest id among ties
    return int(np.argmax(logits))


def greedy_text_token(logits: np.ndarray, wait_id: int) -> int:
    masked = np.array(logits, dtype=np.float64, copy=True)
    masked[wait_id] = -np.inf
    return int(np.argmax(masked))

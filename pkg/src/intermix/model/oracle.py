"""A scripted step model that replays a gold step sequence.

Given a prefix that has heard ``t`` chunks and emitted ``u`` words, it puts
its mass on gold word ``u + 1`` when that word's gold chunk is ``<= t`` and on
``W`` otherwise.  Extra forced waits therefore never change the next word.
When it wants to wait, the pending gold word is its runner-up, so a policy
that forces emission still gets the gold word.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..core import Vocabulary, emit_chunks_of, words_of

TOP = 0.0
RUNNER_UP = -1e3
REST = -1e4

# (heard chunks, emitted words, gold word pending?) -> (wait logit, emit logit)
ExitHead = Callable[[int, int, bool], tuple[float, float]]


class ScriptedOracle:
    architecture = "intermixed"

    def __init__(self, gold: Sequence[int], vocab: Vocabulary, exit_head: ExitHead | None = None, feature_dim: int = 1):
        self.vocab = vocab
        self.gold = tuple(gold)
        self.words = words_of(gold, vocab)
        self.emit_chunks = emit_chunks_of(gold, vocab)
        self.exit_head = exit_head
        self.eoa_vector = np.zeros(feature_dim)

    @property
    def has_early_exit(self) -> bool:
        return self.exit_head is not None

    @staticmethod
    def _state(slots) -> tuple[int, int]:
        heard = sum(1 for s in slots if not isinstance(s, (int, np.integer)))
        emitted = len(slots) - heard
        return heard, emitted

    def _pending(self, t: int, u: int) -> bool:
        return u < len(self.words) and self.emit_chunks[u] <= t

    def step_logits(self, slots) -> np.ndarray:
        t, u = self._state(slots)
        logits = np.full(self.vocab.size, REST)
        if self._pending(t, u):
            logits[self.words[u]] = TOP
        else:
            logits[self.vocab.wait_id] = TOP
            if u < len(self.words):
                logits[self.words[u]] = RUNNER_UP
        return logits

    def early_exit_logits(self, slots) -> np.ndarray:
        if self.exit_head is None:
            raise ValueError("oracle has no early-exit head")
        t, u = self._state(slots)
        return np.asarray(self.exit_head(t, u, self._pending(t, u)), dtype=np.float64)


def absorbing_exit_head(margin: float = 1.0) -> ExitHead:
    """Agrees with the oracle: wait exactly when no gold word is pending."""
    return lambda t, u, pending: (-margin, 0.0) if pending else (margin, 0.0)


def scheduled_exit_head(wait_chunks: set[int], margin: float = 1.0) -> ExitHead:
    """Says wait at the listed chunks and emit everywhere else."""
    return lambda t, u, pending: (margin, 0.0) if t in wait_chunks else (-margin, 0.0)


def random_exit_head(seed: int, max_chunks: int = 512, scale: float = 1.5) -> ExitHead:
    """Seeded noisy head whose logits depend on the chunk and on pending-ness only.

    Pending states lean towards emit and idle states towards wait.
    """
    rng = np.random.default_rng([seed, 0xEE])
    pending_w = rng.normal(-0.5, scale, size=max_chunks + 1)
    idle_w = rng.normal(0.5, scale, size=max_chunks + 1)
    return lambda t, u, pending: (float(pending_w[t] if pending else idle_w[t]), 0.0)

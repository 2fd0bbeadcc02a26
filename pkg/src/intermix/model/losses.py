"""Cross-entropy objectives for the step models."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def sequence_nll(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor, smoothing: float = 0.0) -> torch.Tensor:
    """Summed ``-log softmax(logits)[target]`` over masked-in positions.

    With ``smoothing`` > 0 the target distribution puts that much mass uniformly
    over the vocabulary, which keeps the logit margins finite.
    """
    logp = F.log_softmax(logits, dim=-1)
    picked = torch.gather(logp, -1, targets[..., None])[..., 0]
    if smoothing:
        picked = (1 - smoothing) * picked + smoothing * logp.mean(-1)
    return -(picked * mask).sum()


def step_sequence_loss(model, batch, smoothing: float = 0.0) -> torch.Tensor:
    logits = model.step_logits_batch(batch)
    return sequence_nll(logits, batch["targets"], batch["step_mask"].to(logits.dtype), smoothing)


def multitask_loss(model, batch, policy_weight: float = 1.0, smoothing: float = 0.0) -> torch.Tensor:
    """Step-sequence loss plus the early-exit head's wait/emit cross-entropy."""
    if not model.has_early_exit:
        raise ValueError("multitask loss needs an early-exit head")
    step_logits, exit_logits = model.both_logits_batch(batch)
    mask = batch["step_mask"].to(step_logits.dtype)
    loss = sequence_nll(step_logits, batch["targets"], mask, smoothing)
    if policy_weight:
        loss = loss + policy_weight * sequence_nll(exit_logits, batch["policy_targets"], mask)
    return loss


def decompose_step_nll(log_probs: np.ndarray, target: int, wait_id: int) -> tuple[float, float]:
    """Split ``-log p(target)`` into a wait-policy part and a token part.

    With ``pi(W) = p(W)``, ``pi(E) = 1 - p(W)`` and ``d'(w) = p(w) / pi(E)``,
    returns ``(-log pi(theta), -log d'(w))``, the second being 0 for a wait.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if target == wait_id:
        return -float(log_probs[wait_id]), 0.0
    others = np.delete(log_probs, wait_id)
    m = others.max()
    log_emit = m + np.log(np.exp(others - m).sum())
    return -float(log_emit), -float(log_probs[target] - log_emit)


def grad(model, loss_fn, batch) -> dict[str, torch.Tensor]:
    """Exact reverse-mode gradient of ``loss_fn(model, batch)`` per parameter."""
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model, batch)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(params.items(), grads)
    }

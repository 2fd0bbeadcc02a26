"""Seeded, deterministic training loop and checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .crossattn import CrossAttentionModel, CrossAttnConfig
from .intermixed import IntermixedModel, ToyModelConfig, collate

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 100
    betas: tuple[float, float] = (0.9, 0.98)
    clip: float = 1.0
    weight_decay: float = 0.01
    # std of Gaussian noise added to input frames each iteration
    frame_noise: float = 0.15
    # mass spread uniformly over the vocabulary in the step-model targets
    label_smoothing: float = 0.0
    # batches are drawn from pools of this many batches sorted by length (0: plain shuffling)
    bucket_batches: int = 16
    policy_weight: float = 1.0
    seed: int = 0
    log_every: int = 200

    def to_json(self) -> dict:
        return asdict(self)


def set_deterministic() -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def _length(item) -> int:
    rows = getattr(item, "frames", None)
    return len(rows if rows is not None else item.chunks)


def batches(n_items: int, config: TrainConfig, rng: np.random.Generator, lengths: Sequence[int] | None = None):
    """Endless stream of index batches, each pass a fresh permutation.

    With bucketing, every pool of ``bucket_batches`` batches is sorted by
    length before it is cut, so batches carry little padding; batch order is
    shuffled again afterwards.
    """
    bs = min(config.batch_size, n_items)
    pool = bs * max(1, config.bucket_batches)
    while True:
        order = rng.permutation(n_items)
        out = []
        for s in range(0, n_items - bs + 1, pool):
            part = order[s : s + pool]
            if config.bucket_batches and lengths is not None:
                part = sorted(part, key=lambda i: (lengths[i], i))
            out += [np.asarray(part[j : j + bs]) for j in range(0, len(part) - bs + 1, bs)]
        for i in rng.permutation(len(out)):
            yield out[i]


def train(
    model: torch.nn.Module,
    items: Sequence,
    config: TrainConfig,
    loss_fn: Callable,
    collate_fn: Callable | None = None,
) -> list[float]:
    """AdamW with linear warm-up and cosine decay; loss is averaged per step.

    Returns the per-iteration mean losses.  Raises ``NumericError`` on a
    non-finite loss.
    """
    if not items:
        raise ValueError("no training items")
    set_deterministic()
    collate_fn = collate_fn or collate
    rng = np.random.default_rng([config.seed, 0x7A1])
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, betas=config.betas, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)

    def schedule(step):
        if step < config.warmup:
            return (step + 1) / config.warmup
        frac = (step - config.warmup) / max(1, config.steps - config.warmup)
        return 0.5 * (1 + math.cos(math.pi * min(frac, 1.0)))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, schedule)
    stream = batches(len(items), config, rng, [_length(it) for it in items])
    history = []
    # dropout draws from the global generator; keep it seeded and restore it afterwards
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model.train()
        for step in range(config.steps):
            idx = next(stream)
            batch = collate_fn([items[i] for i in idx])
            if config.frame_noise:
                key = "frames" if "frames" in batch else "chunks"
                noise = torch.randn(batch[key].shape, generator=gen, dtype=batch[key].dtype)
                batch[key] = batch[key] + config.frame_noise * noise
            n_steps = batch["step_mask"].sum()
            loss = loss_fn(model, batch) / n_steps
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at iteration {step}: {loss.item()}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip)
            opt.step()
            sched.step()
            history.append(loss.item())
            if config.log_every and (step + 1) % config.log_every == 0:
                log.info("iteration %d loss %.4f", step + 1, float(np.mean(history[-config.log_every:])))
    model.eval()
    return history


# -- checkpoints ----------------------------------------------------------

_KINDS = {"intermixed": (IntermixedModel, ToyModelConfig), "cross_attention": (CrossAttentionModel, CrossAttnConfig)}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, extra: dict | None = None) -> None:
    """Single-file checkpoint: config, config hash, parameter shapes, weights."""
    path = Path(path)
    payload = {
        "kind": model.architecture,
        "config": model.config.to_json(),
        "config_hash": model.config.digest(),
        "shapes": {k: list(v.shape) for k, v in model.state_dict().items()},
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path, expected_hash: str | None = None):
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except Exception as exc:  # unreadable or truncated file
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    try:
        cls, cfg_cls = _KINDS[payload["kind"]]
        config = cfg_cls.from_json(payload["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    if config.digest() != payload["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its hash")
    if expected_hash is not None and expected_hash != payload["config_hash"]:
        raise CheckpointError(f"{path}: config hash {payload['config_hash'][:12]} != expected {expected_hash[:12]}")
    model = cls(config)
    shapes = {k: list(v.shape) for k, v in model.state_dict().items()}
    if shapes != payload["shapes"]:
        raise CheckpointError(f"{path}: parameter shapes do not match the config")
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})


def parameter_digest(model) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def describe(model) -> str:
    n = sum(p.numel() for p in model.parameters())
    return json.dumps({"kind": model.architecture, "parameters": n})

"""Behavioral cloning of the base policy on expert action tokens."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .policy import TinyVlaPolicy, make_batch
from .world import PAD, Episode

log = logging.getLogger(__name__)


class AccuracyGateError(RuntimeError):
    """The trained base policy does not reproduce its training behavior well enough."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 32
    warmup_frac: float = 0.05
    min_lr_frac: float = 0.1
    clip_norm: float = 1.0
    gate: float = 0.95
    seed: int = 42

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr must be positive and batch_size >= 1")
        if not 0 <= self.gate <= 1:
            raise ValueError("gate must lie in [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    """Linear warmup followed by cosine decay to ``min_lr_frac * lr``."""
    warm = max(1, int(round(cfg.warmup_frac * total)))
    if step <= warm:
        return cfg.lr * step / warm
    frac = (step - warm) / max(1, total - warm)
    return cfg.lr * (cfg.min_lr_frac + (1 - cfg.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac)))


def token_accuracy(policy: TinyVlaPolicy, episodes: Sequence[Episode], batch_size: int = 128) -> float:
    hits = total = 0
    was, policy.training = policy.training, False
    try:
        for i in range(0, len(episodes), batch_size):
            b = make_batch(episodes[i : i + batch_size], policy.cfg)
            pred = policy.forward_batch(b)["logits"].data.argmax(-1)
            m = b.mask
            hits += int(((pred == b.targets) & m).sum())
            total += int(m.sum())
    finally:
        policy.training = was
    if total == 0:
        raise ValueError("token accuracy over an empty episode set")
    return hits / total


def train_base(policy: TinyVlaPolicy, episodes: Sequence[Episode], cfg: TrainConfig = TrainConfig(),
               progress=None) -> list[float]:
    """Fit ``policy`` in place with teacher-forced CE; returns the per-epoch mean loss."""
    cfg.validate()
    if not episodes:
        raise ValueError("no training episodes")
    P = policy.params
    paths = policy.base_paths()
    P.set_trainable(paths)
    state = tc.AdamState()
    rng = np.random.default_rng(cfg.seed)
    per_epoch = -(-len(episodes) // cfg.batch_size)
    total = cfg.epochs * per_epoch
    step = 0
    history = []
    policy.training = True
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(episodes))
            losses = []
            for i in range(0, len(order), cfg.batch_size):
                batch = make_batch([episodes[j] for j in order[i : i + cfg.batch_size]], policy.cfg)
                loss = tc.cross_entropy_logits(policy.forward_batch(batch)["logits"], batch.targets, PAD)
                tc.backward(loss)
                tc.clip_grad_norm(P, paths, cfg.clip_norm)
                step += 1
                tc.adam_step(P, state, lr_at(step, total, cfg), paths)
                P.zero_grad()
                losses.append(float(loss.data))
            history.append(float(np.mean(losses)))
            log.info("epoch %d loss %.4f", epoch + 1, history[-1])
            if progress is not None:
                progress(epoch + 1, history[-1])
    finally:
        policy.training = False
        P.set_trainable([])
    return history

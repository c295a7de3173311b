"""Optimizer, learning-rate schedules, gradient clipping, and the epoch loop.

Two schedules: a uniform 0.98-per-epoch decay, and cosine-with-restarts
stepped per batch after a linear warmup. Training is teacher-forced
cross-entropy with Adam; a divergence guard aborts when the loss exceeds
the configured threshold or stops being finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .attention import padding_mask
from .errors import ConfigError, DataError, DivergenceError
from .model import ModelConfig, ModelParams, _act_encode_batch, _decode_batch, _encode_batch, build, save_checkpoint
from .numerics import Tensor, backward, cross_entropy_masked, no_grad, tmean

DECAY_FACTOR = 0.98


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr0: float = 1e-4
    schedule: str = "decay_0.98"  # or "cosine_restarts"
    warmup_steps: int = 400
    restart_period: int = 1000
    epochs: int = 1
    seed: int = 0
    grad_clip_norm: float = 1.0
    divergence_threshold: float = 20.0
    max_len: int = 20
    metrics_path: str | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.schedule not in ("decay_0.98", "cosine_restarts"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")


@dataclass
class OptState:
    """Adam moment accumulators, keyed like the parameter dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    token_acc: float
    lr: float

    def csv_row(self) -> str:
        return f"{self.epoch},{self.loss:.6f},{self.token_acc:.6f},{self.lr:.8e}"


def lr_decay(lr0: float, epoch: int) -> float:
    """Uniformly reducing rate: lr0 * 0.98^epoch."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return lr0 * DECAY_FACTOR**epoch


def lr_cosine_restarts(lr0: float, step: int, warmup_steps: int, period: int) -> float:
    """Linear ramp to lr0 over the warmup, then a cosine that restarts every
    ``period`` steps."""
    if period < 1:
        raise ConfigError("period must be >= 1")
    if warmup_steps > 0 and step < warmup_steps:
        return lr0 * (step + 1) / warmup_steps
    phase = (step - warmup_steps) % period
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * phase / period))


def schedule_lr(cfg: TrainConfig, epoch: int, step: int) -> float:
    if cfg.schedule == "decay_0.98":
        return lr_decay(cfg.lr0, epoch)
    return lr_cosine_restarts(cfg.lr0, step, cfg.warmup_steps, cfg.restart_period)


def clip_grad_norm(grads: dict, max_norm: float) -> dict:
    """Scale all gradients by max_norm/g when the global L2 norm g exceeds
    max_norm; direction is preserved."""
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return grads


def adam_step(
    params: dict,
    grads: dict,
    state: OptState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter {name!r}", step=t)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m[:] = beta1 * m + (1.0 - beta1) * g
        v[:] = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data[:] = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def batch_loss(params: ModelParams, batch: corpus_mod.CaptionBatch, train: bool = False, rng=None):
    """Teacher-forced loss on one batch, plus the ponder penalty when
    adaptive halting is on. Returns (loss tensor, logits tensor)."""
    config = params.config
    enc_mask = padding_mask(batch.feature_lengths, batch.features.shape[1])
    x = Tensor(batch.features)
    if config.act is not None:
        memory, ponder, _ = _act_encode_batch(x, params, enc_mask, train, rng)
    else:
        memory, ponder = _encode_batch(x, params, enc_mask, train, rng), None
    logits = _decode_batch(batch.dec_input, memory, params, enc_mask, train, rng)
    loss = cross_entropy_masked(logits, batch.target, corpus_mod.PAD)
    if ponder is not None:
        loss = loss + tmean(ponder) * config.act.ponder_weight
    return loss, logits


def token_accuracy(logits, target: np.ndarray) -> tuple:
    """(correct, total) over non-pad target positions, teacher-forced."""
    mask = target != corpus_mod.PAD
    pred = logits.data.argmax(axis=-1)
    return int((pred[mask] == target[mask]).sum()), int(mask.sum())


def train(records, vocab, model_config: ModelConfig, cfg: TrainConfig):
    """Run the training loop; returns (best params, per-epoch metrics).

    Checkpoint selection tracks validation loss when a val split exists,
    else training loss. Deterministic: (seed, data, config) fixes every
    batch order, dropout mask, and parameter bit.
    """
    train_records = [r for r in records if r.split == "train"]
    val_records = [r for r in records if r.split == "val"]
    if not train_records:
        raise DataError("no records in the train split")
    features = corpus_mod.load_features_for(train_records + val_records)

    params = build(model_config, cfg.seed)
    name_of = {id(t): name for name, t in params.tensors.items()}
    opt = OptState()
    batch_rng = np.random.default_rng([cfg.seed, 2])
    drop_rng = np.random.default_rng([cfg.seed, 3])

    metrics = []
    best_loss = math.inf
    best = params.copy()
    metrics_file = open(cfg.metrics_path, "w", encoding="utf-8") if cfg.metrics_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            batches = corpus_mod.make_batches(train_records, vocab, cfg.batch_size, cfg.max_len, batch_rng, features)
            epoch_loss = 0.0
            correct = total = 0
            lr = schedule_lr(cfg, epoch, step)
            for batch in batches:
                lr = schedule_lr(cfg, epoch, step)
                loss, logits = batch_loss(params, batch, train=True, rng=drop_rng)
                loss_val = loss.item()
                if not math.isfinite(loss_val) or loss_val > cfg.divergence_threshold:
                    raise DivergenceError(
                        f"loss {loss_val} at epoch {epoch}, step {step} exceeded the divergence guard",
                        epoch=epoch,
                        step=step,
                    )
                grads = {name_of[id(t)]: g for t, g in backward(loss).items() if id(t) in name_of}
                clip_grad_norm(grads, cfg.grad_clip_norm)
                adam_step(params.tensors, grads, opt, lr)
                c, n = token_accuracy(logits, batch.target)
                correct += c
                total += n
                epoch_loss += loss_val * len(batch)
                step += 1
            epoch_loss /= len(train_records)
            row = EpochMetrics(epoch=epoch, loss=epoch_loss, token_acc=correct / max(total, 1), lr=lr)
            metrics.append(row)
            if metrics_file:
                metrics_file.write(row.csv_row() + "\n")

            monitor = _validation_loss(params, val_records, vocab, cfg, features) if val_records else epoch_loss
            if monitor < best_loss:
                best_loss = monitor
                best = params.copy()
    finally:
        if metrics_file:
            metrics_file.close()

    if cfg.checkpoint_path:
        Path(cfg.checkpoint_path).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(cfg.checkpoint_path, best)
    return best, metrics


def _validation_loss(params, val_records, vocab, cfg: TrainConfig, features) -> float:
    rng = np.random.default_rng([cfg.seed, 4])
    total = 0.0
    with no_grad():
        for batch in corpus_mod.make_batches(val_records, vocab, cfg.batch_size, cfg.max_len, rng, features):
            loss, _ = batch_loss(params, batch)
            total += loss.item() * len(batch)
    return total / len(val_records)

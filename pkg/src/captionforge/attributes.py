"""Frame-attention attribute head: pool a feature sequence, predict the
k most frequent corpus words as independent binary labels.

Two pooling readings are provided. ``elementwise`` softmaxes each feature
dimension across frames (the literal formula); ``scored`` learns a scalar
score per frame and softmaxes over frames (the conventional alternative).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .numerics import (
    Tensor,
    backward,
    bce_with_logits,
    matmul,
    no_grad,
    reshape,
    sigmoid,
    softmax_lastdim,
    transpose,
    tsum,
)
from .training import OptState, adam_step

POOL_MODES = ("elementwise", "scored")

# function words excluded from attribute-label selection (the raw top-k
# would otherwise be articles and copulas); disable with stoplist=()
DEFAULT_STOPLIST = ("a", "the", "is", "in", "on", "of", "to", "and")


def select_frequent_words(records, k: int = 10, stoplist=DEFAULT_STOPLIST) -> list:
    """Top-k corpus tokens by frequency after the stoplist; deterministic
    lexicographic tie-break."""
    if not records:
        raise DataError("empty corpus")
    stop = set(stoplist)
    counts = Counter()
    for r in records:
        for caption in r.captions:
            counts.update(t for t in caption if t not in stop)
    if len(counts) < k:
        raise DataError(f"only {len(counts)} eligible tokens, need {k}")
    return sorted(counts, key=lambda t: (-counts[t], t))[:k]


@dataclass
class AttributeHead:
    """Pooling mode plus the final affine layer mapping d -> k labels."""

    labels: list
    w: Tensor  # [d, k]
    b: Tensor  # [k]
    mode: str = "elementwise"
    score_w: Tensor | None = None  # [d, 1], scored mode only

    def __post_init__(self):
        if self.mode not in POOL_MODES:
            raise ConfigError(f"unknown pooling mode {self.mode!r}")
        if len(set(self.labels)) != len(self.labels) or not self.labels:
            raise ConfigError("labels must be distinct and non-empty")
        if self.mode == "scored" and self.score_w is None:
            raise ConfigError("scored pooling needs a score vector")

    @property
    def input_dim(self) -> int:
        return self.w.shape[0]


def build_head(labels, input_dim: int, mode: str = "elementwise", seed: int = 0) -> AttributeHead:
    rng = np.random.default_rng(seed)
    k = len(labels)
    limit = np.sqrt(6.0 / (input_dim + k))
    w = Tensor(rng.uniform(-limit, limit, size=(input_dim, k)), requires_grad=True)
    b = Tensor(np.zeros(k), requires_grad=True)
    score_w = None
    if mode == "scored":
        s_limit = np.sqrt(6.0 / (input_dim + 1))
        score_w = Tensor(rng.uniform(-s_limit, s_limit, size=(input_dim, 1)), requires_grad=True)
    return AttributeHead(labels=list(labels), w=w, b=b, mode=mode, score_w=score_w)


def frame_attention_pool(frames, mode: str = "elementwise", score_w: Tensor | None = None) -> Tensor:
    """Pool T x d frames into one d-vector by softmax attention weights.

    elementwise: per-dimension softmax across frames, then the weighted sum
    of that dimension's values. scored: one softmax over per-frame scalar
    scores, then the weighted sum of rows.
    """
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ConfigError(f"expected [T, d] frames, got shape {x.shape}")
    if mode == "elementwise":
        cols = transpose(x, (1, 0))  # [d, T]
        alpha = softmax_lastdim(cols)
        return tsum(alpha * cols, axis=-1)
    if mode == "scored":
        if score_w is None:
            raise ConfigError("scored pooling needs a score vector")
        scores = transpose(matmul(x, score_w), (1, 0))  # [1, T]
        alpha = softmax_lastdim(scores)
        return reshape(matmul(alpha, x), (x.shape[1],))
    raise ConfigError(f"unknown pooling mode {mode!r}")


def attribute_logits(pooled: Tensor, head: AttributeHead) -> Tensor:
    if pooled.shape[-1] != head.input_dim:
        raise ConfigError(f"pooled dim {pooled.shape[-1]} does not match head dim {head.input_dim}")
    return matmul(reshape(pooled, (1, head.input_dim)), head.w) + head.b


def attribute_forward(pooled, head: AttributeHead) -> np.ndarray:
    """Per-label probabilities, logistic of the affine output."""
    x = pooled if isinstance(pooled, Tensor) else Tensor(pooled)
    with no_grad():
        return sigmoid(attribute_logits(x, head)).data[0]


def video_labels(record, labels) -> np.ndarray:
    """0/1 target vector: label present in any of the record's captions."""
    present = set()
    for caption in record.captions:
        present.update(caption)
    return np.array([1.0 if lab in present else 0.0 for lab in labels])


@dataclass
class AttributeMetrics:
    epoch: int
    loss: float
    subset_accuracy: float
    f1: list = field(default_factory=list)  # per label


def train_attributes(examples, head: AttributeHead, epochs: int, lr: float = 1e-2):
    """Fit the head with Adam on binary cross-entropy.

    ``examples`` is a list of (frames [T, d], target [k] in {0,1}).
    Returns (head, per-epoch metrics with subset accuracy and per-label F1).
    """
    if not examples:
        raise DataError("no attribute-training examples")
    targets = np.stack([t for _, t in examples])
    if targets.sum() == 0:
        import warnings

        warnings.warn("attribute corpus has no positive labels", stacklevel=2)
    head_params = {"w": head.w, "b": head.b}
    if head.score_w is not None:
        head_params["score_w"] = head.score_w
    name_of = {id(t): n for n, t in head_params.items()}
    opt = OptState()
    metrics = []
    for epoch in range(epochs):
        total_loss = 0.0
        preds = np.zeros_like(targets)
        for i, (frames, target) in enumerate(examples):
            pooled = frame_attention_pool(frames, head.mode, head.score_w)
            logits = attribute_logits(pooled, head)
            loss = bce_with_logits(logits, target[None, :])
            grads = {name_of[id(t)]: g for t, g in backward(loss).items() if id(t) in name_of}
            adam_step(head_params, grads, opt, lr)
            total_loss += loss.item()
            preds[i] = (logits.data[0] > 0).astype(float)
        metrics.append(
            AttributeMetrics(
                epoch=epoch,
                loss=total_loss / len(examples),
                subset_accuracy=float((preds == targets).all(axis=1).mean()),
                f1=_per_label_f1(preds, targets),
            )
        )
    return head, metrics


def _per_label_f1(preds: np.ndarray, targets: np.ndarray) -> list:
    out = []
    for j in range(targets.shape[1]):
        tp = float(((preds[:, j] == 1) & (targets[:, j] == 1)).sum())
        fp = float(((preds[:, j] == 1) & (targets[:, j] == 0)).sum())
        fn = float(((preds[:, j] == 0) & (targets[:, j] == 1)).sum())
        denom = 2 * tp + fp + fn
        out.append(2 * tp / denom if denom else 0.0)
    return out


def write_attributes(path, rows) -> None:
    """One JSON object per line: {video_id, labels: [[word, probability], ...]}."""
    with open(path, "w", encoding="utf-8") as f:
        for vid, pairs in rows:
            f.write(json.dumps({"video_id": vid, "labels": [[w, float(p)] for w, p in pairs]}) + "\n")

"""Finite-difference verification suite behind the `gradcheck` command.

Checks every differentiable primitive and a full tiny encoder-decoder
(d_model 8, one layer, vocabulary 11) against central differences.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .corpus import CaptionBatch
from .model import ModelConfig, build
from .training import batch_loss


def _tiny_batch(rng, feature_dim: int, vocab: int) -> CaptionBatch:
    feats = rng.uniform(-1, 1, size=(2, 3, feature_dim))
    return CaptionBatch(
        video_ids=["a", "b"],
        features=feats,
        feature_lengths=np.array([3, 2]),
        dec_input=np.array([[1, 4, 5, 6], [1, 7, 8, 0]]),
        target=np.array([[4, 5, 6, 2], [7, 8, 2, 0]]),
    )


def _model_case(variant: str, rng, seed: int):
    config = ModelConfig(
        variant=variant,
        n_layers_or_steps=1 if variant == "vanilla" else 2,
        d_model=8,
        n_heads=2,
        d_ff=16,
        dropout=0.0,
        vocab_size=11,
        max_decode_len=8,
        feature_dim=6,
    )
    params = build(config, seed)
    batch = _tiny_batch(rng, config.feature_dim, config.vocab_size)
    names = list(params.tensors)
    inputs = [params.tensors[n] for n in names]

    def f(*tensors):
        loss, _ = batch_loss(params, batch)
        return loss

    return f, inputs


def run_suite(seed: int = 0, eps: float = 1e-6):
    """Run every check; returns a list of (name, max relative error)."""
    rng = np.random.default_rng(seed)
    results = []

    a = nm.Tensor(rng.uniform(-2, 2, size=(3, 4)), requires_grad=True)
    b = nm.Tensor(rng.uniform(-2, 2, size=(4, 2)), requires_grad=True)
    probe0 = nm.Tensor(rng.uniform(-1, 1, size=(3, 2)))
    results.append(("matmul", nm.grad_check(lambda x, y: nm.tsum(nm.matmul(x, y) * probe0), [a, b], eps)))

    c = nm.Tensor(rng.uniform(-2, 2, size=(3, 4)), requires_grad=True)
    d = nm.Tensor(rng.uniform(-2, 2, size=(4, 4)), requires_grad=True)
    probe = nm.Tensor(rng.uniform(-1, 1, size=(3, 4)))
    results.append(("softmax@matmul", nm.grad_check(lambda x, y: nm.tsum(nm.softmax_lastdim(nm.matmul(x, y)) * probe), [c, d], eps)))

    x = nm.Tensor(rng.uniform(-2, 2, size=(2, 3, 5)), requires_grad=True)
    gain = nm.Tensor(rng.uniform(0.5, 1.5, size=5), requires_grad=True)
    bias = nm.Tensor(rng.uniform(-0.5, 0.5, size=5), requires_grad=True)
    probe2 = nm.Tensor(rng.uniform(-1, 1, size=(2, 3, 5)))
    results.append(("layer_norm", nm.grad_check(lambda t, g, o: nm.tsum(nm.layer_norm(t, g, o) * probe2), [x, gain, bias], eps)))

    logits = nm.Tensor(rng.uniform(-2, 2, size=(2, 4, 6)), requires_grad=True)
    targets = np.array([[1, 2, 3, 0], [4, 5, 0, 0]])
    results.append(("cross_entropy_masked", nm.grad_check(lambda t: nm.cross_entropy_masked(t, targets, 0), [logits], eps)))

    z = nm.Tensor(rng.uniform(-2, 2, size=(3, 4)), requires_grad=True)
    probe3 = nm.Tensor(rng.uniform(-1, 1, size=(3, 4)))
    results.append(("sigmoid", nm.grad_check(lambda t: nm.tsum(nm.sigmoid(t) * probe3), [z], eps)))
    results.append(("relu", nm.grad_check(lambda t: nm.tsum(nm.relu(t) * probe3), [z], eps)))

    table = nm.Tensor(rng.uniform(-1, 1, size=(7, 4)), requires_grad=True)
    ids = np.array([[0, 3, 6], [1, 1, 2]])
    probe4 = nm.Tensor(rng.uniform(-1, 1, size=(2, 3, 4)))
    results.append(("embedding", nm.grad_check(lambda t: nm.tsum(nm.embedding(t, ids) * probe4), [table], eps)))

    bt = nm.Tensor(rng.uniform(-2, 2, size=(3, 5)), requires_grad=True)
    y01 = (rng.random((3, 5)) > 0.5).astype(float)
    results.append(("bce_with_logits", nm.grad_check(lambda t: nm.bce_with_logits(t, y01), [bt], eps)))

    # deep composites: larger step keeps the difference quotient above
    # float64 cancellation noise (~eps_mach*|f|/2h) without truncation bias
    for variant in ("vanilla", "universal"):
        f, inputs = _model_case(variant, rng, seed)
        results.append((f"model[{variant}]", nm.grad_check(f, inputs, eps=1e-4)))

    return results

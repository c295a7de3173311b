"""Encoder-decoder caption models over continuous feature inputs.

Two assemblies share all sublayer code: a vanilla transformer with one
parameter set per layer, and a universal variant that reapplies a single
shared layer for a configured number of steps (optionally halting early
per position via adaptive computation). The encoder consumes feature rows
directly; there is no encoder token embedding anywhere.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .attention import MultiHeadParams, causal_mask, multi_head_attention, sinusoidal_positions
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    FormatError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .numerics import Tensor, dropout, embedding, layer_norm, matmul, no_grad, relu, sigmoid

VARIANTS = ("vanilla", "universal")

# Universal step-embedding table has this fixed height regardless of the
# configured step count, so the parameter count never depends on steps.
STEP_TABLE_SIZE = 16

CHECKPOINT_MAGIC = b"VCK1"
CHECKPOINT_VERSION = 1


class VocabularyError(ValueError):
    """A token id falls outside the configured vocabulary."""


@dataclass
class ActConfig:
    """Adaptive-computation halting: stop pondering once cumulative halting
    probability exceeds 1 - epsilon, or at max_steps."""

    epsilon: float = 0.01
    max_steps: int = 8
    ponder_weight: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"act epsilon must be in (0, 1), got {self.epsilon}")
        if self.max_steps < 1:
            raise ConfigError("act max_steps must be >= 1")


@dataclass
class ModelConfig:
    variant: str
    n_layers_or_steps: int
    d_model: int
    n_heads: int
    d_ff: int
    dropout: float
    vocab_size: int
    max_decode_len: int
    feature_dim: int
    act: ActConfig | None = None
    encoder_positions: bool = True  # add sinusoidal positions to feature inputs

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers_or_steps < 1:
            raise ConfigError("n_layers_or_steps must be >= 1")
        if self.variant == "universal" and self.n_layers_or_steps > STEP_TABLE_SIZE:
            raise ConfigError(f"universal steps capped at {STEP_TABLE_SIZE}")
        if self.act is not None and self.variant != "universal":
            raise ConfigError("adaptive halting requires the universal variant")
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must cover the four reserved tokens plus content")

    @property
    def has_input_projection(self) -> bool:
        return self.feature_dim != self.d_model

    def to_dict(self) -> dict:
        d = {
            "variant": self.variant,
            "n_layers_or_steps": self.n_layers_or_steps,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "dropout": self.dropout,
            "vocab_size": self.vocab_size,
            "max_decode_len": self.max_decode_len,
            "feature_dim": self.feature_dim,
            "encoder_positions": self.encoder_positions,
            "act": None,
        }
        if self.act is not None:
            d["act"] = {
                "epsilon": self.act.epsilon,
                "max_steps": self.act.max_steps,
                "ponder_weight": self.act.ponder_weight,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        act = d.pop("act", None)
        return cls(act=ActConfig(**act) if act else None, **d)


def preset(name: str, vocab_size: int) -> ModelConfig:
    """Named architecture presets.

    msvd_vanilla: 6 layers, d_model 512, 8 heads.
    msvd_universal: 8 steps, d_model 512, 8 heads.
    activitynet_universal: 8 steps, d_model 500, 10 heads, 500-dim inputs.
    """
    table = {
        "msvd_vanilla": ("vanilla", 6, 512, 8, 512, 20),
        "msvd_universal": ("universal", 8, 512, 8, 512, 20),
        "activitynet_universal": ("universal", 8, 500, 10, 500, 80),
    }
    if name not in table:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(table)}")
    variant, n, d_model, heads, feat, max_len = table[name]
    return ModelConfig(
        variant=variant,
        n_layers_or_steps=n,
        d_model=d_model,
        n_heads=heads,
        d_ff=4 * d_model,
        dropout=0.1,
        vocab_size=vocab_size,
        max_decode_len=max_len,
        feature_dim=feat,
    )


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _layer_shapes(prefix: str, d: int, d_ff: int, cross: bool) -> dict:
    shapes = {}
    blocks = ["self", "cross"] if cross else ["self"]
    for b in blocks:
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{b}.{w}"] = (d, d)
    n_norms = 3 if cross else 2
    shapes[f"{prefix}.ff.w1"] = (d, d_ff)
    shapes[f"{prefix}.ff.b1"] = (d_ff,)
    shapes[f"{prefix}.ff.w2"] = (d_ff, d)
    shapes[f"{prefix}.ff.b2"] = (d,)
    for i in range(1, n_norms + 1):
        shapes[f"{prefix}.norm{i}.gain"] = (d,)
        shapes[f"{prefix}.norm{i}.bias"] = (d,)
    return shapes


def param_shapes(config: ModelConfig) -> dict:
    """Ordered name -> shape table; the single source of truth for build,
    param_count, and checkpoint layout."""
    d, v = config.d_model, config.vocab_size
    shapes = {}
    if config.has_input_projection:
        shapes["in_proj"] = (config.feature_dim, d)
    if config.variant == "vanilla":
        for i in range(config.n_layers_or_steps):
            shapes.update(_layer_shapes(f"enc.{i}", d, config.d_ff, cross=False))
        for i in range(config.n_layers_or_steps):
            shapes.update(_layer_shapes(f"dec.{i}", d, config.d_ff, cross=True))
    else:
        shapes.update(_layer_shapes("enc.shared", d, config.d_ff, cross=False))
        shapes.update(_layer_shapes("dec.shared", d, config.d_ff, cross=True))
        shapes["enc.step_emb"] = (STEP_TABLE_SIZE, d)
        shapes["dec.step_emb"] = (STEP_TABLE_SIZE, d)
        if config.act is not None:
            shapes["enc.halt.w"] = (d, 1)
            shapes["enc.halt.b"] = (1,)
    shapes["dec.embed"] = (v, d)
    shapes["out_proj"] = (d, v)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Exact trainable scalar count for a configuration."""
    return int(sum(int(np.prod(s)) for s in param_shapes(config).values()))


class ModelParams:
    """Named parameter tensors plus the configuration that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def attn(self, prefix: str) -> MultiHeadParams:
        t = self.tensors
        return MultiHeadParams(
            wq=t[f"{prefix}.wq"],
            wk=t[f"{prefix}.wk"],
            wv=t[f"{prefix}.wv"],
            wo=t[f"{prefix}.wo"],
            n_heads=self.config.n_heads,
        )

    def norm(self, prefix: str):
        return self.tensors[f"{prefix}.gain"], self.tensors[f"{prefix}.bias"]

    def copy(self) -> "ModelParams":
        clone = {name: Tensor(t.data.copy(), requires_grad=t.requires_grad) for name, t in self.tensors.items()}
        return ModelParams(self.config, clone)


def build(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialization: Xavier-uniform matrices, zero biases
    and norm offsets, unit norm gains. Same seed, same bits."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# forward passes (batched internally; public ops take one sequence)
# ---------------------------------------------------------------------------


def _ff(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    t = params.tensors
    h = relu(matmul(x, t[f"{prefix}.w1"]) + t[f"{prefix}.b1"])
    return matmul(h, t[f"{prefix}.w2"]) + t[f"{prefix}.b2"]


def _encoder_layer(x, params, prefix, mask, train, rng):
    rate = params.config.dropout if train else 0.0
    a = multi_head_attention(x, x, params.attn(f"{prefix}.self"), mask)
    x = layer_norm(x + dropout(a, rate, rng), *params.norm(f"{prefix}.norm1"))
    f = _ff(x, params, f"{prefix}.ff")
    return layer_norm(x + dropout(f, rate, rng), *params.norm(f"{prefix}.norm2"))


def _decoder_layer(x, memory, params, prefix, self_mask, mem_mask, train, rng):
    rate = params.config.dropout if train else 0.0
    a = multi_head_attention(x, x, params.attn(f"{prefix}.self"), self_mask)
    x = layer_norm(x + dropout(a, rate, rng), *params.norm(f"{prefix}.norm1"))
    c = multi_head_attention(x, memory, params.attn(f"{prefix}.cross"), mem_mask)
    x = layer_norm(x + dropout(c, rate, rng), *params.norm(f"{prefix}.norm2"))
    f = _ff(x, params, f"{prefix}.ff")
    return layer_norm(x + dropout(f, rate, rng), *params.norm(f"{prefix}.norm3"))


def _prepare_encoder_input(features: Tensor, params: ModelParams, train, rng) -> Tensor:
    config = params.config
    if features.shape[-1] != config.feature_dim:
        raise ConfigError(f"feature dim {features.shape[-1]} does not match config {config.feature_dim}")
    x = features
    if config.has_input_projection:
        x = matmul(x, params["in_proj"])
    if config.encoder_positions:
        x = x + sinusoidal_positions(x.shape[-2], config.d_model)
    return dropout(x, config.dropout if train else 0.0, rng)


def _step_vector(params: ModelParams, table: str, step: int) -> Tensor:
    return embedding(params[table], np.array([step]))


def _encode_batch(features: Tensor, params: ModelParams, pad_mask=None, train=False, rng=None) -> Tensor:
    config = params.config
    x = _prepare_encoder_input(features, params, train, rng)
    if config.variant == "vanilla":
        for i in range(config.n_layers_or_steps):
            x = _encoder_layer(x, params, f"enc.{i}", pad_mask, train, rng)
    else:
        for t in range(config.n_layers_or_steps):
            x = _encoder_layer(x + _step_vector(params, "enc.step_emb", t), params, "enc.shared", pad_mask, train, rng)
    return x


def _decode_batch(tokens: np.ndarray, memory: Tensor, params: ModelParams, mem_mask=None, train=False, rng=None) -> Tensor:
    config = params.config
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise VocabularyError(f"token id out of range for vocabulary of size {config.vocab_size}")
    t_len = tokens.shape[-1]
    x = embedding(params["dec.embed"], tokens) + sinusoidal_positions(t_len, config.d_model)
    x = dropout(x, config.dropout if train else 0.0, rng)
    self_mask = causal_mask(t_len)
    if config.variant == "vanilla":
        for i in range(config.n_layers_or_steps):
            x = _decoder_layer(x, memory, params, f"dec.{i}", self_mask, mem_mask, train, rng)
    else:
        for t in range(config.n_layers_or_steps):
            x = _decoder_layer(
                x + _step_vector(params, "dec.step_emb", t), memory, params, "dec.shared", self_mask, mem_mask, train, rng
            )
    return matmul(x, params["out_proj"])


def encode(features, params: ModelParams, pad_mask=None, train: bool = False, rng=None) -> Tensor:
    """Encode one feature sequence [T, feature_dim] into memory [T, d_model].

    Fixed step count; adaptive halting has its own entry point below.
    """
    x = features if isinstance(features, Tensor) else Tensor(features)
    return _encode_batch(x, params, pad_mask, train, rng)


def decode_forward(tokens, memory: Tensor, params: ModelParams, mem_mask=None, train: bool = False, rng=None) -> Tensor:
    """Teacher-forced decoder pass: token ids [T'] -> logits [T', vocab]."""
    return _decode_batch(np.asarray(tokens), memory, params, mem_mask, train, rng)


@dataclass
class ActTrace:
    """Per-position halting record from an adaptive-computation encode."""

    steps: np.ndarray  # int steps used per position
    remainder: np.ndarray  # weight given to the final step's state
    ponder: np.ndarray  # steps + remainder
    weights: list = field(default_factory=list)  # per executed step: weight per position
    states: list = field(default_factory=list)  # per executed step: state snapshot


def _act_encode_batch(features: Tensor, params: ModelParams, pad_mask=None, train=False, rng=None):
    """Adaptive-computation encoder: returns (memory, ponder tensor, trace).

    Each position accumulates halting probability per step and halts once
    the running sum would exceed 1 - epsilon (or at max_steps). The final
    memory is the weighted sum of step states: weight p_t while running,
    the remainder 1 - sum(previous p) at the halting step, 0 afterwards.
    """
    config = params.config
    act = config.act
    if act is None:
        raise ConfigError("adaptive halting is not enabled in this config")
    x = _prepare_encoder_input(features, params, train, rng)
    lead = x.shape[:-1]  # [B, T]

    state = x
    halted = np.zeros(lead, dtype=bool)
    cum_np = np.zeros(lead)
    steps_np = np.zeros(lead)
    remainder_np = np.zeros(lead)
    weighted = None
    cum_t = Tensor(np.zeros(lead + (1,)))
    rem_t = Tensor(np.zeros(lead + (1,)))
    trace = ActTrace(steps=steps_np, remainder=remainder_np, ponder=np.zeros(lead))

    for t in range(act.max_steps):
        state = _encoder_layer(state + _step_vector(params, "enc.step_emb", t), params, "enc.shared", pad_mask, train, rng)
        p = sigmoid(matmul(state, params["enc.halt.w"]) + params["enc.halt.b"])  # [.., T, 1]
        p_np = p.data[..., 0]

        running = ~halted
        newly = running & ((cum_np + p_np > 1.0 - act.epsilon) | (t == act.max_steps - 1))
        still = running & ~newly

        still_m = Tensor(still[..., None].astype(np.float64))
        newly_m = Tensor(newly[..., None].astype(np.float64))
        remainder_expr = Tensor(np.ones(lead + (1,))) - cum_t  # 1 - sum of used probabilities
        w = p * still_m + remainder_expr * newly_m
        weighted = w * state if weighted is None else weighted + w * state
        cum_t = cum_t + p * still_m
        rem_t = rem_t + remainder_expr * newly_m

        steps_np += running
        remainder_np[newly] = (1.0 - cum_np)[newly]
        cum_np = np.where(still, cum_np + p_np, cum_np)
        halted |= newly

        trace.weights.append(w.data[..., 0].copy())
        trace.states.append(state.data.copy())
        if halted.all():
            break

    trace.steps = steps_np.astype(int)
    trace.ponder = steps_np + remainder_np
    ponder_t = Tensor(steps_np[..., None]) + rem_t
    return weighted, ponder_t, trace


def universal_act_encode(features, params: ModelParams, pad_mask=None):
    """Adaptive-computation encode of one sequence [T, feature_dim].

    Returns (memory [T, d_model], ActTrace with per-position step counts,
    remainders, ponder = steps + remainder, and step snapshots).
    """
    x = features if isinstance(features, Tensor) else Tensor(features)
    memory, _, trace = _act_encode_batch(x, params, pad_mask)
    return memory, trace


def encode_for_inference(features, params: ModelParams, pad_mask=None) -> Tensor:
    """Encoder entry point for generation: adaptive path when configured."""
    with no_grad():
        if params.config.act is not None:
            memory, _ = universal_act_encode(features, params, pad_mask)
            return memory
        return encode(features, params, pad_mask)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams) -> None:
    """Binary container: magic, format version, config record, named f32 tensors,
    and a trailing checksum (sum of tensor payload bytes mod 2^64)."""
    config_blob = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    names = list(param_shapes(params.config))
    checksum = 0
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(config_blob)))
        f.write(config_blob)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            arr = params.tensors[name].data.astype("<f4")
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            payload = arr.tobytes()
            checksum = (checksum + int(np.frombuffer(payload, dtype=np.uint8).sum(dtype=np.uint64))) % (1 << 64)
            f.write(payload)
        f.write(struct.pack("<Q", checksum))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, str(path))
    if r.take(4) != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    config = ModelConfig.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
    n = r.u32()
    tensors = {}
    checksum = 0
    for _ in range(n):
        name = r.take(r.u16()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        payload = r.take(4 * int(np.prod(shape)) if shape else 4)
        checksum = (checksum + int(np.frombuffer(payload, dtype=np.uint8).sum(dtype=np.uint64))) % (1 << 64)
        data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
        tensors[name] = Tensor(data, requires_grad=True)
    if r.u64() != checksum:
        raise ChecksumError(f"{path}: checkpoint checksum mismatch")
    expected = param_shapes(config)
    if set(tensors) != set(expected):
        raise FormatError(f"{path}: tensor names do not match the config record")
    return ModelParams(config, tensors)


class _Reader:
    """Bounds-checked little-endian cursor over a byte blob."""

    def __init__(self, blob: bytes, label: str):
        self.blob = blob
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedPayloadError(f"{self.label}: truncated (wanted {n} bytes at offset {self.pos})")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

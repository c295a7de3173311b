"""Feature matrices: container format, window accounting, PCA, synthesis.

The on-disk feature format is bit-exact: magic "VFM1", u32 version (1),
u32 rows T, u32 cols D, u32 dtype code (0 = IEEE-754 32-bit LE), then
T*D row-major values, then a u64 checksum (sum of payload bytes mod 2^64).
PCA models use the same envelope with magic "VPC1" and fields D, k, then
mean, components, eigenvalues as the payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    TruncatedPayloadError,
    VersionMismatchError,
)

FEATURE_MAGIC = b"VFM1"
PCA_MAGIC = b"VPC1"
FORMAT_VERSION = 1
DTYPE_F32LE = 0


class TooShortVideoError(ValueError):
    """Fewer frames than one feature window."""


class InsufficientDataError(ValueError):
    """Not enough rows to fit the requested number of components."""


class DimensionError(ValueError):
    """Feature dimensionality does not match."""


@dataclass
class FeatureMatrix:
    """One video's T x D feature sequence with provenance metadata."""

    video_id: str
    values: np.ndarray
    extractor_tag: str = "synthetic"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DimensionError(f"feature matrix must be [T>=1, D], got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError(f"non-finite feature values in {self.video_id!r}")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def expected_rows(n_frames: int, cap: int, window: int) -> int:
    """Feature rows produced from a clip: floor(min(n_frames, cap) / window).

    The budget presets: a 500-frame cap with 16-frame windows yields 31
    rows; a 400-frame cap with 8-frame windows yields 50.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if cap < window:
        raise ValueError(f"cap {cap} smaller than window {window}")
    if n_frames < window:
        raise TooShortVideoError(f"{n_frames} frames is less than one {window}-frame window")
    return min(n_frames, cap) // window


# ---------------------------------------------------------------------------
# container format
# ---------------------------------------------------------------------------


def _payload_checksum(payload: bytes) -> int:
    return int(np.frombuffer(payload, dtype=np.uint8).sum(dtype=np.uint64)) % (1 << 64)


def write_feature_file(path, m: FeatureMatrix) -> None:
    payload = m.values.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<IIII", FORMAT_VERSION, m.rows, m.dim, DTYPE_F32LE))
        f.write(payload)
        f.write(struct.pack("<Q", _payload_checksum(payload)))


def read_feature_file(path) -> FeatureMatrix:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 20:
        raise TruncatedPayloadError(f"{path}: header incomplete")
    version, rows, dim, dtype_code = struct.unpack("<IIII", blob[4:20])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if dtype_code != DTYPE_F32LE:
        raise VersionMismatchError(f"{path}: unsupported dtype code {dtype_code}")
    need = rows * dim * 4
    payload = blob[20 : 20 + need]
    if len(payload) < need or len(blob) < 20 + need + 8:
        raise TruncatedPayloadError(f"{path}: payload shorter than {rows}x{dim} values plus footer")
    (stored,) = struct.unpack("<Q", blob[20 + need : 28 + need])
    if stored != _payload_checksum(payload):
        raise ChecksumError(f"{path}: payload checksum mismatch")
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, dim).astype(np.float64)
    return FeatureMatrix(video_id=path.stem, values=values, extractor_tag="file")


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass
class PcaModel:
    """Mean vector, orthonormal component rows, and descending eigenvalues."""

    mean: np.ndarray
    components: np.ndarray  # [k, D]
    eigenvalues: np.ndarray  # [k], non-increasing

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]

    @property
    def output_dim(self) -> int:
        return self.components.shape[0]


def pca_fit(matrices, k: int) -> PcaModel:
    """Top-k principal axes of all rows pooled across ``matrices``.

    Covariance uses the N-1 divisor. Component signs follow a fixed
    convention (largest-magnitude entry positive) so fits are reproducible.
    """
    rows = [m.values for m in matrices]
    if not rows:
        raise InsufficientDataError("no feature matrices given")
    x = np.concatenate(rows, axis=0)
    n, d = x.shape
    if k > d:
        raise DimensionError(f"cannot keep {k} components of {d}-dimensional data")
    if n <= k:
        raise InsufficientDataError(f"need more than {k} rows to fit {k} components, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending
    order = np.argsort(eigvals)[::-1][:k]
    eigvals = eigvals[order]
    comps = eigvecs[:, order].T
    for i in range(k):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return PcaModel(mean=mean, components=comps, eigenvalues=eigvals)


def pca_apply(model: PcaModel, m: FeatureMatrix) -> FeatureMatrix:
    """Project rows onto the fitted axes: (rows - mean) @ components^T."""
    if m.dim != model.input_dim:
        raise DimensionError(f"matrix dim {m.dim} does not match PCA input dim {model.input_dim}")
    reduced = (m.values - model.mean) @ model.components.T
    return FeatureMatrix(
        video_id=m.video_id,
        values=reduced,
        extractor_tag=f"{m.extractor_tag}+pca{model.output_dim}",
    )


def pca_reconstruct(model: PcaModel, reduced: np.ndarray) -> np.ndarray:
    """Map reduced rows back to the original space (inverse of pca_apply)."""
    return np.asarray(reduced) @ model.components + model.mean


def write_pca_file(path, model: PcaModel) -> None:
    payload = (
        model.mean.astype("<f4").tobytes()
        + model.components.astype("<f4").tobytes()
        + model.eigenvalues.astype("<f4").tobytes()
    )
    with open(path, "wb") as f:
        f.write(PCA_MAGIC)
        f.write(struct.pack("<IIII", FORMAT_VERSION, model.input_dim, model.output_dim, DTYPE_F32LE))
        f.write(payload)
        f.write(struct.pack("<Q", _payload_checksum(payload)))


def read_pca_file(path) -> PcaModel:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != PCA_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 20:
        raise TruncatedPayloadError(f"{path}: header incomplete")
    version, d, k, dtype_code = struct.unpack("<IIII", blob[4:20])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if dtype_code != DTYPE_F32LE:
        raise VersionMismatchError(f"{path}: unsupported dtype code {dtype_code}")
    need = (d + k * d + k) * 4
    payload = blob[20 : 20 + need]
    if len(payload) < need or len(blob) < 20 + need + 8:
        raise TruncatedPayloadError(f"{path}: payload shorter than declared sizes")
    (stored,) = struct.unpack("<Q", blob[20 + need : 28 + need])
    if stored != _payload_checksum(payload):
        raise ChecksumError(f"{path}: payload checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    mean = flat[:d]
    comps = flat[d : d + k * d].reshape(k, d)
    eigvals = flat[d + k * d :]
    return PcaModel(mean=mean, components=comps, eigenvalues=eigvals)


# ---------------------------------------------------------------------------
# synthetic features
# ---------------------------------------------------------------------------


def synth_features(
    seed: int,
    n_videos: int,
    rows_range: tuple,
    dim: int,
    n_classes: int,
    signal_strength: float,
):
    """Generate a deterministic corpus of class-structured feature matrices.

    Video i belongs to class i % n_classes. Each row is that class's
    unit-norm mean vector plus Gaussian noise scaled by (1 - signal_strength).
    Returns (matrices, labels).
    """
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    lo, hi = rows_range
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    matrices = []
    labels = []
    for i in range(n_videos):
        label = i % n_classes
        t = int(rng.integers(lo, hi + 1))
        noise = rng.standard_normal((t, dim)) * (1.0 - signal_strength)
        values = means[label][None, :] + noise
        matrices.append(FeatureMatrix(video_id=f"vid{i:04d}", values=values, extractor_tag="synthetic"))
        labels.append(label)
    return matrices, labels

"""Primitive numeric kernels shared by the scoring modules.

All functions are pure: no input is mutated and results depend only on
arguments, so concurrent callers are safe.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionError, DomainError
from .types import BinaryMask, EmbeddingVec, ProbVolume, ScoreVector


def cosine_distance_raw(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine distance 1 - a.b/(|a||b|) between two plain vectors, in [0, 2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"vector length mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine distance is undefined for zero-norm vectors")
    sim = float(np.dot(a, b)) / (na * nb)
    # guard against rounding pushing |sim| a hair past 1
    sim = min(1.0, max(-1.0, sim))
    return 1.0 - sim


def cosine_distance(a: EmbeddingVec, b: EmbeddingVec) -> float:
    """Cosine distance between two embeddings.

    Returns 0 exactly when the vectors are positive scalar multiples of each
    other and 2 when they are antipodal.
    """
    return cosine_distance_raw(a.values, b.values)


def minmax_normalize(scores: ScoreVector) -> ScoreVector:
    """Affinely map scores onto [0, 1] via (v - min) / (max - min).

    A constant input is uninformative, so every output is set to 0.5 rather
    than dividing by zero; this keeps a fused criterion balanced when one of
    its terms degenerates.
    """
    scores.require_nonempty("minmax_normalize")
    vals = scores.values
    lo = float(vals.min())
    hi = float(vals.max())
    if hi == lo:
        return scores.with_values(np.full(vals.shape, 0.5))
    return scores.with_values((vals - lo) / (hi - lo))


def quantile_transform(scores: ScoreVector) -> ScoreVector:
    """Map scores to [0, 1] by tie-averaged empirical ranks.

    Output is (avg_rank - 1) / (N - 1) with 1-based average ranks, so the
    smallest value maps to 0, the largest to 1, and tied inputs share one
    output. A single entry maps to 0.5. Depends on ranks only, hence
    invariant under any strictly increasing transform of the inputs.
    """
    scores.require_nonempty("quantile_transform")
    vals = scores.values
    if vals.size == 1:
        return scores.with_values(np.array([0.5]))
    ranks = rankdata(vals, method="average")
    return scores.with_values((ranks - 1.0) / (vals.size - 1.0))


def entropy_terms(probs: np.ndarray) -> np.ndarray:
    """Elementwise -p*ln(p) with the 0*ln(0) = 0 convention."""
    p = np.asarray(probs, dtype=np.float64)
    out = np.zeros_like(p)
    pos = p > 0.0
    out[pos] = -p[pos] * np.log(p[pos])
    return out


def masked_entropy(volume: ProbVolume, mask: BinaryMask) -> float:
    """Total entropy of mask-restricted probabilities, natural log.

    Each voxel's probabilities are multiplied by the mask before the entropy
    sum, so masked-out voxels contribute exactly zero.
    """
    if volume.spatial_shape != mask.spatial_shape:
        raise DimensionError(
            f"mask shape {mask.spatial_shape} does not match volume "
            f"shape {volume.spatial_shape}"
        )
    masked = volume.probs * mask.mask[np.newaxis, ...]
    return float(entropy_terms(masked).sum())

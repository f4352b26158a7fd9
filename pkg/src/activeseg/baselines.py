"""Classic query-strategy scorers used as comparison baselines.

Every scorer reduces to a per-sample ScoreVector so the selection stage is
strategy-agnostic: higher score = selected earlier.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, PairingError
from .kernels import entropy_terms
from .types import EmbeddingVec, ProbVolume, ScoreVector

BASELINE_NAMES = ("RAND", "ENPY", "LCON", "MMAR", "CORESET")


def random_scores(ids: Sequence[str], seed: int, round_index: int) -> ScoreVector:
    """Seeded uniform draws; ids are ranked in sorted order for determinism."""
    rng = np.random.default_rng([seed, round_index])
    ordered = sorted(ids)
    draws = rng.random(len(ordered))
    return ScoreVector.from_pairs(zip(ordered, draws))


def entropy_scores(probs: Mapping[str, ProbVolume]) -> ScoreVector:
    """Total predictive entropy over the whole volume, deliberately unmasked."""
    return ScoreVector.from_pairs(
        (sid, float(entropy_terms(vol.probs).sum())) for sid, vol in probs.items()
    )


def least_confidence_scores(probs: Mapping[str, ProbVolume]) -> ScoreVector:
    """Negated mean top-1 probability: the less confident, the higher the score."""
    return ScoreVector.from_pairs(
        (sid, -float(vol.probs.max(axis=0).mean())) for sid, vol in probs.items()
    )


def min_margin_scores(probs: Mapping[str, ProbVolume]) -> ScoreVector:
    """Negated mean (top-1 minus top-2) margin."""
    out = []
    for sid, vol in probs.items():
        ordered = np.sort(vol.probs, axis=0)
        margin = ordered[-1] - ordered[-2]
        out.append((sid, -float(margin.mean())))
    return ScoreVector.from_pairs(out)


def coreset_scores(
    embeddings: Mapping[str, EmbeddingVec],
    labeled_embeddings: Sequence[EmbeddingVec],
    n_b: int,
) -> ScoreVector:
    """Greedy k-center (farthest point) selection encoded as scores.

    Starting from the labeled set as centers, the farthest unlabeled sample
    is picked and promoted to a center, n_b times. Picked samples receive
    large descending scores (so a top-n_b cut reproduces the greedy order);
    everyone else keeps their final center distance squashed below 1.
    """
    if not labeled_embeddings:
        raise PairingError("coreset needs at least one labeled embedding as a center")
    if n_b < 1:
        raise DomainError(f"n_b must be >= 1, got {n_b}")
    ids = sorted(embeddings)
    vectors = {sid: np.asarray(embeddings[sid].values, dtype=np.float64) for sid in ids}
    dist = {
        sid: min(
            float(np.linalg.norm(vectors[sid] - np.asarray(a.values, dtype=np.float64)))
            for a in labeled_embeddings
        )
        for sid in ids
    }
    picked: list[str] = []
    remaining = set(ids)
    for _ in range(min(n_b, len(ids))):
        best = max(sorted(remaining), key=lambda sid: dist[sid])
        picked.append(best)
        remaining.discard(best)
        center = vectors[best]
        for sid in remaining:
            d = float(np.linalg.norm(vectors[sid] - center))
            if d < dist[sid]:
                dist[sid] = d
    max_dist = max(dist.values()) if dist else 1.0
    squash = max(max_dist, 1.0) + 1.0
    scores = {sid: dist[sid] / squash for sid in ids}
    for rank, sid in enumerate(picked):
        scores[sid] = float(n_b - rank)
    return ScoreVector.from_mapping({sid: scores[sid] for sid in ids})


def baseline_scores(
    strategy: str,
    *,
    probs: Mapping[str, ProbVolume] | None = None,
    embeddings: Mapping[str, EmbeddingVec] | None = None,
    labeled_embeddings: Sequence[EmbeddingVec] | None = None,
    ids: Sequence[str] | None = None,
    n_b: int = 1,
    seed: int = 0,
    round_index: int = 1,
) -> ScoreVector:
    """Dispatch one baseline scorer, validating it got the inputs it needs."""
    name = strategy.upper()
    if name == "RAND":
        if ids is None:
            raise PairingError("RAND needs the unlabeled id list")
        return random_scores(ids, seed, round_index)
    if name in ("ENPY", "LCON", "MMAR"):
        if probs is None:
            raise PairingError(f"{name} needs probability volumes")
        if name == "ENPY":
            return entropy_scores(probs)
        if name == "LCON":
            return least_confidence_scores(probs)
        return min_margin_scores(probs)
    if name == "CORESET":
        if embeddings is None or labeled_embeddings is None:
            raise PairingError("CORESET needs unlabeled and labeled embeddings")
        return coreset_scores(embeddings, labeled_embeddings, n_b)
    raise DomainError(f"unknown baseline strategy {strategy!r}")

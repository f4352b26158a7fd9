"""Core value types: embeddings, probability volumes, masks, score vectors.

All types validate their invariants at construction and are treated as
immutable afterwards; numeric payloads are numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import DimensionError, DomainError, EmptyInputError, PairingError

PROB_SUM_TOL = 1e-5


@dataclass(frozen=True)
class EmbeddingVec:
    """Pooled feature vector of one sample under one encoder snapshot.

    ``encoder_round`` 0 marks the pre-adaptation encoder; later rounds use
    the encoder state after that round's fine-tuning.
    """

    values: np.ndarray
    sample_id: str
    encoder_round: int = 0

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise DimensionError(
                f"embedding for {self.sample_id!r} must be a non-empty 1-D vector, "
                f"got shape {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"embedding for {self.sample_id!r} contains non-finite values")
        if float(np.linalg.norm(arr)) == 0.0:
            raise DomainError(f"embedding for {self.sample_id!r} has zero norm")
        if self.encoder_round < 0:
            raise DomainError(f"encoder_round must be >= 0, got {self.encoder_round}")
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class ProbVolume:
    """Per-voxel class probabilities, shape (C, H, W, D), class 0 = background.

    Freshly predicted volumes must sum to 1 over classes at every voxel;
    masked or scaled derivatives set ``unnormalized=True`` and skip that check.
    """

    probs: np.ndarray
    sample_id: str
    unnormalized: bool = False

    def __post_init__(self) -> None:
        arr = np.asarray(self.probs)
        if arr.ndim != 4:
            raise DimensionError(
                f"probability volume for {self.sample_id!r} must have shape (C,H,W,D), "
                f"got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"probability volume for {self.sample_id!r} has non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise DomainError(
                f"probability volume for {self.sample_id!r} has values outside [0,1]"
            )
        if not self.unnormalized:
            sums = arr.sum(axis=0)
            if not np.allclose(sums, 1.0, rtol=0.0, atol=PROB_SUM_TOL):
                worst = float(np.abs(sums - 1.0).max())
                raise DomainError(
                    f"per-voxel class probabilities for {self.sample_id!r} do not sum to 1 "
                    f"(max deviation {worst:.3e})"
                )
        object.__setattr__(self, "probs", arr)

    @property
    def num_classes(self) -> int:
        return int(self.probs.shape[0])

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.probs.shape[1:])  # type: ignore[return-value]


@dataclass(frozen=True)
class BinaryMask:
    """A {0,1} voxel mask with the spatial shape of its source volume."""

    mask: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.mask)
        if arr.ndim != 3:
            raise DimensionError(f"mask must have shape (H,W,D), got {arr.shape}")
        if not np.all((arr == 0) | (arr == 1)):
            raise DomainError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "mask", arr.astype(np.float64))

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.mask.shape)  # type: ignore[return-value]

    def foreground_count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class ScoreVector:
    """Per-sample scalar scores with unique ids and finite values."""

    entries: tuple[tuple[str, float], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        norm = tuple((str(sid), float(v)) for sid, v in self.entries)
        ids = [sid for sid, _ in norm]
        if len(set(ids)) != len(ids):
            dupes = sorted({s for s in ids if ids.count(s) > 1})
            raise PairingError(f"duplicate sample ids in score vector: {dupes}")
        for sid, v in norm:
            if not np.isfinite(v):
                raise DomainError(f"non-finite score for sample {sid!r}: {v}")
        object.__setattr__(self, "entries", norm)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, float]) -> "ScoreVector":
        return cls(tuple(mapping.items()))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, float]]) -> "ScoreVector":
        return cls(tuple(pairs))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[str, float]]:
        return iter(self.entries)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(sid for sid, _ in self.entries)

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.entries], dtype=np.float64)

    def as_dict(self) -> dict[str, float]:
        return dict(self.entries)

    def require_nonempty(self, op: str) -> None:
        if not self.entries:
            raise EmptyInputError(f"{op} needs at least one score entry")

    def with_values(self, values: np.ndarray) -> "ScoreVector":
        """Same ids, new values (used by the normalization kernels)."""
        vals = np.asarray(values, dtype=np.float64)
        if vals.shape != (len(self.entries),):
            raise DimensionError(
                f"replacement values have shape {vals.shape}, expected ({len(self.entries)},)"
            )
        return ScoreVector(tuple((sid, float(v)) for (sid, _), v in zip(self.entries, vals)))

"""Reliable-sample selection for pseudo-labeled fine-tuning.

Ranks unlabeled samples by how likely the current model is to pseudo-label
them well: high foreground prediction margin (confidence) and a small
embedding distance to the nearest labeled anchor. The selected ids also feed
the query-side exclusion rule: samples the model already handles confidently
carry little annotation value, so they are withheld from future query
batches.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BudgetError,
    DomainError,
    EmptyInputError,
    FormatError,
    PairingError,
)
from .kernels import cosine_distance
from .query import format_float
from .types import BinaryMask, EmbeddingVec, ProbVolume, ScoreVector

RELIABILITY_HEADER = (
    "sample_id",
    "confidence",
    "semantic_distance",
    "reliability",
    "candidate",
    "selected",
    "round",
)

CONFIDENCE_VARIANTS = ("mean", "sum")


@dataclass(frozen=True)
class SelectionConfig:
    """Budget and temperature settings for one selection pass.

    ``n_su`` is the pseudo-label budget (batch size times round index in the
    orchestrated loop). ``tau_c`` inflates the candidate pre-selection count
    so the distance stage has genuine choice; with confidences in [0, 1] the
    default of 2.0 guarantees at least twice the budget in candidates.
    """

    n_su: int
    n_unlabeled: int
    tau_c: float = 2.0
    confidence_variant: str = "mean"

    def __post_init__(self) -> None:
        if self.n_su < 1:
            raise DomainError(f"n_su must be >= 1, got {self.n_su}")
        if self.tau_c <= 0:
            raise DomainError(f"tau_c must be > 0, got {self.tau_c}")
        if self.confidence_variant not in CONFIDENCE_VARIANTS:
            raise DomainError(
                f"confidence_variant must be one of {CONFIDENCE_VARIANTS}, "
                f"got {self.confidence_variant!r}"
            )
        if self.n_su > self.n_unlabeled:
            raise BudgetError(
                f"pseudo-label budget {self.n_su} exceeds unlabeled pool "
                f"size {self.n_unlabeled}"
            )


def predicted_foreground_mask(volume: ProbVolume) -> BinaryMask:
    """Voxels whose argmax class is not background.

    Argmax ties resolve toward the lowest class index, so a voxel tied with
    background stays background and cannot inflate confidence.
    """
    if volume.num_classes < 2:
        raise DomainError("predicted foreground needs at least one non-background class")
    labels = volume.probs.argmax(axis=0)
    return BinaryMask((labels != 0).astype(np.float64))


def _top_two(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    part = np.sort(probs, axis=0)
    return part[-1], part[-2]


def confidence(volume: ProbVolume, variant: str = "mean") -> float:
    """Prediction-margin confidence over predicted-foreground voxels.

    Per voxel the margin is top-1 minus top-2 class probability, zeroed on
    predicted background. The default aggregates by the mean over foreground
    voxels, bounding the score in [0, 1] independently of volume size; the
    ``sum`` variant keeps the raw masked total for fidelity experiments.
    A volume with no predicted foreground scores 0.
    """
    if variant not in CONFIDENCE_VARIANTS:
        raise DomainError(f"unknown confidence variant {variant!r}")
    mask = predicted_foreground_mask(volume).mask
    top1, top2 = _top_two(volume.probs)
    margins = (top1 - top2) * mask
    total = float(margins.sum())
    if variant == "sum":
        return total
    count = float(mask.sum())
    if count == 0.0:
        return 0.0
    return total / count


def mean_confidence(confidences: Sequence[float]) -> float:
    """Arithmetic mean confidence over the unlabeled pool."""
    if len(confidences) == 0:
        raise EmptyInputError("mean_confidence needs at least one value")
    return float(np.mean(np.asarray(confidences, dtype=np.float64)))


def candidate_count(cfg: SelectionConfig, c_bar: float) -> int:
    """Number of high-confidence candidates to pre-select.

    Scales the pseudo-label budget by tau_c / mean-confidence: an unconfident
    model casts a wide net, a confident one stays close to the budget. The
    count is clamped to [n_su, n_unlabeled]; a zero mean confidence opens the
    whole pool.
    """
    if c_bar < 0:
        raise DomainError(f"mean confidence must be >= 0, got {c_bar}")
    if c_bar == 0.0:
        raw = cfg.n_unlabeled
    else:
        raw = int(math.floor(cfg.n_su * cfg.tau_c / c_bar + 0.5))
    return max(cfg.n_su, min(cfg.n_unlabeled, raw))


def semantic_distance(candidate: EmbeddingVec, anchors: Sequence[EmbeddingVec]) -> float:
    """Minimal cosine distance from a candidate to any labeled anchor."""
    if len(anchors) == 0:
        raise DomainError("semantic distance needs at least one anchor")
    return min(cosine_distance(anchor, candidate) for anchor in anchors)


def reliability_score(conf: float, distance: float) -> float:
    """Confidence damped by anchor distance: conf * max(0, 1 - distance).

    Cosine distances above 1 (possible with signed embeddings) clamp the
    factor at zero instead of going negative.
    """
    return conf * max(0.0, 1.0 - distance)


@dataclass(frozen=True)
class ReliabilityRow:
    """Per-sample record of one selection pass.

    ``semantic_distance`` and ``reliability`` are only computed for
    candidates and stay None otherwise.
    """

    sample_id: str
    confidence: float
    semantic_distance: float | None
    reliability: float | None
    candidate: bool
    selected: bool

    def __post_init__(self) -> None:
        if self.selected and not self.candidate:
            raise DomainError(f"selected sample {self.sample_id!r} is not a candidate")
        if self.candidate and (self.semantic_distance is None or self.reliability is None):
            raise DomainError(f"candidate {self.sample_id!r} is missing distance/reliability")


@dataclass(frozen=True)
class ReliabilityResult:
    """Outcome of select_reliable: ranked rows plus the chosen ids."""

    rows: tuple[ReliabilityRow, ...]
    selected: tuple[str, ...]
    exclusion_update: frozenset[str]
    round: int = 0

    @property
    def by_id(self) -> dict[str, ReliabilityRow]:
        return {r.sample_id: r for r in self.rows}

    def write_csv(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(RELIABILITY_HEADER)
            for r in self.rows:
                writer.writerow(
                    [
                        r.sample_id,
                        format_float(r.confidence),
                        "" if r.semantic_distance is None else format_float(r.semantic_distance),
                        "" if r.reliability is None else format_float(r.reliability),
                        "true" if r.candidate else "false",
                        "true" if r.selected else "false",
                        str(self.round),
                    ]
                )
        os.replace(tmp, path)

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "ReliabilityResult":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != RELIABILITY_HEADER:
                raise FormatError(f"{path}: unexpected reliability header {header}")
            rows = []
            round_index = 0
            for rec in reader:
                if len(rec) != len(RELIABILITY_HEADER):
                    raise FormatError(f"{path}: malformed row {rec}")
                rows.append(
                    ReliabilityRow(
                        sample_id=rec[0],
                        confidence=float(rec[1]),
                        semantic_distance=float(rec[2]) if rec[2] else None,
                        reliability=float(rec[3]) if rec[3] else None,
                        candidate=rec[4] == "true",
                        selected=rec[5] == "true",
                    )
                )
                round_index = int(rec[6])
        selected = tuple(r.sample_id for r in rows if r.selected)
        return cls(
            rows=tuple(rows),
            selected=selected,
            exclusion_update=frozenset(selected),
            round=round_index,
        )


def select_reliable(
    confidences: ScoreVector,
    embeddings: Mapping[str, EmbeddingVec],
    cfg: SelectionConfig,
    anchors: Sequence[EmbeddingVec],
    round_index: int = 0,
) -> ReliabilityResult:
    """Pick the n_su most reliable unlabeled samples for pseudo-labeling.

    Stages: (1) mean confidence fixes the candidate count K; (2) the top-K
    samples by confidence become candidates (ties by ascending id);
    (3) candidates get a semantic distance to the nearest anchor and a
    reliability score; (4) the top-n_su by reliability are selected and
    returned as the exclusion update for future query rounds.
    """
    confidences.require_nonempty("select_reliable")
    if len(confidences) != cfg.n_unlabeled:
        raise PairingError(
            f"config expects {cfg.n_unlabeled} unlabeled samples, "
            f"got {len(confidences)} confidences"
        )
    missing = [sid for sid in confidences.ids if sid not in embeddings]
    if missing:
        raise PairingError(f"no embedding for unlabeled samples: {sorted(missing)}")
    if len(confidences) < cfg.n_su:
        raise BudgetError(
            f"pseudo-label budget {cfg.n_su} exceeds {len(confidences)} unlabeled samples"
        )

    c_bar = mean_confidence([v for _, v in confidences])
    k = candidate_count(cfg, c_bar)
    by_conf = sorted(confidences, key=lambda item: (-item[1], item[0]))
    candidate_ids = [sid for sid, _ in by_conf[:k]]

    conf_map = confidences.as_dict()
    distance: dict[str, float] = {}
    score: dict[str, float] = {}
    for sid in candidate_ids:
        d = semantic_distance(embeddings[sid], anchors)
        distance[sid] = d
        score[sid] = reliability_score(conf_map[sid], d)

    ranked = sorted(candidate_ids, key=lambda sid: (-score[sid], sid))
    selected = ranked[: cfg.n_su]
    selected_set = set(selected)
    candidate_set = set(candidate_ids)

    rows = [
        ReliabilityRow(
            sample_id=sid,
            confidence=conf_map[sid],
            semantic_distance=distance[sid],
            reliability=score[sid],
            candidate=True,
            selected=sid in selected_set,
        )
        for sid in ranked
    ]
    rows.extend(
        ReliabilityRow(
            sample_id=sid,
            confidence=conf,
            semantic_distance=None,
            reliability=None,
            candidate=False,
            selected=False,
        )
        for sid, conf in by_conf[k:]
        if sid not in candidate_set
    )
    return ReliabilityResult(
        rows=tuple(rows),
        selected=tuple(selected),
        exclusion_update=frozenset(selected),
        round=round_index,
    )

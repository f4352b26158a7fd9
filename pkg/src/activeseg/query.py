"""Sample query scoring: knowledge divergence, segmentation difficulty, fusion.

The query criterion combines two per-sample metrics computed on the
unlabeled pool:

* DKD (diversified knowledge divergence): how far a sample's current
  embedding drifted from its pre-adaptation embedding (PAKD), down-weighted
  for samples that look like already-divergent ones (PD).
* ASD (anatomical segmentation difficulty): predictive entropy restricted
  to a temperature-tolerant foreground mask.

Both columns are min-max normalized, quantile transformed, and summed into
a selection score in [0, 2]; the top-budget samples form the query batch.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DomainError,
    EmptyInputError,
    ExhaustionError,
    FormatError,
    PairingError,
)
from .kernels import cosine_distance, masked_entropy, minmax_normalize, quantile_transform
from .types import BinaryMask, EmbeddingVec, ProbVolume, ScoreVector

log = logging.getLogger(__name__)

SCORE_TABLE_HEADER = ("sample_id", "pakd", "pd", "dkd", "asd", "dkd_qt", "asd_qt", "q", "round")

TAU_FIRST_ROUND = 3.0
TAU_LAST_ROUND = 1.5


def format_float(value: float) -> str:
    """CSV float formatting: 9 significant digits, round-trip stable."""
    return format(float(value), ".9g")


def temperature(round_index: int, max_rounds: int) -> float:
    """Background-tolerance temperature for a given round.

    Decays logarithmically from 3.0 in round 1 to 1.5 in the final round.
    A single-round schedule degenerates to the most tolerant value 3.0.
    """
    if max_rounds < 1:
        raise DomainError(f"max_rounds must be >= 1, got {max_rounds}")
    if round_index < 1 or round_index > max_rounds:
        raise DomainError(
            f"round {round_index} outside schedule range [1, {max_rounds}]"
        )
    if max_rounds == 1:
        return TAU_FIRST_ROUND
    return -1.5 * (math.log(round_index) / math.log(max_rounds)) + 3.0


@dataclass(frozen=True)
class TemperatureSchedule:
    """Callable wrapper fixing the maximal round count."""

    max_round: int

    def __post_init__(self) -> None:
        if self.max_round < 1:
            raise DomainError(f"max_round must be >= 1, got {self.max_round}")

    def __call__(self, round_index: int) -> float:
        return temperature(round_index, self.max_round)


def pakd(initial: EmbeddingVec, current: EmbeddingVec) -> float:
    """Divergence between a sample's pre-adaptation and current embeddings.

    Large values mean the encoder's view of the sample changed a lot during
    adaptation, i.e. the sample carries knowledge the pre-trained encoder
    did not have.
    """
    if initial.sample_id != current.sample_id:
        raise PairingError(
            f"embedding pair refers to different samples: "
            f"{initial.sample_id!r} vs {current.sample_id!r}"
        )
    if initial.encoder_round != 0:
        raise PairingError(
            f"reference embedding for {initial.sample_id!r} must come from the "
            f"pre-adaptation encoder (round 0), got round {initial.encoder_round}"
        )
    return cosine_distance(initial, current)


def pd_scores(
    embeddings: Sequence[EmbeddingVec] | Iterable[EmbeddingVec],
    pakd_scores: ScoreVector,
) -> ScoreVector:
    """Pairwise dissimilarity of each sample to all higher-PAKD samples.

    Samples are ranked by PAKD descending (ties broken by ascending
    sample_id). The sample at rank c gets the weighted mean cosine distance
    to samples at ranks c-1 .. 1, where the weight equals the rank gap, so
    resemblance to the most divergent samples is penalized hardest. The
    top-ranked sample has an empty reference set and scores 1.0, which keeps
    its divergence fully credited in the fused product.
    """
    by_id = {e.sample_id: e for e in embeddings}
    missing = [sid for sid in pakd_scores.ids if sid not in by_id]
    if missing:
        raise PairingError(f"no current-round embedding for samples: {sorted(missing)}")
    ranked = sorted(pakd_scores, key=lambda item: (-item[1], item[0]))
    vectors = [by_id[sid] for sid, _ in ranked]
    out: dict[str, float] = {}
    for c, (sid, _) in enumerate(ranked, start=1):
        if c == 1:
            out[sid] = 1.0
            continue
        num = 0.0
        den = 0.0
        for k in range(1, c):
            dist = cosine_distance(vectors[c - 1], vectors[c - 1 - k])
            num += k * dist
            den += k
        out[sid] = num / den
    return ScoreVector.from_mapping(out)


def dkd(pakd_scores: ScoreVector, pd_vals: ScoreVector) -> ScoreVector:
    """Per-sample product of knowledge divergence and pairwise dissimilarity."""
    if set(pakd_scores.ids) != set(pd_vals.ids):
        raise PairingError("pakd and pd score vectors cover different samples")
    pd_map = pd_vals.as_dict()
    return ScoreVector.from_pairs((sid, v * pd_map[sid]) for sid, v in pakd_scores)


def foreground_mask(volume: ProbVolume, tau: float) -> BinaryMask:
    """Foreground mask after dividing the background probability by tau.

    A voxel is foreground when its tolerance-scaled background probability is
    strictly below the largest foreground-class probability; ties count as
    background. Larger tau lowers the scaled background, so the mask grows
    monotonically with tau.
    """
    if volume.num_classes < 2:
        raise DomainError("foreground mask needs at least one non-background class")
    if tau < 1.0:
        raise DomainError(f"tolerance temperature must be >= 1, got {tau}")
    background = volume.probs[0] / tau
    fg_max = volume.probs[1:].max(axis=0)
    return BinaryMask((background < fg_max).astype(np.float64))


def asd_at_temperature(volume: ProbVolume, tau: float) -> float:
    """Segmentation-difficulty entropy for an explicit tolerance value."""
    return masked_entropy(volume, foreground_mask(volume, tau))


def asd(volume: ProbVolume, round_index: int, max_rounds: int) -> float:
    """Entropy of the predicted probabilities over tolerant foreground voxels.

    The foreground tolerance follows the round schedule: early rounds mask
    generously (poorly trained background predictions are distrusted), late
    rounds tighten to the model's own foreground.
    """
    return asd_at_temperature(volume, temperature(round_index, max_rounds))


@dataclass(frozen=True)
class QueryRow:
    """One sample's full query-score record for one round.

    ``fusion_tol`` bounds |q - (dkd_qt + asd_qt)|: exact rows use 1e-12,
    rows parsed back from 9-significant-digit CSV get a correspondingly
    looser bound.
    """

    sample_id: str
    pakd: float
    pd: float
    dkd: float
    asd: float
    dkd_qt: float
    asd_qt: float
    q: float
    round: int
    fusion_tol: float = dataclasses.field(default=1e-12, compare=False, repr=False)

    def __post_init__(self) -> None:
        for name in ("pakd", "pd", "dkd", "asd", "dkd_qt", "asd_qt", "q"):
            if not np.isfinite(getattr(self, name)):
                raise DomainError(f"{name} for {self.sample_id!r} is not finite")
        if abs(self.q - (self.dkd_qt + self.asd_qt)) > self.fusion_tol:
            raise DomainError(
                f"q for {self.sample_id!r} is not the sum of its transformed columns"
            )


class QueryScores:
    """Query-score table for one round, sortable and CSV round-trippable."""

    def __init__(self, rows: Iterable[QueryRow]):
        self.rows: tuple[QueryRow, ...] = tuple(rows)
        ids = [r.sample_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise PairingError("duplicate sample ids in query score table")
        self._by_id = {r.sample_id: r for r in self.rows}

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, sample_id: str) -> QueryRow:
        return self._by_id[sample_id]

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._by_id

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(r.sample_id for r in self.rows)

    def q_scores(self) -> ScoreVector:
        return ScoreVector.from_pairs((r.sample_id, r.q) for r in self.rows)

    def ranked(self) -> list[QueryRow]:
        return sorted(self.rows, key=lambda r: (-r.q, r.sample_id))

    def write_csv(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(SCORE_TABLE_HEADER)
            for r in self.ranked():
                writer.writerow(
                    [
                        r.sample_id,
                        format_float(r.pakd),
                        format_float(r.pd),
                        format_float(r.dkd),
                        format_float(r.asd),
                        format_float(r.dkd_qt),
                        format_float(r.asd_qt),
                        format_float(r.q),
                        str(r.round),
                    ]
                )
        os.replace(tmp, path)

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "QueryScores":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != SCORE_TABLE_HEADER:
                raise FormatError(f"{path}: unexpected score table header {header}")
            rows = []
            for rec in reader:
                if len(rec) != len(SCORE_TABLE_HEADER):
                    raise FormatError(f"{path}: malformed row {rec}")
                rows.append(
                    QueryRow(
                        sample_id=rec[0],
                        pakd=float(rec[1]),
                        pd=float(rec[2]),
                        dkd=float(rec[3]),
                        asd=float(rec[4]),
                        dkd_qt=float(rec[5]),
                        asd_qt=float(rec[6]),
                        q=float(rec[7]),
                        round=int(rec[8]),
                        # the three columns were rounded to 9 significant
                        # digits independently
                        fusion_tol=1e-7,
                    )
                )
        return cls(rows)


def query_criterion(
    dkd_scores: ScoreVector,
    asd_scores: ScoreVector,
    *,
    pakd_scores: ScoreVector | None = None,
    pd_vals: ScoreVector | None = None,
    round_index: int = 0,
) -> QueryScores:
    """Fuse divergence and difficulty columns into the selection score q.

    Each column is min-max normalized then quantile transformed
    independently, so q = dkd_qt + asd_qt lies in [0, 2] and depends on the
    two rank orders only. Raw pakd/pd columns are carried through for the
    score table when provided.
    """
    if len(dkd_scores) == 0 or len(asd_scores) == 0:
        raise EmptyInputError("query criterion needs at least one sample")
    if set(dkd_scores.ids) != set(asd_scores.ids):
        raise PairingError("dkd and asd score vectors cover different samples")
    dkd_qt = quantile_transform(minmax_normalize(dkd_scores)).as_dict()
    asd_qt = quantile_transform(minmax_normalize(asd_scores)).as_dict()
    asd_map = asd_scores.as_dict()
    pakd_map = pakd_scores.as_dict() if pakd_scores is not None else {}
    pd_map = pd_vals.as_dict() if pd_vals is not None else {}
    rows = []
    for sid, dkd_val in dkd_scores:
        rows.append(
            QueryRow(
                sample_id=sid,
                pakd=pakd_map.get(sid, 0.0),
                pd=pd_map.get(sid, 0.0),
                dkd=dkd_val,
                asd=asd_map[sid],
                dkd_qt=dkd_qt[sid],
                asd_qt=asd_qt[sid],
                q=dkd_qt[sid] + asd_qt[sid],
                round=round_index,
            )
        )
    return QueryScores(rows)


PLAIN_SCORE_HEADER = ("sample_id", "score", "round")


def write_score_vector_csv(
    scores: ScoreVector, path: str | os.PathLike, round_index: int
) -> None:
    """Generic per-sample score table (used by baseline strategies)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    ranked = sorted(scores, key=lambda item: (-item[1], item[0]))
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PLAIN_SCORE_HEADER)
        for sid, value in ranked:
            writer.writerow([sid, format_float(value), str(round_index)])
    os.replace(tmp, path)


def read_score_vector_csv(path: str | os.PathLike) -> tuple[ScoreVector, int]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != PLAIN_SCORE_HEADER:
            raise FormatError(f"{path}: unexpected score header {header}")
        pairs = []
        round_index = 0
        for rec in reader:
            if len(rec) != len(PLAIN_SCORE_HEADER):
                raise FormatError(f"{path}: malformed row {rec}")
            pairs.append((rec[0], float(rec[1])))
            round_index = int(rec[2])
    return ScoreVector.from_pairs(pairs), round_index


def select_batch(
    scores: QueryScores | ScoreVector,
    n_b: int,
    excluded: frozenset[str] | set[str] = frozenset(),
) -> list[str]:
    """Pick the top-n_b eligible samples by score, ties by ascending id.

    Excluded ids never appear in the result. If fewer eligible samples exist
    than the budget asks for, all of them are returned and the shortfall is
    logged; an empty eligible set is an error.
    """
    if n_b < 1:
        raise DomainError(f"batch size must be >= 1, got {n_b}")
    vec = scores.q_scores() if isinstance(scores, QueryScores) else scores
    eligible = [(sid, v) for sid, v in vec if sid not in excluded]
    if not eligible:
        raise ExhaustionError("no eligible samples remain for selection")
    eligible.sort(key=lambda item: (-item[1], item[0]))
    if len(eligible) < n_b:
        log.warning(
            "selection shortfall: budget %d but only %d eligible samples",
            n_b,
            len(eligible),
        )
    return [sid for sid, _ in eligible[:n_b]]

"""Round orchestration: query, annotate, fine-tune, pseudo-label, repeat.

One round moves the selected batch from the unlabeled to the labeled set,
fine-tunes on all labels, optionally runs the reliability selection and a
semi-supervised fine-tune on labeled plus pseudo-labeled samples, and
persists a round manifest atomically. A crash between any two stages loses
at most the in-flight round: resuming from the last manifest re-executes it
deterministically, reproducing the same artifacts byte for byte.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .adapters import ModelHandle, OracleAdapter, TrainerAdapter
from .errors import (
    BudgetError,
    DomainError,
    ExhaustionError,
    ValidationError,
)
from .manifest import DatasetManifest, RoundManifest, atomic_write_json, read_json, sha256_of
from .query import select_batch, write_score_vector_csv
from .reliability import SelectionConfig, confidence, select_reliable
from .strategies import Strategy, StrategyScores, get_strategy
from .tensorfile import read_tensor, write_tensor
from .types import EmbeddingVec, ProbVolume, ScoreVector

StageHook = Callable[[int, str], None]

REFERENCE_EMBED_DIR = "embed0"
MODEL_DIR = "models"
PSEUDO_DIR = "pseudo"

CONFIG_KEYS = (
    "n_b",
    "r_max",
    "tau_c",
    "seed",
    "semi_supervised",
    "confidence_variant",
    "epochs",
    "fixed_tau",
    "initial_labeled",
    "strategy",
    "pool",
)


@dataclass(frozen=True)
class RunConfig:
    """Everything one orchestrated run needs beyond the dataset itself."""

    n_b: int
    r_max: int
    tau_c: float = 2.0
    seed: int = 0
    semi_supervised: bool = True
    confidence_variant: str = "mean"
    epochs: int = 30
    init_epochs: int | None = None  # one-shot fit budget; defaults to epochs // 4
    fixed_tau: float | None = None
    initial_labeled: str | None = None
    strategy: str = "ASFDA"
    pool: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.n_b < 1:
            raise DomainError(f"n_b must be >= 1, got {self.n_b}")
        if self.r_max < 1:
            raise DomainError(f"r_max must be >= 1, got {self.r_max}")

    @property
    def initial_fit_epochs(self) -> int:
        """One-shot fit budget; a full round budget on a single sample
        overfits the encoder before the first query round."""
        if self.init_epochs is not None:
            return self.init_epochs
        return max(1, self.epochs // 4)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, **overrides: Any) -> "RunConfig":
        base = dict(
            n_b=int(manifest.config["n_b"]),
            r_max=int(manifest.config["r_max"]),
            tau_c=float(manifest.config["tau_c"]),
            seed=int(manifest.config["seed"]),
            semi_supervised=bool(manifest.config["semi_supervised"]),
            confidence_variant=str(manifest.config["confidence_variant"]),
        )
        base.update(overrides)
        if base.get("pool") is not None:
            base["pool"] = tuple(base["pool"])
        return cls(**base)

    def to_json(self) -> dict[str, Any]:
        doc = dataclasses.asdict(self)
        doc["pool"] = list(self.pool) if self.pool is not None else None
        return doc


@dataclass(frozen=True)
class RoundState:
    """Set bookkeeping after ``r`` completed rounds (0 = just initialized)."""

    r: int
    r_max: int
    n_b: int
    labeled_ids: tuple[str, ...]
    unlabeled_ids: tuple[str, ...]
    pseudo_ids: tuple[str, ...]
    excluded_ids: frozenset[str]
    rng_seed: int
    model_ref: str

    @property
    def n_al(self) -> int:
        return self.n_b * self.r_max

    @property
    def n_su(self) -> int:
        """Pseudo-label budget used by the round that produced this state."""
        return self.n_b * self.r

    def validate(self) -> None:
        labeled = set(self.labeled_ids)
        unlabeled = set(self.unlabeled_ids)
        if labeled & unlabeled:
            raise ValidationError(
                f"labeled/unlabeled overlap: {sorted(labeled & unlabeled)}"
            )
        if not set(self.pseudo_ids) <= unlabeled:
            raise ValidationError("pseudo-labeled ids must stay in the unlabeled set")
        if len(labeled) != len(self.labeled_ids) or len(unlabeled) != len(self.unlabeled_ids):
            raise ValidationError("duplicate ids in round state")


class RoundContext:
    """Lazy, memoized access to the per-round tensors a strategy may need."""

    def __init__(
        self,
        orchestrator: "Orchestrator",
        model: ModelHandle,
        round_index: int,
        labeled: Sequence[str],
        unlabeled: Sequence[str],
    ):
        self._orch = orchestrator
        self._model = model
        self.round_index = round_index
        self.max_rounds = orchestrator.config.r_max
        self.n_b = orchestrator.config.n_b
        self.seed = orchestrator.config.seed
        self.fixed_tau = orchestrator.config.fixed_tau
        self._labeled = tuple(labeled)
        self._unlabeled = tuple(unlabeled)
        self._initial: dict[str, EmbeddingVec] | None = None
        self._current: dict[str, EmbeddingVec] | None = None
        self._probs: dict[str, ProbVolume] | None = None
        self._anchors: list[EmbeddingVec] | None = None

    def unlabeled_ids(self) -> tuple[str, ...]:
        return self._unlabeled

    def initial_embeddings(self) -> Mapping[str, EmbeddingVec]:
        if self._initial is None:
            self._initial = {
                sid: self._orch.read_reference_embedding(sid) for sid in self._unlabeled
            }
        return self._initial

    def current_embeddings(self) -> Mapping[str, EmbeddingVec]:
        if self._current is None:
            self._current = {
                sid: self._orch.embed(self._model, sid, self.round_index)
                for sid in self._unlabeled
            }
        return self._current

    def prob_volumes(self) -> Mapping[str, ProbVolume]:
        if self._probs is None:
            self._probs = {sid: self._orch.predict(self._model, sid) for sid in self._unlabeled}
        return self._probs

    def labeled_embeddings(self) -> list[EmbeddingVec]:
        if self._anchors is None:
            self._anchors = [
                self._orch.embed(self._model, sid, self.round_index) for sid in self._labeled
            ]
        return self._anchors


class Orchestrator:
    """Runs the full iterative adaptation loop over one dataset manifest."""

    def __init__(
        self,
        manifest: DatasetManifest,
        run_dir: str | Path,
        trainer: TrainerAdapter,
        oracle: OracleAdapter,
        config: RunConfig,
        stage_hook: StageHook | None = None,
    ):
        self.manifest = manifest
        self.run_dir = Path(run_dir)
        self.trainer = trainer
        self.oracle = oracle
        self.config = config
        self.stage_hook = stage_hook
        self.strategy: Strategy = get_strategy(config.strategy)
        self._samples = manifest.by_id()
        self.pool: tuple[str, ...] = (
            tuple(config.pool)
            if config.pool is not None
            else tuple(manifest.ids_for_domain("target"))
        )
        unknown = [sid for sid in self.pool if sid not in self._samples]
        if unknown:
            raise ValidationError(f"pool references unknown samples: {unknown}")

    # ----------------------------------------------------------- paths

    def round_manifest_path(self, round_index: int) -> Path:
        return self.run_dir / f"round_{round_index:04d}.json"

    def score_table_path(self, round_index: int) -> Path:
        return self.run_dir / f"scores_round_{round_index:04d}.csv"

    def reliability_path(self, round_index: int) -> Path:
        return self.run_dir / f"reliability_round_{round_index:04d}.csv"

    def model_path(self, round_index: int, stage1: bool = False) -> Path:
        suffix = "_stage1" if stage1 else ""
        return self.run_dir / MODEL_DIR / f"round_{round_index:04d}{suffix}.json"

    def reference_embedding_path(self, sample_id: str) -> Path:
        return self.run_dir / REFERENCE_EMBED_DIR / f"{sample_id}.asft"

    def pseudo_label_path(self, sample_id: str, round_index: int) -> Path:
        return self.run_dir / PSEUDO_DIR / f"{sample_id}_round_{round_index:04d}.asft"

    def image_path(self, sample_id: str) -> str:
        return str(self.manifest.resolve(self._samples[sample_id].image))

    # ----------------------------------------------------------- tensors

    def read_reference_embedding(self, sample_id: str) -> EmbeddingVec:
        values = read_tensor(self.reference_embedding_path(sample_id))
        return EmbeddingVec(values.astype(np.float64), sample_id, 0)

    def embed(self, model: ModelHandle, sample_id: str, encoder_round: int) -> EmbeddingVec:
        return self.trainer.embed(model, self.image_path(sample_id), sample_id, encoder_round)

    def predict(self, model: ModelHandle, sample_id: str) -> ProbVolume:
        return self.trainer.predict(model, self.image_path(sample_id), sample_id)

    def _labeled_pairs(self, labeled: Sequence[str]) -> list[tuple[str, str]]:
        annotations = self.oracle.annotate(list(labeled))
        return [(self.image_path(sid), annotations[sid]) for sid in labeled]

    def _model_handle(self, ref: str) -> ModelHandle:
        return ModelHandle(ref=str(self.run_dir / ref))

    def _stage(self, round_index: int, name: str) -> None:
        if self.stage_hook is not None:
            self.stage_hook(round_index, name)

    # ----------------------------------------------------------- lifecycle

    def initialize(self) -> RoundState:
        """One-shot initialization: reference embeddings, first label, first fit."""
        cfg = self.config
        needed = 1 + cfg.n_b * cfg.r_max
        if len(self.pool) < needed:
            raise BudgetError(
                f"target pool has {len(self.pool)} samples but the protocol needs "
                f"{needed} (1 + n_b * r_max)"
            )
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / REFERENCE_EMBED_DIR).mkdir(exist_ok=True)
        (self.run_dir / MODEL_DIR).mkdir(exist_ok=True)
        (self.run_dir / PSEUDO_DIR).mkdir(exist_ok=True)
        atomic_write_json(self.config.to_json(), self.run_dir / "run.json")

        self._stage(0, "pretrained")
        pre_model = self.trainer.pretrained()

        # reference embeddings for the whole pool, cached before any fine-tuning
        self._stage(0, "embed_reference")
        for sid in self.pool:
            vec = self.trainer.embed(pre_model, self.image_path(sid), sid, 0)
            write_tensor(vec.values.astype(np.float32), self.reference_embedding_path(sid))

        self._stage(0, "annotate_initial")
        first = cfg.initial_labeled if cfg.initial_labeled is not None else min(self.pool)
        if first not in self.pool:
            raise ValidationError(f"initial labeled sample {first!r} is not in the pool")

        self._stage(0, "fit_initial")
        model_rel = f"{MODEL_DIR}/round_0000.json"
        self.trainer.fit(
            labeled=self._labeled_pairs([first]),
            pseudo=[],
            epochs=cfg.initial_fit_epochs,
            seed=cfg.seed,
            init=pre_model,
            model_out=str(self.run_dir / model_rel),
        )

        state = RoundState(
            r=0,
            r_max=cfg.r_max,
            n_b=cfg.n_b,
            labeled_ids=(first,),
            unlabeled_ids=tuple(sid for sid in self.pool if sid != first),
            pseudo_ids=(),
            excluded_ids=frozenset(),
            rng_seed=cfg.seed,
            model_ref=model_rel,
        )
        state.validate()
        self._stage(0, "write_manifest")
        self._write_round_manifest(state, score_table=None, reliability=None)
        return state

    def run_round(self, state: RoundState) -> RoundState:
        """Execute round state.r + 1 and persist the resulting state."""
        cfg = self.config
        if state.r >= cfg.r_max:
            raise DomainError(f"all {cfg.r_max} rounds already completed")
        if not state.unlabeled_ids:
            raise ExhaustionError("unlabeled pool is empty")
        state.validate()
        r = state.r + 1
        model = self._model_handle(state.model_ref)
        ctx = RoundContext(self, model, r, state.labeled_ids, state.unlabeled_ids)

        self._stage(r, "embed_unlabeled")
        self._stage(r, "score")
        res: StrategyScores = self.strategy.score(ctx)
        score_rel = self.score_table_path(r).name
        if res.table is not None:
            res.table.write_csv(self.score_table_path(r))
        else:
            write_score_vector_csv(res.scores, self.score_table_path(r), r)

        self._stage(r, "select_batch")
        batch = select_batch(res.scores, cfg.n_b, excluded=state.excluded_ids)

        self._stage(r, "annotate")
        self.oracle.annotate(batch)

        self._stage(r, "update_sets")
        labeled = state.labeled_ids + tuple(batch)
        unlabeled = tuple(sid for sid in state.unlabeled_ids if sid not in set(batch))

        self._stage(r, "fit_supervised")
        labeled_pairs = self._labeled_pairs(labeled)
        run_semi = cfg.semi_supervised and len(unlabeled) > 0
        stage1_rel = (
            f"{MODEL_DIR}/{self.model_path(r, stage1=True).name}"
            if run_semi
            else f"{MODEL_DIR}/{self.model_path(r).name}"
        )
        stage1 = self.trainer.fit(
            labeled=labeled_pairs,
            pseudo=[],
            epochs=cfg.epochs,
            seed=cfg.seed,
            init=model,
            model_out=str(self.run_dir / stage1_rel),
        )

        pseudo_ids: tuple[str, ...] = ()
        excluded = state.excluded_ids
        reliability_rel = None
        model_rel = stage1_rel
        if run_semi:
            n_su = cfg.n_b * r
            self._stage(r, "select_reliable")
            confidences = ScoreVector.from_pairs(
                (sid, confidence(self.predict(stage1, sid), cfg.confidence_variant))
                for sid in unlabeled
            )
            embeddings = {sid: self.embed(stage1, sid, r) for sid in unlabeled}
            anchors = [self.embed(stage1, sid, r) for sid in labeled]
            selection = select_reliable(
                confidences,
                embeddings,
                SelectionConfig(
                    n_su=n_su,
                    n_unlabeled=len(unlabeled),
                    tau_c=cfg.tau_c,
                    confidence_variant=cfg.confidence_variant,
                ),
                anchors,
                round_index=r,
            )
            selection.write_csv(self.reliability_path(r))
            reliability_rel = self.reliability_path(r).name

            self._stage(r, "pseudo_label")
            pseudo_pairs = []
            for sid in selection.selected:
                labels = self.predict(stage1, sid).probs.argmax(axis=0)
                path = self.pseudo_label_path(sid, r)
                write_tensor(labels.astype(np.float32), path)
                pseudo_pairs.append((self.image_path(sid), str(path)))

            self._stage(r, "fit_semisup")
            model_rel = f"{MODEL_DIR}/{self.model_path(r).name}"
            self.trainer.fit(
                labeled=labeled_pairs,
                pseudo=pseudo_pairs,
                epochs=cfg.epochs,
                seed=cfg.seed,
                init=stage1,
                model_out=str(self.run_dir / model_rel),
            )

            self._stage(r, "extend_exclusions")
            pseudo_ids = selection.selected
            excluded = excluded | selection.exclusion_update

        new_state = RoundState(
            r=r,
            r_max=cfg.r_max,
            n_b=cfg.n_b,
            labeled_ids=labeled,
            unlabeled_ids=unlabeled,
            pseudo_ids=pseudo_ids,
            excluded_ids=excluded,
            rng_seed=cfg.seed,
            model_ref=model_rel,
        )
        new_state.validate()
        self._stage(r, "write_manifest")
        self._write_round_manifest(new_state, score_table=score_rel, reliability=reliability_rel)
        return new_state

    def run_to_completion(
        self,
        state: RoundState | None = None,
        round_hook: Callable[["Orchestrator", RoundState], None] | None = None,
    ) -> RoundState:
        """Resume (or initialize) and loop until r_max or pool exhaustion."""
        if state is None:
            state = self.latest_state()
        if state is None:
            state = self.initialize()
        while state.r < self.config.r_max and state.unlabeled_ids:
            state = self.run_round(state)
            if round_hook is not None:
                round_hook(self, state)
        return state

    # ----------------------------------------------------------- persistence

    def _write_round_manifest(
        self, state: RoundState, score_table: str | None, reliability: str | None
    ) -> None:
        checksums = {"model": sha256_of(self.run_dir / state.model_ref)}
        if score_table is not None:
            checksums["score_table"] = sha256_of(self.run_dir / score_table)
        if reliability is not None:
            checksums["reliability"] = sha256_of(self.run_dir / reliability)
        doc = RoundManifest(
            round=state.r,
            labeled=state.labeled_ids,
            unlabeled=state.unlabeled_ids,
            pseudo=state.pseudo_ids,
            excluded=tuple(sorted(state.excluded_ids)),
            score_table_path=score_table,
            model_ref=state.model_ref,
            checksums=checksums,
        )
        doc.write(self.round_manifest_path(state.r))

    def latest_state(self) -> RoundState | None:
        """Load the most recent persisted round, verifying the run config."""
        if not self.run_dir.is_dir():
            return None
        manifests = sorted(self.run_dir.glob("round_[0-9][0-9][0-9][0-9].json"))
        if not manifests:
            return None
        run_json = self.run_dir / "run.json"
        if run_json.is_file():
            stored = read_json(run_json)
            if stored != self.config.to_json():
                raise ValidationError(
                    "run directory was produced with a different configuration; "
                    "refusing to resume"
                )
        doc = RoundManifest.load(manifests[-1])
        state = RoundState(
            r=doc.round,
            r_max=self.config.r_max,
            n_b=self.config.n_b,
            labeled_ids=doc.labeled,
            unlabeled_ids=doc.unlabeled,
            pseudo_ids=doc.pseudo,
            excluded_ids=frozenset(doc.excluded),
            rng_seed=self.config.seed,
            model_ref=doc.model_ref,
        )
        state.validate()
        return state

"""Benchmark experiment runner: strategies x seeds x budgets on one dataset.

Every (strategy, seed) pair gets an isolated orchestrated run; after each
round the round's model is evaluated on a held-out target split that is
never queryable. Per-seed variation comes from the held-out split, the
initial labeled sample, and the RAND draws; scoring itself is deterministic.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapters import FileOracle, ModelHandle, ToyTrainerAdapter
from .errors import ValidationError
from .evaluation import mann_whitney_u, mean_foreground_dice, per_class_dice
from .manifest import DatasetManifest
from .orchestrator import Orchestrator, RoundState, RunConfig
from .query import format_float
from .tensorfile import read_tensor

RESULTS_BASE_HEADER = ("strategy", "seed", "budget", "mean_dice")
SUMMARY_HEADER = ("strategy", "budget", "n_seeds", "dice_mean", "dice_sd")
ANALYSIS_HEADER = ("strategy", "seed", "round", "sample_id", "dice", "selected")

SEMI_SUPERVISED_STRATEGIES = ("ASFDA",)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    out_dir: str
    strategies: tuple[str, ...] = ("RAND", "DKD+ASD", "ASFDA")
    seeds: tuple[int, ...] = tuple(range(10))
    budgets: tuple[float, ...] = (0.05, 0.10, 0.15)
    epochs: int = 30
    eval_fraction: float = 0.25
    fixed_tau: float | None = None
    semi_override: bool | None = None  # force the semi-supervised stage on/off
    pseudo_weight: float = 0.5

    def __post_init__(self) -> None:
        if not self.strategies or not self.seeds or not self.budgets:
            raise ValidationError("strategies, seeds and budgets must be non-empty")
        if sorted(self.budgets) != list(self.budgets):
            raise ValidationError("budgets must be increasing")


def derive_protocol(num_target: int, budgets: Sequence[float]) -> tuple[int, int]:
    """Map budget fractions onto (n_b, r_max); budgets must be n_b-spaced."""
    r_max = len(budgets)
    n_b = round(budgets[0] * num_target)
    if n_b < 1:
        raise ValidationError(f"first budget {budgets[0]} selects no samples")
    for i, b in enumerate(budgets, start=1):
        if round(b * num_target) != n_b * i:
            raise ValidationError(
                f"budget {b} is not {i} equal batches of {n_b} over {num_target} samples"
            )
    return n_b, r_max


def split_pool(
    target_ids: Sequence[str], dataset_seed: int, run_seed: int, eval_fraction: float
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Seeded held-out split; the pool keeps the manifest order."""
    ids = list(target_ids)
    k = round(eval_fraction * len(ids))
    rng = np.random.default_rng([dataset_seed, run_seed, 101])
    held = set(rng.choice(ids, size=k, replace=False)) if k else set()
    pool = tuple(sid for sid in ids if sid not in held)
    return pool, tuple(sorted(held))


def initial_sample(pool: Sequence[str], dataset_seed: int, run_seed: int) -> str:
    rng = np.random.default_rng([dataset_seed, run_seed, 202])
    return pool[int(rng.integers(len(pool)))]


def build_toy_trainer(
    manifest: DatasetManifest,
    pretrained_path: str | os.PathLike,
    epochs: int = 30,
    pseudo_weight: float = 0.5,
) -> ToyTrainerAdapter:
    source_pairs = [
        (str(manifest.resolve(s.image)), str(manifest.resolve(s.label)))
        for s in manifest.samples
        if s.domain == "source" and s.label is not None
    ]
    return ToyTrainerAdapter(
        source_pairs,
        str(pretrained_path),
        pretrain_epochs=epochs,
        pseudo_weight=pseudo_weight,
    )


def build_oracle(manifest: DatasetManifest) -> FileOracle:
    return FileOracle(
        {
            s.id: str(manifest.resolve(s.label))
            for s in manifest.samples
            if s.label is not None
        }
    )


@dataclass
class RunOutcome:
    strategy: str
    seed: int
    results: list[dict] = field(default_factory=list)  # one per round/budget
    analysis: list[dict] = field(default_factory=list)  # selected-vs-unselected rows


def _evaluate(
    trainer: ToyTrainerAdapter,
    manifest: DatasetManifest,
    model: ModelHandle,
    sample_ids: Sequence[str],
) -> list[tuple[str, float, list[float]]]:
    samples = manifest.by_id()
    out = []
    for sid in sample_ids:
        pred = trainer.predict(model, str(manifest.resolve(samples[sid].image)), sid)
        pred_labels = pred.probs.argmax(axis=0)
        truth = read_tensor(manifest.resolve(samples[sid].label)).astype(np.int64)
        classes = pred.num_classes
        out.append(
            (
                sid,
                mean_foreground_dice(pred_labels, truth, classes),
                per_class_dice(pred_labels, truth, classes),
            )
        )
    return out


def run_single(
    manifest: DatasetManifest,
    cfg: ExperimentConfig,
    strategy: str,
    seed: int,
    run_dir: Path,
    trainer: ToyTrainerAdapter,
) -> RunOutcome:
    """One orchestrated run plus per-round held-out evaluation."""
    target_ids = manifest.ids_for_domain("target")
    n_b, r_max = derive_protocol(len(target_ids), cfg.budgets)
    pool, held_out = split_pool(
        target_ids, int(manifest.config["seed"]), seed, cfg.eval_fraction
    )
    first = initial_sample(pool, int(manifest.config["seed"]), seed)
    semi = strategy in SEMI_SUPERVISED_STRATEGIES
    if cfg.semi_override is not None:
        semi = cfg.semi_override
    run_config = RunConfig.from_manifest(
        manifest,
        strategy=strategy,
        seed=seed,
        n_b=n_b,
        r_max=r_max,
        semi_supervised=semi,
        epochs=cfg.epochs,
        fixed_tau=cfg.fixed_tau,
        initial_labeled=first,
        pool=pool,
    )
    orchestrator = Orchestrator(
        manifest, run_dir, trainer, build_oracle(manifest), run_config
    )
    outcome = RunOutcome(strategy=strategy, seed=seed)

    def after_round(orch: Orchestrator, state: RoundState) -> None:
        model = ModelHandle(ref=str(orch.run_dir / state.model_ref))
        scored = _evaluate(trainer, manifest, model, held_out)
        mean_dice = float(np.mean([d for _, d, _ in scored]))
        per_class = np.mean([pc for _, _, pc in scored], axis=0)
        outcome.results.append(
            {
                "strategy": strategy,
                "seed": seed,
                "budget": 100.0 * n_b * state.r / len(target_ids),
                "mean_dice": mean_dice,
                "per_class": [float(v) for v in per_class],
            }
        )
        if semi:
            selected = set(state.pseudo_ids)
            for sid, dice_val, _ in _evaluate(trainer, manifest, model, state.unlabeled_ids):
                outcome.analysis.append(
                    {
                        "strategy": strategy,
                        "seed": seed,
                        "round": state.r,
                        "sample_id": sid,
                        "dice": dice_val,
                        "selected": sid in selected,
                    }
                )

    orchestrator.run_to_completion(round_hook=after_round)
    return outcome


def run_experiment(cfg: ExperimentConfig) -> dict[str, Path]:
    """Run the whole grid and write results.csv / summary.csv / analysis.csv."""
    manifest = DatasetManifest.load(cfg.dataset)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = build_toy_trainer(
        manifest, out / "pretrained_model.json", cfg.epochs, cfg.pseudo_weight
    )
    outcomes = []
    for strategy in cfg.strategies:
        for seed in cfg.seeds:
            run_dir = out / "runs" / f"{strategy.replace('+', 'x')}_s{seed}"
            outcomes.append(run_single(manifest, cfg, strategy, seed, run_dir, trainer))

    num_fg = len(outcomes[0].results[0]["per_class"]) if outcomes[0].results else 0
    results_path = out / "results.csv"
    _write_results(results_path, outcomes, num_fg)
    summary_path = out / "summary.csv"
    _write_summary(summary_path, outcomes)
    paths = {"results": results_path, "summary": summary_path}
    analysis_rows = [row for oc in outcomes for row in oc.analysis]
    if analysis_rows:
        analysis_path = out / "analysis.csv"
        _write_analysis(analysis_path, analysis_rows)
        paths["analysis"] = analysis_path
    return paths


def _write_results(path: Path, outcomes: Sequence[RunOutcome], num_fg: int) -> None:
    header = list(RESULTS_BASE_HEADER) + [f"dice_class_{c}" for c in range(1, num_fg + 1)]
    rows = sorted(
        (row for oc in outcomes for row in oc.results),
        key=lambda r: (r["strategy"], r["seed"], r["budget"]),
    )
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [
                    row["strategy"],
                    str(row["seed"]),
                    format_float(row["budget"]),
                    format_float(row["mean_dice"]),
                ]
                + [format_float(v) for v in row["per_class"]]
            )
    os.replace(tmp, path)


def _write_summary(path: Path, outcomes: Sequence[RunOutcome]) -> None:
    groups: dict[tuple[str, float], list[float]] = {}
    strategy_order: list[str] = []
    for oc in outcomes:
        if oc.strategy not in strategy_order:
            strategy_order.append(oc.strategy)
        for row in oc.results:
            groups.setdefault((row["strategy"], row["budget"]), []).append(row["mean_dice"])
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        for strategy in strategy_order:
            budgets = sorted(b for s, b in groups if s == strategy)
            for budget in budgets:
                vals = np.asarray(groups[(strategy, budget)])
                sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
                writer.writerow(
                    [
                        strategy,
                        format_float(budget),
                        str(vals.size),
                        format_float(float(vals.mean())),
                        format_float(sd),
                    ]
                )
    os.replace(tmp, path)


def _write_analysis(path: Path, rows: Sequence[dict]) -> None:
    ordered = sorted(
        rows, key=lambda r: (r["strategy"], r["seed"], r["round"], r["sample_id"])
    )
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANALYSIS_HEADER)
        for row in ordered:
            writer.writerow(
                [
                    row["strategy"],
                    str(row["seed"]),
                    str(row["round"]),
                    row["sample_id"],
                    format_float(row["dice"]),
                    "true" if row["selected"] else "false",
                ]
            )
    os.replace(tmp, path)


def read_results_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for rec in reader:
            row = {
                "strategy": rec["strategy"],
                "seed": int(rec["seed"]),
                "budget": float(rec["budget"]),
                "mean_dice": float(rec["mean_dice"]),
            }
            row["per_class"] = [
                float(v) for k, v in rec.items() if k.startswith("dice_class_")
            ]
            rows.append(row)
    return rows


def read_analysis_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {
                "strategy": rec["strategy"],
                "seed": int(rec["seed"]),
                "round": int(rec["round"]),
                "sample_id": rec["sample_id"],
                "dice": float(rec["dice"]),
                "selected": rec["selected"] == "true",
            }
            for rec in csv.DictReader(fh)
        ]


def selection_separation_pvalue(
    analysis_rows: Sequence[dict], strategy: str, seed: int, round_index: int
) -> float:
    """Two-sided rank-sum p for Dice of selected vs unselected unlabeled samples."""
    selected = [
        r["dice"]
        for r in analysis_rows
        if r["strategy"] == strategy
        and r["seed"] == seed
        and r["round"] == round_index
        and r["selected"]
    ]
    unselected = [
        r["dice"]
        for r in analysis_rows
        if r["strategy"] == strategy
        and r["seed"] == seed
        and r["round"] == round_index
        and not r["selected"]
    ]
    _, p = mann_whitney_u(selected, unselected)
    return p


def full_supervision_dice(
    manifest: DatasetManifest,
    cfg: ExperimentConfig,
    seed: int,
    trainer: ToyTrainerAdapter,
    model_out: str,
) -> float:
    """Upper-bound reference: fine-tune on every pool label, eval held-out."""
    target_ids = manifest.ids_for_domain("target")
    pool, held_out = split_pool(
        target_ids, int(manifest.config["seed"]), seed, cfg.eval_fraction
    )
    samples = manifest.by_id()
    pairs = [
        (str(manifest.resolve(samples[sid].image)), str(manifest.resolve(samples[sid].label)))
        for sid in pool
    ]
    model = trainer.fit(
        labeled=pairs,
        pseudo=[],
        epochs=cfg.epochs,
        seed=seed,
        init=trainer.pretrained(),
        model_out=model_out,
    )
    scored = _evaluate(trainer, manifest, model, held_out)
    return float(np.mean([d for _, d, _ in scored]))

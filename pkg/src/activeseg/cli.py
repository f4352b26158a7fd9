"""Command-line interface.

Subcommands: ``generate`` (synthetic dataset), ``score`` (query or
reliability scores from tensor files), ``select`` (batch from a score
table), ``round`` (initialize or advance one orchestrated round), ``run``
(full experiment grid), ``eval`` (Dice / rank-sum from tensors).

Exit codes: 0 success, 2 validation error, 3 adapter error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adapters import SubprocessTrainerAdapter
from .errors import (
    AdapterError,
    FileError,
    ValidationError,
)
from .evaluation import mann_whitney_u, mean_foreground_dice, per_class_dice
from .experiment import ExperimentConfig, build_oracle, build_toy_trainer, run_experiment, run_single
from .manifest import DatasetManifest, read_json
from .orchestrator import Orchestrator, RunConfig
from .query import (
    QueryScores,
    ScoreVector,
    asd_at_temperature,
    dkd,
    format_float,
    pakd,
    pd_scores,
    query_criterion,
    read_score_vector_csv,
    select_batch,
    temperature,
)
from .reliability import SelectionConfig, confidence, select_reliable
from .strategies import strategy_names
from .synth import SynthConfig, generate_dataset, load_synth_config, save_synth_config
from .tensorfile import read_tensor
from .types import EmbeddingVec, ProbVolume

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ADAPTER = 3
EXIT_IO = 4


def _load_embedding_dir(path: Path, encoder_round: int) -> dict[str, EmbeddingVec]:
    out = {}
    for f in sorted(path.glob("*.asft")):
        vec = read_tensor(f)
        out[f.stem] = EmbeddingVec(vec.astype(np.float64), f.stem, encoder_round)
    if not out:
        raise ValidationError(f"no .asft tensors found in {path}")
    return out


def _load_prob_dir(path: Path) -> dict[str, ProbVolume]:
    out = {}
    for f in sorted(path.glob("*.asft")):
        out[f.stem] = ProbVolume(read_tensor(f).astype(np.float64), f.stem)
    if not out:
        raise ValidationError(f"no .asft tensors found in {path}")
    return out


def cmd_generate(args: argparse.Namespace) -> int:
    if args.config:
        cfg = load_synth_config(args.config)
    else:
        cfg = SynthConfig()
    if args.seed is not None:
        cfg = SynthConfig(**{**vars(cfg), "seed": args.seed})
    out = Path(args.out)
    generate_dataset(cfg, out)
    save_synth_config(cfg, out / "synth_config.json")
    print(f"wrote dataset manifest to {out / 'dataset.json'}")
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.mode == "query":
        initial = _load_embedding_dir(Path(args.initial_dir), 0)
        current = _load_embedding_dir(Path(args.current_dir), args.round)
        probs = _load_prob_dir(Path(args.prob_dir))
        ids = sorted(initial)
        if set(ids) != set(current) or set(ids) != set(probs):
            raise ValidationError("initial/current/probability directories disagree on ids")
        pakd_vec = ScoreVector.from_pairs((sid, pakd(initial[sid], current[sid])) for sid in ids)
        pd_vec = pd_scores(list(current.values()), pakd_vec)
        dkd_vec = dkd(pakd_vec, pd_vec)
        tau = args.fixed_tau if args.fixed_tau is not None else temperature(args.round, args.max_rounds)
        asd_vec = ScoreVector.from_pairs(
            (sid, asd_at_temperature(probs[sid], tau)) for sid in ids
        )
        table = query_criterion(
            dkd_vec, asd_vec, pakd_scores=pakd_vec, pd_vals=pd_vec, round_index=args.round
        )
        table.write_csv(out)
    else:
        probs = _load_prob_dir(Path(args.prob_dir))
        embeddings = _load_embedding_dir(Path(args.embedding_dir), args.round)
        anchors = list(_load_embedding_dir(Path(args.anchor_dir), args.round).values())
        ids = sorted(probs)
        if set(ids) != set(embeddings):
            raise ValidationError("probability and embedding directories disagree on ids")
        conf = ScoreVector.from_pairs(
            (sid, confidence(probs[sid], args.confidence_variant)) for sid in ids
        )
        cfg = SelectionConfig(
            n_su=args.n_su,
            n_unlabeled=len(ids),
            tau_c=args.tau_c,
            confidence_variant=args.confidence_variant,
        )
        result = select_reliable(conf, embeddings, cfg, anchors, round_index=args.round)
        result.write_csv(out)
    print(f"wrote scores to {out}")
    return EXIT_OK


def cmd_select(args: argparse.Namespace) -> int:
    path = Path(args.scores)
    try:
        scores: QueryScores | ScoreVector = QueryScores.read_csv(path)
    except FileError:
        scores, _ = read_score_vector_csv(path)
    batch = select_batch(scores, args.n_b, excluded=set(args.exclude))
    for sid in batch:
        print(sid)
    if args.out:
        Path(args.out).write_text("".join(f"{sid}\n" for sid in batch), encoding="utf-8")
    return EXIT_OK


def _orchestrator_from_args(args: argparse.Namespace) -> Orchestrator:
    manifest = DatasetManifest.load(args.dataset)
    overrides: dict = {"strategy": args.strategy}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_semi:
        overrides["semi_supervised"] = False
    if args.confidence_variant:
        overrides["confidence_variant"] = args.confidence_variant
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    run_dir = Path(args.out)
    run_json = run_dir / "run.json"
    if run_json.is_file():
        # resuming: reuse the stored configuration verbatim
        stored = read_json(run_json)
        config = RunConfig(**{**stored, "pool": tuple(stored["pool"]) if stored["pool"] else None})
    else:
        config = RunConfig.from_manifest(manifest, **overrides)
    if args.trainer_cmd:
        trainer = SubprocessTrainerAdapter(
            args.trainer_cmd.split(), str(run_dir / "jobs"), str(run_dir / "pretrained_model.json")
        )
    else:
        trainer = build_toy_trainer(manifest, run_dir / "pretrained_model.json", config.epochs)
    return Orchestrator(manifest, run_dir, trainer, build_oracle(manifest), config)


def cmd_round(args: argparse.Namespace) -> int:
    orch = _orchestrator_from_args(args)
    state = orch.latest_state()
    if state is None:
        state = orch.initialize()
        print(f"initialized round 0: labeled={list(state.labeled_ids)}")
        return EXIT_OK
    state = orch.run_round(state)
    print(
        f"completed round {state.r}: labeled={len(state.labeled_ids)} "
        f"unlabeled={len(state.unlabeled_ids)} pseudo={len(state.pseudo_ids)}"
    )
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    doc = read_json(args.config) if args.config else {}
    strategies = tuple(args.strategy.split(",")) if args.strategy else tuple(
        doc.get("strategies", ("RAND", "DKD+ASD", "ASFDA"))
    )
    seeds = (
        tuple(int(s) for s in args.seeds.split(","))
        if args.seeds
        else tuple(doc.get("seeds", range(10)))
    )
    cfg = ExperimentConfig(
        dataset=args.dataset or doc["dataset"],
        out_dir=args.out,
        strategies=strategies,
        seeds=seeds,
        budgets=tuple(doc.get("budgets", (0.05, 0.10, 0.15))),
        epochs=args.epochs if args.epochs is not None else int(doc.get("epochs", 30)),
        eval_fraction=float(doc.get("eval_fraction", 0.25)),
        fixed_tau=doc.get("fixed_tau"),
        semi_override=False if args.no_semi else doc.get("semi_override"),
        pseudo_weight=float(doc.get("pseudo_weight", 0.5)),
    )
    paths = run_experiment(cfg)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    if args.rank_sum:
        a = [float(line) for line in Path(args.rank_sum[0]).read_text().split()]
        b = [float(line) for line in Path(args.rank_sum[1]).read_text().split()]
        u, p = mann_whitney_u(a, b)
        print(f"U={format_float(u)} p={format_float(p)}")
        return EXIT_OK
    pred_dir = Path(args.pred_dir)
    truth_dir = Path(args.gt_dir)
    rows = []
    for f in sorted(pred_dir.glob("*.asft")):
        gt_path = truth_dir / f.name
        if not gt_path.is_file():
            raise ValidationError(f"no ground-truth tensor for {f.name}")
        pred = read_tensor(f).astype(np.int64)
        truth = read_tensor(gt_path).astype(np.int64)
        classes = args.classes or int(max(pred.max(), truth.max())) + 1
        rows.append((f.stem, mean_foreground_dice(pred, truth, classes),
                     per_class_dice(pred, truth, classes)))
    for sid, mean_d, pcs in rows:
        print(f"{sid},{format_float(mean_d)}," + ",".join(format_float(v) for v in pcs))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            n_fg = len(rows[0][2]) if rows else 0
            fh.write("sample_id,mean_dice," + ",".join(f"dice_class_{c}" for c in range(1, n_fg + 1)) + "\n")
            for sid, mean_d, pcs in rows:
                fh.write(f"{sid},{format_float(mean_d)}," + ",".join(format_float(v) for v in pcs) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="activeseg",
        description="Source-free active learning engine for volumetric segmentation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate the synthetic two-domain dataset")
    p.add_argument("--config", help="synth config JSON (defaults baked in otherwise)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("score", help="compute query or reliability scores from tensor files")
    p.add_argument("--mode", choices=("query", "reliability"), required=True)
    p.add_argument("--initial-dir", help="reference-encoder embeddings (query mode)")
    p.add_argument("--current-dir", help="current-encoder embeddings (query mode)")
    p.add_argument("--prob-dir", required=True, help="probability volumes")
    p.add_argument("--embedding-dir", help="unlabeled embeddings (reliability mode)")
    p.add_argument("--anchor-dir", help="labeled-anchor embeddings (reliability mode)")
    p.add_argument("--round", type=int, default=1)
    p.add_argument("--max-rounds", type=int, default=1)
    p.add_argument("--fixed-tau", type=float, default=None)
    p.add_argument("--n-su", type=int, default=1)
    p.add_argument("--tau-c", type=float, default=2.0)
    p.add_argument("--confidence-variant", choices=("mean", "sum"), default="mean")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("select", help="select a batch from a score table")
    p.add_argument("--scores", required=True, help="score table CSV")
    p.add_argument("--n-b", type=int, required=True)
    p.add_argument("--exclude", nargs="*", default=[])
    p.add_argument("--out", help="optional output file, one id per line")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("round", help="initialize a run or advance it one round")
    p.add_argument("--dataset", required=True, help="dataset manifest JSON")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--strategy", default="ASFDA", help=f"one of {', '.join(strategy_names())}")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--no-semi", action="store_true", help="disable the semi-supervised stage")
    p.add_argument("--confidence-variant", choices=("mean", "sum"), default=None)
    p.add_argument("--trainer-cmd", help="external trainer command (wire protocol)")
    p.set_defaults(func=cmd_round)

    p = sub.add_parser("run", help="run the full experiment grid")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--dataset", help="dataset manifest (overrides config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--strategy", help="comma-separated strategy list (overrides config)")
    p.add_argument("--seeds", help="comma-separated seed list (overrides config)")
    p.add_argument("--seed", type=int, default=None, help="single seed shorthand")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--no-semi", action="store_true")
    p.add_argument("--confidence-variant", choices=("mean", "sum"), default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="Dice / rank-sum evaluation from tensors")
    p.add_argument("--pred-dir", help="predicted label tensors")
    p.add_argument("--gt-dir", help="ground-truth label tensors")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--out", help="optional CSV output")
    p.add_argument("--rank-sum", nargs=2, metavar=("FILE_A", "FILE_B"),
                   help="two files of numbers; prints Mann-Whitney U and p")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is not None and getattr(args, "seeds", None) is None:
        if args.command == "run":
            args.seeds = str(args.seed)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except AdapterError as exc:
        print(f"adapter error: {exc}", file=sys.stderr)
        return EXIT_ADAPTER
    except (FileError, OSError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

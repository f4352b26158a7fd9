"""Benchmark tuning harness: one config -> the three acceptance trend metrics.

Usage: python3 tools/tune.py '<synth kwargs dict>' <pseudo_weight> [strategies]
Prints DKD-vs-RAND per budget, ASFDA-vs-DKD at final budget, criterion-6 p's.
"""

import ast
import collections
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from activeseg.experiment import (
    ExperimentConfig,
    read_analysis_csv,
    read_results_csv,
    run_experiment,
    selection_separation_pvalue,
)
from activeseg.synth import SynthConfig, generate_dataset


def main() -> None:
    synth_kwargs = ast.literal_eval(sys.argv[1]) if len(sys.argv) > 1 else {}
    pseudo_weight = float(sys.argv[2]) if len(sys.argv) > 2 else 0.5
    strategies = tuple(sys.argv[3].split(",")) if len(sys.argv) > 3 else ("RAND", "DKD+ASD", "ASFDA")
    seeds = tuple(range(10))

    tmp = Path(tempfile.mkdtemp())
    generate_dataset(SynthConfig(**synth_kwargs), tmp / "data")
    exp = ExperimentConfig(
        dataset=str(tmp / "data" / "dataset.json"),
        out_dir=str(tmp / "exp"),
        strategies=strategies,
        seeds=seeds,
        budgets=(0.05, 0.10, 0.15),
        pseudo_weight=pseudo_weight,
    )
    t0 = time.time()
    paths = run_experiment(exp)
    rows = read_results_csv(paths["results"])
    table = collections.defaultdict(dict)
    for r in rows:
        table[(r["strategy"], r["seed"])][r["budget"]] = r["mean_dice"]
    budgets = sorted({r["budget"] for r in rows})
    print(f"workdir {tmp}  runtime {time.time()-t0:.0f}s")
    if "RAND" in strategies and "DKD+ASD" in strategies:
        for b in budgets:
            ds = [table[("DKD+ASD", s)][b] - table[("RAND", s)][b] for s in seeds]
            print(
                f"DKD-RAND @{b:>4}: mean {np.mean(ds):+0.4f} "
                f"wins {sum(d >= 0 for d in ds)}/10 {[round(d, 3) for d in ds]}"
            )
    if "ASFDA" in strategies and "DKD+ASD" in strategies:
        b = budgets[-1]
        ds = [table[("ASFDA", s)][b] - table[("DKD+ASD", s)][b] for s in seeds]
        print(
            f"ASFDA-DKD final: mean {np.mean(ds):+0.4f} "
            f"wins {sum(d >= 0 for d in ds)}/10 {[round(d, 3) for d in ds]}"
        )
    if "ASFDA" in strategies and "analysis" in paths:
        ana = read_analysis_csv(paths["analysis"])
        ps = [selection_separation_pvalue(ana, "ASFDA", s, len(budgets)) for s in seeds]
        print(f"crit6 p<0.05: {sum(p < 0.05 for p in ps)}/10 {[round(p, 3) for p in ps]}")


if __name__ == "__main__":
    main()

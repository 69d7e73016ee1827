"""Predict data- and pipeline-parallel rescaling from one profiled
configuration and compare against regenerated ground truth."""

from __future__ import annotations

import argparse
import json
from dataclasses import replace

from _common import errors_vs_truth, graph_from_spec
from tracesim.simulator import simulate
from tracesim.synth import SynthSpec, generate
from tracesim.trace_model import ModelConfig, ParallelismConfig
from tracesim.transform import WhatIfConfig, apply_whatif

MODEL = ModelConfig(8, 4096, 16384, 32, 128)

CASES = [
    # (label, source parallelism, what-if overrides)
    ("dp 4->8", ParallelismConfig(1, 2, 4, 4), {"dp": 8}),
    ("dp 4->16", ParallelismConfig(1, 2, 4, 4), {"dp": 16}),
    ("pp 1->2", ParallelismConfig(1, 1, 1, 1), {"pp": 2}),
    ("pp 2->4", ParallelismConfig(1, 2, 1, 2), {"pp": 4}),
    ("pp 2->4 (tp 2)", ParallelismConfig(2, 2, 1, 4), {"pp": 4}),
    ("pp 2->4, dp 2->4", ParallelismConfig(1, 2, 2, 2), {"pp": 4, "dp": 4}),
    ("pp 4->2", ParallelismConfig(1, 4, 1, 4), {"pp": 2}),
]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--jitter", type=float, default=0.0, help="jitter of the profiled (source) run")
    ap.add_argument("--iterations", type=int, default=1, help="iterations in the profiled run")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json")
    args = ap.parse_args()

    rows = []
    print(f"{'case':<20} {'baseline us':>12} {'predicted us':>13} {'truth us':>10} {'err %':>7} {'bd err %':>9} {'share pp':>8}")
    for label, src, overrides in CASES:
        spec = SynthSpec(model=MODEL, parallelism=src, jitter_pct=args.jitter, iterations=args.iterations, seed=args.seed)
        _, g = graph_from_spec(spec)
        baseline = max(simulate(g).rank_makespans().values())
        cfg = WhatIfConfig.from_dict({"target_parallelism": overrides})
        target = cfg.resolve(src)
        sim = simulate(apply_whatif(g, cfg))
        truth = generate(replace(spec, parallelism=target, jitter_pct=0.0, iterations=1)).truth
        ms_err, bd_err, share_err = errors_vs_truth(sim, truth)
        pred = max(sim.rank_makespans().values())
        true = max(truth.makespan[r] for r in sim.graph.ranks)
        rows.append({"case": label, "baseline_us": baseline, "predicted_us": pred, "truth_us": true,
                     "makespan_error_pct": ms_err, "breakdown_error_pct": bd_err, "share_error_pp": share_err})
        print(f"{label:<20} {baseline:>12} {pred:>13} {true:>10} {ms_err:>7.3f} {bd_err:>9.3f} {share_err:>8.3f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()

"""Sweep model depth and width from one profiled model and report predicted
iteration time and breakdown next to regenerated ground truth."""

from __future__ import annotations

import argparse
import json

from _common import CATEGORIES, errors_vs_truth, graph_from_spec
from tracesim.metrics import breakdown
from tracesim.simulator import simulate
from tracesim.synth import SynthSpec, generate
from tracesim.trace_model import ModelConfig, ParallelismConfig
from tracesim.transform import WhatIfConfig, apply_whatif

BASE = ModelConfig(4, 4096, 16384, 32, 128)

VARIANTS = [
    ("base", BASE),
    ("6 layers", ModelConfig(6, 4096, 16384, 32, 128)),
    ("12 layers", ModelConfig(12, 4096, 16384, 32, 128)),
    ("2 layers", ModelConfig(2, 4096, 16384, 32, 128)),
    ("width x1.5", ModelConfig(4, 6144, 24576, 48, 128)),
    ("width x2", ModelConfig(4, 8192, 32768, 64, 128)),
    ("6 layers, width x2", ModelConfig(6, 8192, 32768, 64, 128)),
]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pp", type=int, default=2)
    ap.add_argument("--dp", type=int, default=2)
    ap.add_argument("--json")
    args = ap.parse_args()
    par = ParallelismConfig(1, args.pp, args.dp, 2 * args.pp)

    _, g = graph_from_spec(SynthSpec(model=BASE, parallelism=par))
    rows = []
    head = " ".join(f"{c:>16}" for c in CATEGORIES)
    print(f"{'variant':<20} {'predicted us':>13} {'truth us':>10} {'err %':>7} {'bd err %':>9} {'share pp':>8} {head}")
    for label, model in VARIANTS:
        sim = simulate(apply_whatif(g, WhatIfConfig.from_dict({"target_model": model.to_dict()})))
        truth = generate(SynthSpec(model=model, parallelism=par)).truth
        ms_err, bd_err, share_err = errors_vs_truth(sim, truth)
        pred = max(sim.rank_makespans().values())
        true = max(truth.makespan[r] for r in sim.graph.ranks)
        bd = breakdown(sim, 0).to_dict()
        rows.append({"variant": label, "model": model.to_dict(), "predicted_us": pred, "truth_us": true,
                     "makespan_error_pct": ms_err, "breakdown_error_pct": bd_err, "share_error_pp": share_err, "breakdown_rank0": bd})
        cells = " ".join(f"{bd[c]:>16}" for c in CATEGORIES)
        print(f"{label:<20} {pred:>13} {true:>10} {ms_err:>7.3f} {bd_err:>9.3f} {share_err:>8.3f} {cells}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()

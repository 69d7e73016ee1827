"""Replay synthetic workloads across pipeline / data-parallel / depth settings
and report how far the simulated makespan lands from the generator's truth."""

from __future__ import annotations

import argparse
import json
import time

from _common import graph_from_spec
from tracesim.simulator import simulate
from tracesim.synth import SynthSpec
from tracesim.trace_model import ModelConfig, ParallelismConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--jitter", type=float, default=0.0, help="relative duration jitter, 0..0.2")
    ap.add_argument("--iterations", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="write the rows to this file")
    args = ap.parse_args()

    rows = []
    print(f"{'pp':>3} {'dp':>3} {'L':>3} {'tasks':>7} {'truth us':>10} {'sim us':>10} {'err %':>7} {'secs':>5}")
    for pp in (1, 2, 4):
        for dp in (1, 2, 4):
            for layers in (max(2, pp), 8):
                spec = SynthSpec(
                    model=ModelConfig(layers, 1024, 4096, 8, 128),
                    parallelism=ParallelismConfig(1, pp, dp, 2 * pp),
                    jitter_pct=args.jitter,
                    iterations=args.iterations,
                    seed=args.seed,
                )
                t0 = time.perf_counter()
                res, g = graph_from_spec(spec)
                sim = simulate(g)
                worst = 0.0
                for r in g.ranks:
                    truth = res.truth.iteration_makespans[res.truth.iteration_of(g.rank_origin(r))][r]
                    worst = max(worst, abs(sim.rank_makespan(r) - truth) / truth * 100)
                truth_ms = max(res.truth.makespan.values())
                row = {"pp": pp, "dp": dp, "layers": layers, "tasks": len(g.tasks), "truth_us": truth_ms,
                       "simulated_us": max(sim.rank_makespans().values()), "max_error_pct": worst,
                       "seconds": time.perf_counter() - t0}
                rows.append(row)
                print(f"{pp:>3} {dp:>3} {layers:>3} {row['tasks']:>7} {truth_ms:>10} {row['simulated_us']:>10} "
                      f"{worst:>7.3f} {row['seconds']:>5.1f}")
    print(f"mean error {sum(r['max_error_pct'] for r in rows) / len(rows):.3f}%")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()

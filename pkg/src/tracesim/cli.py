"""Command-line front end: replay, what-if, synthetic generation and analysis.

Exit codes: 0 success, 2 unreadable or malformed input, 3 graph
construction failure, 4 simulation failure, 5 rejected transform or
infeasible generator spec.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Optional, Sequence

from .cost_model import CostModelError
from .graph import (
    BuildPolicy,
    ExecutionGraph,
    GraphError,
    build_graph,
    configs_from_metadata,
    load_graph,
    merge_graphs,
)
from .metrics import SCHEMA_VERSION, compare, metrics_report, sm_utilization, utilization_csv
from .simulator import SimulatedTrace, SimulationError, original_schedule, simulate, validate
from .synth import SynthError, SynthResult, SynthSpec, generate
from .trace_model import (
    TraceParseError,
    detect_iteration_window,
    parse_trace,
    rank_from_path,
    read_bytes,
    read_manifest,
)
from .transform import TransformError, WhatIfConfig, apply_whatif, load_sidecar

logger = logging.getLogger("tracesim")

EXIT_INPUT, EXIT_GRAPH, EXIT_SIM, EXIT_TRANSFORM = 2, 3, 4, 5


class InputError(Exception):
    pass


@dataclass
class RunManifest:
    """Everything a command needs.  Exactly one of `traces` / `synth` is set."""

    traces: Optional[dict[int, Path]] = None
    synth: Optional[SynthSpec] = None
    policy: Optional[Path] = None
    whatif: Optional[Path] = None
    window: Any = "auto"  # "auto", None (whole trace) or (start_us, end_us)
    out: Path = Path("out")
    annotations: Optional[Path] = None

    def __post_init__(self):
        if (self.traces is None) == (self.synth is None):
            raise InputError("give either trace files or a synthetic spec, not both or neither")

    @classmethod
    def from_file(cls, path: Path) -> "RunManifest":
        try:
            raw = json.loads(read_bytes(path))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: {exc}") from None
        base = path.parent
        if not isinstance(raw, dict):
            raise InputError(f"{path}: manifest must be a JSON object")
        if "traces" not in raw and "synth" not in raw:
            # plain rank -> file table
            return cls(traces=read_manifest(path))
        traces = None
        if raw.get("traces") is not None:
            t = raw["traces"]
            if isinstance(t, dict):
                traces = {int(k): base / v for k, v in t.items()}
            else:
                traces = {rank_from_path(p): base / p for p in t}
        synth = SynthSpec.from_dict(raw["synth"]) if raw.get("synth") is not None else None
        opt = lambda k: base / raw[k] if raw.get(k) else None  # noqa: E731
        return cls(traces, synth, opt("policy"), opt("whatif"), parse_window(raw.get("window", "auto")),
                   Path(raw["out"]) if raw.get("out") else Path("out"), opt("annotations"))


def parse_window(text: Any) -> Any:
    if text is None or text == "all":
        return None
    if text == "auto":
        return "auto"
    if isinstance(text, (list, tuple)):
        a, b = text
    else:
        try:
            a, b = (int(x) for x in str(text).split(","))
        except ValueError:
            raise InputError(f"window must be 'auto', 'all' or 'start,end' in microseconds, got {text!r}") from None
    if int(b) <= int(a):
        raise InputError("window end must exceed its start")
    return (int(a), int(b))


def _manifest(args: argparse.Namespace) -> RunManifest:
    if args.manifest:
        m = RunManifest.from_file(Path(args.manifest))
        if args.trace:
            raise InputError("--trace and --manifest are mutually exclusive")
    elif args.trace:
        try:
            m = RunManifest(traces={rank_from_path(p): Path(p) for p in args.trace})
        except ValueError as exc:
            raise InputError(str(exc)) from None
    else:
        raise InputError("no input: pass --trace files or --manifest")
    if getattr(args, "policy", None):
        m.policy = Path(args.policy)
    if getattr(args, "whatif", None):
        m.whatif = Path(args.whatif)
    if getattr(args, "window", None) is not None:
        m.window = parse_window(args.window)
    if getattr(args, "annotations", None):
        m.annotations = Path(args.annotations)
    if args.out:
        m.out = Path(args.out)
    if m.synth is not None and args.seed is not None:
        m.synth = replace(m.synth, seed=args.seed)
    return m


def _policy(m: RunManifest) -> Optional[BuildPolicy]:
    if m.policy is None:
        return None
    try:
        return BuildPolicy.load(m.policy)
    except json.JSONDecodeError as exc:
        raise InputError(f"{m.policy}: {exc}") from None


def _load(m: RunManifest) -> tuple[ExecutionGraph, Optional[SynthResult]]:
    policy = _policy(m)
    if m.traces is not None:
        return load_graph(m.traces, policy, m.window), None
    res = generate(m.synth)
    graphs = []
    for r, evs in sorted(res.events.items()):
        win = detect_iteration_window(evs) if m.window == "auto" else m.window
        graphs.append(build_graph(evs, policy, rank=r, window=win))
    g = merge_graphs(graphs)
    g.attrs.update(configs_from_metadata(res.metadata[min(res.metadata)]))
    return g, res


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def graph_summary(g: ExecutionGraph) -> dict:
    par, model = g.attrs.get("parallelism"), g.attrs.get("model")
    return {
        "schema_version": SCHEMA_VERSION,
        "tasks": len(g.tasks),
        "edges": dict(sorted(g.edge_count_by_kind().items())),
        "runtime_rules": len(g.runtime_rules),
        "rendezvous_groups": len(g.rendezvous),
        "ranks": g.ranks,
        "windows": {str(r): list(w) for r, w in sorted(g.windows.items())},
        "parallelism": par.to_dict() if par else None,
        "model": model.to_dict() if model else None,
        "diagnostics": g.diagnostics[:50],
        "issues": validate(g)[:50],
    }


def _write_run(out: Path, sim: SimulatedTrace) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "simulated_trace.json").write_text(sim.to_chrome_trace())
    report = metrics_report(sim)
    _write_json(out / "metrics.json", report)
    ranks = sim.graph.ranks
    if ranks:
        (out / "utilization.csv").write_text(utilization_csv(sm_utilization(sim, ranks[0])))


def cmd_replay(m: RunManifest) -> int:
    g, res = _load(m)
    sim = simulate(g)
    _write_run(m.out, sim)
    ref = original_schedule(g)
    per_rank = {str(r): compare(ref, sim, r) for r in g.ranks}
    worst = max((v["makespan_error_pct"] or 0.0 for v in per_rank.values()), default=0.0)
    report = {"schema_version": SCHEMA_VERSION, "max_makespan_error_pct": worst, "ranks": per_rank}
    if res is not None:
        truth = {}
        for r in g.ranks:
            ms = sim.rank_makespan(r)
            it = res.truth.iteration_of(g.rank_origin(r))
            ref_ms = res.truth.iteration_makespans[it][r]
            truth[str(r)] = {"iteration": it, "truth_us": ref_ms, "simulated_us": ms,
                             "error_pct": abs(ms - ref_ms) / ref_ms * 100.0 if ref_ms else None}
        report["ground_truth"] = truth
    _write_json(m.out / "comparison.json", report)
    _write_json(m.out / "graph_summary.json", graph_summary(g))
    print(f"replayed {len(g.tasks)} tasks on {len(g.ranks)} rank(s); max makespan error {worst:.3f}%")
    return 0


def cmd_whatif(m: RunManifest) -> int:
    if m.whatif is None:
        raise InputError("what-if needs --whatif <config.json>")
    try:
        cfg = WhatIfConfig.load(m.whatif)
    except json.JSONDecodeError as exc:
        raise InputError(f"{m.whatif}: {exc}") from None
    sidecar = load_sidecar(m.annotations) if m.annotations else None
    g, _ = _load(m)
    baseline = simulate(g)
    g2 = apply_whatif(g, cfg, sidecar=sidecar)
    sim = simulate(g2)
    _write_run(m.out, sim)
    _write_json(m.out / "graph_summary.json", graph_summary(g2))
    pred = sim.rank_makespans()
    base = baseline.rank_makespans()
    summary = {
        "schema_version": SCHEMA_VERSION,
        "baseline_makespan_us": {str(r): v for r, v in base.items()},
        "predicted_makespan_us": {str(r): v for r, v in pred.items()},
        "baseline_iteration_us": max(base.values(), default=0),
        "predicted_iteration_us": max(pred.values(), default=0),
    }
    _write_json(m.out / "prediction.json", summary)
    print(f"predicted iteration time {summary['predicted_iteration_us']} us "
          f"(baseline {summary['baseline_iteration_us']} us)")
    return 0


def cmd_gen(spec_path: Optional[str], m_path: Optional[str], out: Optional[str], seed: Optional[int]) -> int:
    if spec_path:
        try:
            spec = SynthSpec.load(spec_path)
        except json.JSONDecodeError as exc:
            raise InputError(f"{spec_path}: {exc}") from None
        except OSError as exc:
            raise InputError(f"cannot read spec {spec_path!r}: {exc.strerror}") from None
    elif m_path:
        m = RunManifest.from_file(Path(m_path))
        if m.synth is None:
            raise InputError("manifest has no synthetic spec")
        spec = m.synth
    else:
        raise InputError("gen needs a spec file")
    if seed is not None:
        spec = replace(spec, seed=seed)
    res = generate(spec)
    out_dir = Path(out or "out")
    res.write(out_dir)
    _write_json(out_dir / "spec.json", spec.to_dict())
    print(f"wrote {len(res.events)} rank trace(s) to {out_dir}")
    return 0


def cmd_analyze(m: RunManifest, bin_width: int) -> int:
    if m.traces is None:
        res = generate(m.synth)
        per_rank = dict(res.events)
    else:
        per_rank = {}
        for r, path in sorted(m.traces.items()):
            per_rank[r] = parse_trace(read_bytes(path))
    events = []
    for r, evs in sorted(per_rank.items()):
        win = detect_iteration_window(evs) if m.window == "auto" else m.window
        if win is not None:
            evs = [e for e in evs if win[0] <= e.timestamp < win[1]]
        events.extend(replace(e, process_id=r) for e in evs)
    report = metrics_report(events, ranks=sorted(per_rank), bin_width=bin_width)
    _write_json(m.out / "metrics.json", report)
    print(f"analyzed {len(events)} events on {len(per_rank)} rank(s)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tracesim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def inputs(sp, whatif=False):
        sp.add_argument("--trace", nargs="+", metavar="PATH", help="per-rank trace files (rank from file name)")
        sp.add_argument("--manifest", metavar="PATH", help="rank->file table or full run manifest")
        sp.add_argument("--policy", metavar="PATH", help="graph build policy JSON")
        sp.add_argument("--window", metavar="A,B|auto|all", help="iteration window in microseconds")
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--seed", type=int)
        if whatif:
            sp.add_argument("--whatif", metavar="PATH", help="what-if configuration JSON")
            sp.add_argument("--annotations", metavar="PATH", help="layer annotation sidecar JSON")

    inputs(sub.add_parser("replay", help="rebuild and re-simulate traces"))
    inputs(sub.add_parser("whatif", help="predict a changed configuration"), whatif=True)
    g = sub.add_parser("gen", help="generate synthetic traces with ground truth")
    g.add_argument("spec", nargs="?", help="synthetic spec JSON")
    g.add_argument("--manifest", metavar="PATH")
    g.add_argument("--out", metavar="DIR")
    g.add_argument("--seed", type=int)
    a = sub.add_parser("analyze", help="metrics straight from traces, no simulation")
    inputs(a)
    a.add_argument("--bin-width", type=int, default=1000)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gen":
            return cmd_gen(args.spec, args.manifest, args.out, args.seed)
        m = _manifest(args)
        if args.command == "replay":
            return cmd_replay(m)
        if args.command == "whatif":
            return cmd_whatif(m)
        return cmd_analyze(m, args.bin_width)
    except (InputError, TraceParseError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except GraphError as exc:
        print(f"graph error: {exc}", file=sys.stderr)
        return EXIT_GRAPH
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIM
    except (TransformError, SynthError, CostModelError) as exc:
        print(f"rejected: {exc}", file=sys.stderr)
        return EXIT_TRANSFORM
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

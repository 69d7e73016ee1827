"""Shared helpers for the experiment scripts."""

from __future__ import annotations

from tracesim.graph import build_graph, configs_from_metadata, merge_graphs
from tracesim.metrics import breakdown
from tracesim.synth import SynthSpec, generate
from tracesim.trace_model import detect_iteration_window, parse_trace, read_trace_metadata

CATEGORIES = ("exposed_compute", "exposed_comm", "overlapped", "other")


def graph_from_spec(spec: SynthSpec):
    """Generate traces, serialise them, and rebuild one merged graph."""
    res = generate(spec)
    graphs, attrs = [], {}
    for r in sorted(res.events):
        raw = res.trace_json(r)
        events = parse_trace(raw)
        attrs.update(configs_from_metadata(read_trace_metadata(raw)))
        graphs.append(build_graph(events, rank=r, window=detect_iteration_window(events)))
    g = merge_graphs(graphs)
    g.attrs.update(attrs)
    return res, g


def errors_vs_truth(sim, truth) -> tuple[float, float, float]:
    """Makespan error, worst per-category relative breakdown error (percent),
    and worst difference in category share of the iteration (percentage points).

    The relative figure is harsh on tiny categories such as the host-side
    residual, so the share difference is reported next to it."""
    ranks = sorted(sim.graph.ranks)
    pred = max(sim.rank_makespan(r) for r in ranks)
    true = max(truth.makespan[r] for r in ranks)
    worst = share = 0.0
    for r in ranks:
        pb, tb = breakdown(sim, r).to_dict(), truth.breakdown[r]
        for k in CATEGORIES:
            diff = abs(pb[k] - tb[k])
            worst = max(worst, diff / tb[k] * 100 if tb[k] else diff / tb["total"] * 100)
            share = max(share, abs(pb[k] / pb["total"] - tb[k] / tb["total"]) * 100)
    return abs(pred - true) / true * 100, worst, share

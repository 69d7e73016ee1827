"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (visible with ``pytest -s`` or in
the terminal summary) before asserting.
"""

import json
import random
import subprocess
import sys
import textwrap
import time
from dataclasses import replace
from pathlib import Path

import pytest

from helpers import synth_graph
from oracles import OracleDeadlock, greedy_1f1b, random_program_graph, tick_breakdown, tick_utilization
from tracesim.graph import build_graph
from tracesim.metrics import breakdown, breakdown_intervals, utilization_intervals
from tracesim.simulator import SimulationError, simulate
from tracesim.synth import SynthSpec, generate
from tracesim.trace_model import ModelConfig, ParallelismConfig, parse_trace
from tracesim.transform import WhatIfConfig, apply_whatif, schedule_1f1b

CATEGORIES = ("exposed_compute", "exposed_comm", "overlapped", "other")


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail

    return emit


# 1 -------------------------------------------------------------------------


def replay_specs():
    specs = []
    for pp in (1, 2, 4):
        for dp in (1, 2, 4):
            for layers in sorted({max(2, pp), 5, 8}):
                tp = 2 if (pp + dp + layers) % 2 else 1
                m = pp if layers % 2 else 2 * pp
                specs.append(SynthSpec(model=ModelConfig(layers, 256, 1024, 4, 64), parallelism=ParallelismConfig(tp, pp, dp, m)))
    return specs


def test_replay_exactness(report):
    specs = replay_specs()
    t0 = time.perf_counter()
    bad = []
    for spec in specs:
        res = generate(spec)
        for r in res.events:
            g = build_graph(parse_trace(res.trace_json(r)), rank=r)
            sim = simulate(g)
            mismatched = sum(1 for t in g.tasks if sim.starts[t.id] != t.original_start)
            if mismatched or sim.rank_makespan(r) != res.truth.makespan[r]:
                bad.append((spec.parallelism, spec.model.n_layers, r, mismatched))
    elapsed = time.perf_counter() - t0
    ok = len(specs) >= 20 and not bad and elapsed < 10
    report(1, "replay exactness", ok, f"{len(specs)} specs, {len(bad)} ranks off, {elapsed:.1f}s")


# 2 -------------------------------------------------------------------------


def test_oracle_equivalence(report):
    t0 = time.perf_counter()
    mismatched = deadlocks = 0
    for seed in range(1000):
        g = random_program_graph(random.Random(seed))
        try:
            expected = tick_simulate_makespan(g)
        except OracleDeadlock:
            expected = None
        try:
            got = simulate(g).makespan
        except SimulationError:
            got = None
        deadlocks += expected is None
        mismatched += got != expected
    elapsed = time.perf_counter() - t0
    ok = mismatched == 0 and elapsed < 30
    report(2, "oracle equivalence", ok, f"1000 graphs, {mismatched} mismatches, {deadlocks} deadlocks on both sides, {elapsed:.1f}s")


def tick_simulate_makespan(g):
    from oracles import tick_simulate

    starts, ends = tick_simulate(g)
    return max(ends) - min(starts)


# 3 -------------------------------------------------------------------------


def corpus_sources(data_dir: Path):
    hand = parse_trace((data_dir / "hand_fixture.json").read_bytes())
    yield "hand_fixture", hand, [0]
    for spec in replay_specs()[::3]:
        res = generate(replace(spec, jitter_pct=0.1, seed=7))
        for r in res.events:
            evs = res.events[r]
            yield f"synth pp{spec.parallelism.pp} dp{spec.parallelism.dp} r{r}", evs, [r]
            g = build_graph(evs, rank=r)
            yield "replay", simulate(g), [r]


def test_breakdown_conservation(report, data_dir):
    traces = violations = 0
    for _, source, ranks in corpus_sources(data_dir):
        for r in ranks:
            b = breakdown(source, r)
            traces += 1
            violations += b.exposed_compute + b.exposed_comm + b.overlapped + b.other != b.total
    rng = random.Random(2024)
    oracle_misses = 0
    for _ in range(100):
        ivs = []
        for _ in range(rng.randint(1, 40)):
            s = rng.randint(0, 4000)
            ivs.append((s, s + rng.randint(0, 400), rng.random() < 0.4))
        win = (rng.randint(0, 500), rng.randint(3000, 4500))
        b = breakdown_intervals(ivs, win)
        oracle_misses += (b.exposed_compute, b.exposed_comm, b.overlapped, b.other) != tick_breakdown(ivs, win)
        bw = rng.choice([100, 250, 1000])
        spans = [(s, e) for s, e, _ in ivs]
        oracle_misses += utilization_intervals(spans, win, bw).values != pytest.approx(tick_utilization(spans, win, bw))
    ok = violations == 0 and oracle_misses == 0
    report(3, "breakdown conservation", ok, f"{traces} corpus timelines, {violations} violations, {oracle_misses} oracle misses on 100 fixtures")


# 4 -------------------------------------------------------------------------


def test_1f1b_schedule(report):
    cases = misses = 0
    for pp in (1, 2, 4, 8):
        for m in range(pp, 4 * pp + 1):
            for stage in range(pp):
                cases += 1
                misses += schedule_1f1b(pp, m, stage) != greedy_1f1b(pp, m, stage)
    # pipeline doubling from 2 to 4 stages with tp=2, microbatches = tp * pp
    doubled = [schedule_1f1b(4, 8, s) for s in range(4)] == [greedy_1f1b(4, 8, s) for s in range(4)]
    ok = misses == 0 and doubled
    report(4, "1F1B schedule", ok, f"{cases} (pp, m, stage) cases, {misses} mismatches")


# 5-7 -----------------------------------------------------------------------

WIDE = ModelConfig(4, 4096, 16384, 32, 128)
DEEP = ModelConfig(8, 4096, 16384, 32, 128)


def predict_vs_truth(model, par, cfg, target_model, target_par):
    _, g = synth_graph(SynthSpec(model=model, parallelism=par))
    sim = simulate(apply_whatif(g, WhatIfConfig.from_dict(cfg)))
    truth = generate(SynthSpec(model=target_model, parallelism=target_par)).truth
    ranks = sorted(sim.graph.ranks)
    pred_ms = max(sim.rank_makespan(r) for r in ranks)
    true_ms = max(truth.makespan[r] for r in ranks)
    makespan_err = abs(pred_ms - true_ms) / true_ms * 100
    bd_err = 0.0
    for r in ranks:
        pb, tb = breakdown(sim, r).to_dict(), truth.breakdown[r]
        for k in CATEGORIES:
            diff = abs(pb[k] - tb[k])
            # relative per category; empty categories compared against the total
            bd_err = max(bd_err, diff / tb[k] * 100 if tb[k] else diff / tb["total"] * 100)
    return makespan_err, bd_err


def run_cases(cases, tolerance):
    lines, ok = [], True
    for name, args in cases:
        ms, bd = predict_vs_truth(*args)
        ok &= ms <= tolerance and bd <= tolerance
        lines.append(f"{name} makespan {ms:.3f}% breakdown {bd:.3f}%")
    return ok, "; ".join(lines)


def test_dp_whatif(report):
    t0 = time.perf_counter()
    src = ParallelismConfig(1, 2, 4, 4)
    cases = [
        (f"dp4->{dp}", (WIDE, src, {"target_parallelism": {"dp": dp}}, WIDE, replace(src, dp=dp)))
        for dp in (8, 16)
    ]
    ok, detail = run_cases(cases, 1.0)
    elapsed = time.perf_counter() - t0
    report(5, "data-parallel what-if", ok and elapsed < 60, f"{detail}; {elapsed:.1f}s")


def test_pp_whatif(report):
    cases = [
        ("pp2->4", (DEEP, ParallelismConfig(1, 2, 1, 2), {"target_parallelism": {"pp": 4}}, DEEP, ParallelismConfig(1, 4, 1, 4))),
        ("pp2->4,dp2->4", (DEEP, ParallelismConfig(1, 2, 2, 2), {"target_parallelism": {"pp": 4, "dp": 4}}, DEEP, ParallelismConfig(1, 4, 4, 4))),
    ]
    ok, detail = run_cases(cases, 5.0)
    report(6, "pipeline what-if", ok, detail)


def test_architecture_whatif(report):
    par = ParallelismConfig(1, 2, 2, 4)
    six = replace(WIDE, n_layers=6)
    wider = ModelConfig(4, 8192, 32768, 64, 128)
    cases = [
        ("layers4->6", (WIDE, par, {"target_model": six.to_dict()}, six, par)),
        ("width x2", (WIDE, par, {"target_model": wider.to_dict()}, wider, par)),
    ]
    ok, detail = run_cases(cases, 2.0)
    report(7, "architecture what-if", ok, detail)


# 8 -------------------------------------------------------------------------


def cli(*args, cwd):
    return subprocess.run([sys.executable, "-m", "tracesim", *args], cwd=cwd, capture_output=True, text=True)


def test_determinism(report, tmp_path):
    spec = {
        "model": {"n_layers": 4, "d_model": 512, "d_ffn": 2048, "n_heads": 8, "d_head": 64},
        "parallelism": {"tp": 1, "pp": 2, "dp": 2, "num_microbatches": 4},
        "jitter_pct": 0.1,
        "iterations": 3,
    }
    whatif = {"target_parallelism": {"pp": 4, "dp": 4}}

    def run(root: Path):
        root.mkdir()
        (root / "spec.json").write_text(json.dumps(spec))
        (root / "whatif.json").write_text(json.dumps(whatif))
        codes = [
            cli("gen", "spec.json", "--seed", "5", "--out", "gen", cwd=root).returncode,
            cli("replay", "--manifest", "gen/manifest.json", "--out", "replay", cwd=root).returncode,
            cli("whatif", "--manifest", "gen/manifest.json", "--whatif", "whatif.json", "--out", "whatif", cwd=root).returncode,
            cli("analyze", "--manifest", "gen/manifest.json", "--out", "analyze", cwd=root).returncode,
        ]
        files = {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
        return codes, files

    codes_a, a = run(tmp_path / "a")
    codes_b, b = run(tmp_path / "b")
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = codes_a == codes_b == [0, 0, 0, 0] and not differing
    report(8, "determinism", ok, f"{len(a)} output files, exit codes {codes_a}, differing {differing}")


# 9 -------------------------------------------------------------------------

SCALE_SCRIPT = textwrap.dedent(
    """
    import json, resource, sys, time
    from tracesim import build_graph, parse_trace, simulate
    raw = open(sys.argv[1], "rb").read()
    t0 = time.perf_counter()
    events = parse_trace(raw)
    graph = build_graph(events)
    sim = simulate(graph)
    elapsed = time.perf_counter() - t0
    rss_mb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024
    print(json.dumps({"events": len(events), "seconds": elapsed, "peak_rss_mb": rss_mb, "makespan": sim.makespan}))
    """
)


def test_scale(report, tmp_path):
    spec = SynthSpec(model=ModelConfig(64, 1024, 4096, 8, 128), parallelism=ParallelismConfig(1, 1, 1, 260))
    res = generate(spec)
    path = tmp_path / "rank_0.json"
    path.write_text(res.trace_json(0))
    expected = res.truth.makespan[0]
    del res
    proc = subprocess.run([sys.executable, "-c", SCALE_SCRIPT, str(path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    out = json.loads(proc.stdout)
    ok = out["events"] >= 1_000_000 and out["seconds"] <= 60 and out["peak_rss_mb"] <= 4096 and out["makespan"] == expected
    report(9, "scale", ok, f"{out['events']} events in {out['seconds']:.1f}s, peak RSS {out['peak_rss_mb']:.0f} MB")

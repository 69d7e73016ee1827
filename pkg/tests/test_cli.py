import json
from pathlib import Path

import pytest

from tracesim.cli import main

SMALL_MODEL = {"n_layers": 2, "d_model": 256, "d_ffn": 1024, "n_heads": 4, "d_head": 64}


def write(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj))
    return path


def load(path: Path):
    return json.loads(path.read_text())


def snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def spec_file(tmp_path):
    return write(tmp_path / "spec.json", {
        "model": SMALL_MODEL,
        "parallelism": {"tp": 1, "pp": 2, "dp": 1, "num_microbatches": 2},
        "iterations": 3,
        "jitter_pct": 0.05,
        "seed": 4,
    })


def test_gen_writes_one_file_per_rank(tmp_path, spec_file):
    out = tmp_path / "gen"
    assert main(["gen", str(spec_file), "--out", str(out)]) == 0
    assert sorted(p.name for p in out.glob("rank_*.json")) == ["rank_0.json", "rank_1.json"]
    truth = load(out / "ground_truth.json")
    assert len(truth["iterations"]) == 3
    assert load(out / "spec.json")["seed"] == 4


def test_gen_infeasible_exits_5(tmp_path):
    spec = write(tmp_path / "bad.json", {"model": SMALL_MODEL, "parallelism": {"tp": 1, "pp": 4, "dp": 1, "num_microbatches": 4}})
    assert main(["gen", str(spec), "--out", str(tmp_path / "o")]) == 5


def test_gen_unknown_model_key_exits_2(tmp_path, capsys):
    spec = write(tmp_path / "typo.json", {"model": {**SMALL_MODEL, "num_layers": 4}})
    assert main(["gen", str(spec), "--out", str(tmp_path / "o")]) == 2
    assert "num_layers" in capsys.readouterr().err


def test_replay_matches_truth_in_detected_iteration(tmp_path, spec_file):
    gen = tmp_path / "gen"
    main(["gen", str(spec_file), "--out", str(gen)])
    truth = load(gen / "ground_truth.json")
    out = tmp_path / "replay"
    assert main(["replay", "--manifest", str(gen / "manifest.json"), "--window", "auto", "--out", str(out)]) == 0
    summary = load(out / "graph_summary.json")
    # the middle of three iterations is the first one bounded by gaps on both sides
    assert summary["windows"]["0"][0] == truth["iterations"][1][0]
    cmp = load(out / "comparison.json")
    assert cmp["max_makespan_error_pct"] == 0.0
    for name in ("simulated_trace.json", "metrics.json", "utilization.csv"):
        assert (out / name).exists()


def test_replay_synthetic_manifest_reports_zero_error(tmp_path):
    manifest = write(tmp_path / "run.json", {"synth": {"model": SMALL_MODEL, "parallelism": {"tp": 1, "pp": 2, "dp": 2, "num_microbatches": 2}}})
    out = tmp_path / "out"
    assert main(["replay", "--manifest", str(manifest), "--out", str(out)]) == 0
    cmp = load(out / "comparison.json")
    assert cmp["max_makespan_error_pct"] == 0.0
    assert all(v["error_pct"] == 0.0 for v in cmp["ground_truth"].values())


def test_missing_trace_exits_2(tmp_path, capsys):
    missing = tmp_path / "rank_0.json"
    assert main(["replay", "--trace", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert "rank_0.json" in capsys.readouterr().err


def test_bad_window_exits_2(tmp_path, spec_file):
    gen = tmp_path / "gen"
    main(["gen", str(spec_file), "--out", str(gen)])
    assert main(["replay", "--manifest", str(gen / "manifest.json"), "--window", "9,3", "--out", str(tmp_path / "o")]) == 2


def test_whatif_identity_equals_replay(tmp_path, spec_file):
    gen = tmp_path / "gen"
    main(["gen", str(spec_file), "--out", str(gen)])
    cfg = write(tmp_path / "same.json", {})
    out = tmp_path / "w"
    assert main(["whatif", "--manifest", str(gen / "manifest.json"), "--whatif", str(cfg), "--out", str(out)]) == 0
    pred = load(out / "prediction.json")
    assert pred["predicted_makespan_us"] == pred["baseline_makespan_us"]


def test_whatif_dp_scaling_close_to_truth(tmp_path):
    par = {"tp": 1, "pp": 1, "dp": 4, "num_microbatches": 2}
    base = write(tmp_path / "base.json", {"model": SMALL_MODEL, "parallelism": par})
    target = write(tmp_path / "target.json", {"model": SMALL_MODEL, "parallelism": {**par, "dp": 8}})
    main(["gen", str(base), "--out", str(tmp_path / "b")])
    main(["gen", str(target), "--out", str(tmp_path / "t")])
    cfg = write(tmp_path / "dp8.json", {"target_parallelism": {"dp": 8}})
    out = tmp_path / "w"
    assert main(["whatif", "--manifest", str(tmp_path / "b" / "manifest.json"), "--whatif", str(cfg), "--out", str(out)]) == 0
    predicted = load(out / "prediction.json")["predicted_iteration_us"]
    truth = max(load(tmp_path / "t" / "ground_truth.json")["makespan_us"].values())
    assert abs(predicted - truth) / truth < 0.01


def test_whatif_too_few_layers_exits_5(tmp_path, spec_file):
    gen = tmp_path / "gen"
    main(["gen", str(spec_file), "--out", str(gen)])
    cfg = write(tmp_path / "pp8.json", {"target_parallelism": {"pp": 8}})
    assert main(["whatif", "--manifest", str(gen / "manifest.json"), "--whatif", str(cfg), "--out", str(tmp_path / "o")]) == 5


def test_analyze_hand_fixture(tmp_path, data_dir):
    out = tmp_path / "a"
    trace = tmp_path / "rank_0.json"
    trace.write_bytes((data_dir / "hand_fixture.json").read_bytes())
    assert main(["analyze", "--trace", str(trace), "--out", str(out)]) == 0
    rep = load(out / "metrics.json")
    # kernel 50 + copies 4 + 4 + memset 1 inside the 100 us CPU span
    assert rep["makespan_us"] == 100
    assert rep["breakdown"] == {"exposed_compute": 59, "exposed_comm": 0, "overlapped": 0, "other": 41, "total": 100}
    assert rep["utilization"] == [0.59]


def test_analyze_empty_trace(tmp_path):
    trace = write(tmp_path / "rank_0.json", {"traceEvents": []})
    out = tmp_path / "a"
    assert main(["analyze", "--trace", str(trace), "--out", str(out)]) == 0
    rep = load(out / "metrics.json")
    assert rep["makespan_us"] == 0
    assert rep["breakdown"] == {"exposed_compute": 0, "exposed_comm": 0, "overlapped": 0, "other": 0, "total": 0}


def test_analyze_conservation(tmp_path, spec_file):
    gen = tmp_path / "gen"
    main(["gen", str(spec_file), "--out", str(gen)])
    out = tmp_path / "a"
    assert main(["analyze", "--manifest", str(gen / "manifest.json"), "--out", str(out)]) == 0
    for r in load(out / "metrics.json")["ranks"].values():
        b = r["breakdown"]
        assert b["exposed_compute"] + b["exposed_comm"] + b["overlapped"] + b["other"] == b["total"]


def test_commands_are_deterministic(tmp_path, spec_file):
    def run_all(root: Path):
        main(["gen", str(spec_file), "--out", str(root / "gen"), "--seed", "9"])
        man = str(root / "gen" / "manifest.json")
        cfg = write(root / "pp.json", {"target_parallelism": {"pp": 1}})
        main(["replay", "--manifest", man, "--out", str(root / "replay")])
        main(["whatif", "--manifest", man, "--whatif", str(cfg), "--out", str(root / "whatif")])
        main(["analyze", "--manifest", man, "--out", str(root / "analyze")])
        return snapshot(root)

    a, b = run_all(tmp_path / "a"), run_all(tmp_path / "b")
    assert a.keys() == b.keys() and a == b

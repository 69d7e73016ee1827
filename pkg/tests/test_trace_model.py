import json
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from tracesim.trace_model import (
    Category,
    ModelConfig,
    ParallelismConfig,
    TraceEvent,
    TraceEventError,
    TraceParseError,
    detect_iteration_window,
    dump_trace,
    load_multirank,
    parse_trace,
    round_us,
)


def test_empty_document():
    assert parse_trace(b'{"traceEvents":[]}') == []
    assert parse_trace(b"[]") == []


def test_single_launch_maps_fields():
    doc = {"name": "cudaLaunchKernel", "cat": "cuda_runtime", "ph": "X", "ts": 100, "dur": 5, "pid": 0, "tid": 2, "args": {"correlation": 7}}
    (ev,) = parse_trace(json.dumps([doc]))
    assert ev.category is Category.CudaRuntime
    assert ev.correlation_id == 7
    assert (ev.timestamp, ev.duration, ev.process_id, ev.thread_id) == (100, 5, 0, 2)


def test_hand_fixture_categories(data_dir):
    events = parse_trace((data_dir / "hand_fixture.json").read_bytes())
    assert len(events) == 12
    counts = Counter(e.category for e in events)
    assert counts == {
        Category.CpuOp: 1,
        Category.CudaRuntime: 2,
        Category.GpuKernel: 1,
        Category.GpuMemcpy: 2,
        Category.GpuMemset: 1,
        Category.Metadata: 5,
    }
    kernel = next(e for e in events if e.category is Category.GpuKernel)
    assert kernel.stream_id == 7 and kernel.correlation_id == 1
    # 3.5 us rounds half-up
    assert next(e for e in events if e.name.startswith("Memcpy DtoH")).duration == 4


def test_sorted_by_pid_then_ts():
    recs = [
        {"ph": "X", "cat": "cpu_op", "name": "b", "ts": 5, "dur": 1, "pid": 1, "tid": 1},
        {"ph": "X", "cat": "cpu_op", "name": "a", "ts": 9, "dur": 1, "pid": 0, "tid": 1},
        {"ph": "X", "cat": "cpu_op", "name": "c", "ts": 1, "dur": 1, "pid": 1, "tid": 1},
    ]
    assert [e.name for e in parse_trace(json.dumps(recs))] == ["a", "c", "b"]


def test_malformed_json_reports_offset():
    with pytest.raises(TraceParseError) as info:
        parse_trace(b'{"traceEvents": [ {"ph": "X", ')
    assert info.value.offset is not None
    assert "offset" in str(info.value)


def test_missing_dur_names_record_index():
    recs = [
        {"ph": "X", "cat": "cpu_op", "name": "ok", "ts": 0, "dur": 1, "pid": 0, "tid": 1},
        {"ph": "X", "cat": "cpu_op", "name": "bad", "ts": 3, "pid": 0, "tid": 1},
    ]
    with pytest.raises(TraceEventError) as info:
        parse_trace(json.dumps(recs))
    assert info.value.index == 1


def test_unknown_category_is_metadata():
    (ev,) = parse_trace(json.dumps([{"ph": "X", "cat": "mystery", "name": "x", "ts": 0, "dur": 1, "pid": 0, "tid": 0}]))
    assert ev.category is Category.Metadata


def test_custom_category_table():
    recs = [{"ph": "X", "cat": "Kernel", "name": "k", "ts": 0, "dur": 1, "pid": 0, "tid": 7, "args": {"stream": 7}}]
    (ev,) = parse_trace(json.dumps(recs), categories={"Kernel": Category.GpuKernel})
    assert ev.category is Category.GpuKernel


def test_round_half_up():
    assert [round_us(x) for x in (0.5, 1.5, 2.5, 2.49, 7)] == [1, 2, 3, 2, 7]


def test_load_multirank(tmp_path, data_dir):
    assert load_multirank([]) == {}
    raw = (data_dir / "hand_fixture.json").read_bytes()
    for r in (0, 1):
        (tmp_path / f"rank_{r}.json").write_bytes(raw)
    got = load_multirank([tmp_path / "rank_0.json", tmp_path / "rank_1.json"])
    assert set(got) == {0, 1}
    (tmp_path / "a.json").write_bytes(raw)
    (tmp_path / "b.json").write_bytes(raw)
    got = load_multirank([], manifest={3: tmp_path / "a.json", 5: tmp_path / "b.json"})
    assert set(got) == {3, 5}


def test_load_multirank_errors(tmp_path, data_dir):
    raw = (data_dir / "hand_fixture.json").read_bytes()
    (tmp_path / "rank_0.json").write_bytes(raw)
    sub = tmp_path / "x"
    sub.mkdir()
    (sub / "rank_0.json").write_bytes(raw)
    with pytest.raises(ValueError, match="duplicate rank"):
        load_multirank([tmp_path / "rank_0.json", sub / "rank_0.json"])
    missing = tmp_path / "rank_9.json"
    with pytest.raises(OSError, match="rank_9.json"):
        load_multirank([missing])


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(2, 100, 400, 3, 32)  # 3 * 32 != 100
    with pytest.raises(ValueError):
        ParallelismConfig(1, 4, 1, 2)  # fewer microbatches than stages
    with pytest.raises(ValueError):
        ParallelismConfig(0, 1, 1, 1)


def _two_iterations():
    evs = []
    for base in (0, 10_000, 20_000):
        for k in range(5):
            evs.append(TraceEvent("op", Category.CpuOp, base + 100 * k, 90, 0, 1))
    return evs


def test_window_detection_picks_bounded_iteration():
    assert detect_iteration_window(_two_iterations()) == (10_000, 20_000)


def test_window_single_iteration_covers_all():
    evs = _two_iterations()[:5]
    assert detect_iteration_window(evs) == (0, 491)


# -- properties --------------------------------------------------------------

names = st.sampled_from(["aten::mm", "cudaLaunchKernel", "gemm", "ncclKernel", "x"])
cats = st.sampled_from(["cpu_op", "cuda_runtime", "kernel", "gpu_memcpy", "gpu_memset"])


@st.composite
def records(draw):
    cat = draw(cats)
    rec = {
        "ph": "X",
        "cat": cat,
        "name": draw(names),
        "ts": draw(st.integers(0, 10**9)),
        "dur": draw(st.integers(0, 10**6)),
        "pid": draw(st.integers(0, 3)),
        "tid": draw(st.integers(0, 8)),
    }
    args = {}
    if cat in ("kernel", "gpu_memcpy", "gpu_memset"):
        args["stream"] = rec["tid"]
    if rec["name"] == "cudaLaunchKernel" and cat == "cuda_runtime" or draw(st.booleans()):
        args["correlation"] = draw(st.integers(1, 1000))
    if args:
        rec["args"] = args
    return rec


def _fields(ev):
    return (ev.name, ev.category, ev.timestamp, ev.duration, ev.process_id, ev.thread_id, ev.correlation_id, ev.stream_id)


@settings(max_examples=150, deadline=None)
@given(st.lists(records(), max_size=40))
def test_round_trip(recs):
    first = parse_trace(json.dumps(recs))
    second = parse_trace(dump_trace(first))
    assert [_fields(e) for e in first] == [_fields(e) for e in second]


@settings(max_examples=100, deadline=None)
@given(st.lists(records(), max_size=30))
def test_parse_is_deterministic(recs):
    raw = json.dumps(recs).encode()
    assert [_fields(e) for e in parse_trace(raw)] == [_fields(e) for e in parse_trace(raw)]

"""Tiny constructors for hand-written event fixtures."""

from tracesim.trace_model import Category, TraceEvent


def cpu(name, ts, dur, tid=1, pid=0, corr=None, **args):
    cat = Category.CudaRuntime if name.startswith("cuda") else Category.CpuOp
    return TraceEvent(name, cat, ts, dur, pid, tid, corr, None, {k: str(v) for k, v in args.items()})


def kernel(name, ts, dur, stream, pid=0, corr=None, **args):
    return TraceEvent(name, Category.GpuKernel, ts, dur, pid, stream, corr, stream, {k: str(v) for k, v in args.items()})


def launch(ts, corr, dur=5, tid=1, pid=0):
    return cpu("cudaLaunchKernel", ts, dur, tid=tid, pid=pid, corr=corr)


def record_wait_fixture():
    """K1 on stream A; record(ev 3) on A; wait(ev 3) on B; K2 on B."""
    return [
        launch(0, 1),
        kernel("K1", 5, 50, stream=10, corr=1),
        cpu("cudaEventRecord", 6, 1, event=3, stream=10),
        cpu("cudaStreamWaitEvent", 8, 1, event=3, stream=20),
        launch(10, 2),
        kernel("K2", 55, 20, stream=20, corr=2),
    ]


def synth_graph(spec, window="auto"):
    """Generate a synthetic workload and build its merged execution graph."""
    from tracesim.graph import build_graph, configs_from_metadata, merge_graphs
    from tracesim.synth import generate
    from tracesim.trace_model import detect_iteration_window, parse_trace, read_trace_metadata

    res = generate(spec)
    graphs, attrs = [], {}
    for r in sorted(res.events):
        raw = res.trace_json(r)
        events = parse_trace(raw)
        attrs.update(configs_from_metadata(read_trace_metadata(raw)))
        win = detect_iteration_window(events) if window == "auto" else window
        graphs.append(build_graph(events, rank=r, window=win))
    g = merge_graphs(graphs)
    g.attrs.update(attrs)
    return res, g

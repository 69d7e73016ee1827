"""Execution-graph construction from per-rank trace events.

A graph holds CPU and GPU tasks, fixed edges known from trace structure, and
runtime rules for synchronisation calls whose blocking kernel can only be
bound during simulation.  Four dependency families are recovered:

* CPU->CPU: thread program order, plus inter-thread hand-offs detected from
  idle gaps (e.g. the autograd thread waiting on the forward thread).
* CPU->GPU: launch calls linked to kernels by correlation id.
* GPU->CPU: stream/device/event synchronize calls, kept as runtime rules.
* GPU->GPU: stream FIFO order, plus cudaEventRecord/cudaStreamWaitEvent pairs.
"""

from __future__ import annotations

import bisect
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Iterable, Mapping, NamedTuple, Optional, Sequence

from .trace_model import (
    GPU_CATEGORIES,
    LAUNCH_NAMES,
    Category,
    LaneKind,
    ModelConfig,
    OpClass,
    ParallelismConfig,
    ProcessorId,
    Task,
    TaskKind,
    TraceEvent,
    detect_iteration_window,
    parse_trace,
    read_bytes,
    read_trace_metadata,
    rank_from_path,
)

logger = logging.getLogger(__name__)


class RuleKind(Enum):
    StreamSync = "stream_sync"
    DeviceSync = "device_sync"
    EventSync = "event_sync"


class EdgeKind(IntEnum):
    LANE = 0  # same thread / same stream program order
    THREAD = 1  # inter-thread hand-off
    LAUNCH = 2  # CPU launch -> GPU task
    STREAM = 3  # record/wait inter-stream ordering


class Edge(NamedTuple):
    src: int
    dst: int
    kind: EdgeKind = EdgeKind.LANE


@dataclass
class RuntimeRule:
    kind: RuleKind
    waiting_task: int
    lanes: frozenset = frozenset()
    event_id: Optional[int] = None
    record_task: Optional[int] = None

    @property
    def watched_scope(self):
        return self.event_id if self.kind is RuleKind.EventSync else self.lanes


DEFAULT_COMM_PATTERNS = ("nccl", "allreduce", "allgather", "reducescatter", "sendrecv", "alltoall")


@dataclass
class BuildPolicy:
    gap_threshold_us: int = 1000
    launch_names: frozenset = LAUNCH_NAMES
    sync_names: dict = field(
        default_factory=lambda: {
            "cudaDeviceSynchronize": RuleKind.DeviceSync,
            "cudaStreamSynchronize": RuleKind.StreamSync,
            "cudaEventSynchronize": RuleKind.EventSync,
        }
    )
    record_names: frozenset = frozenset({"cudaEventRecord", "cudaEventRecordWithFlags"})
    wait_names: frozenset = frozenset({"cudaStreamWaitEvent"})
    comm_patterns: tuple = DEFAULT_COMM_PATTERNS

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BuildPolicy":
        p = cls()
        if "gap_threshold_us" in d:
            p.gap_threshold_us = int(d["gap_threshold_us"])
        if "launch_names" in d:
            p.launch_names = frozenset(d["launch_names"])
        if "sync_names" in d:
            p.sync_names = {k: RuleKind(v) for k, v in d["sync_names"].items()}
        if "record_names" in d:
            p.record_names = frozenset(d["record_names"])
        if "wait_names" in d:
            p.wait_names = frozenset(d["wait_names"])
        if "comm_patterns" in d:
            p.comm_patterns = tuple(s.lower() for s in d["comm_patterns"])
        if "extra_comm_patterns" in d:
            p.comm_patterns = p.comm_patterns + tuple(s.lower() for s in d["extra_comm_patterns"])
        return p

    @classmethod
    def load(cls, path: str | Path) -> "BuildPolicy":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


DEFAULT_POLICY = BuildPolicy()


class GraphError(ValueError):
    def __init__(self, message: str, witness: Sequence[int] = ()):
        super().__init__(message)
        self.witness = list(witness)


@dataclass
class ExecutionGraph:
    tasks: list[Task]
    fixed_edges: list[Edge]
    runtime_rules: list[RuntimeRule]
    processors: set
    windows: dict = field(default_factory=dict)  # rank -> (start, end)
    diagnostics: list = field(default_factory=list)
    orphans: list = field(default_factory=list)
    attrs: dict = field(default_factory=dict)  # e.g. source model / parallelism
    # kernels that complete together, e.g. the two sides of a send/recv
    rendezvous: list = field(default_factory=list)

    @property
    def iteration_window(self) -> tuple[int, int]:
        if not self.windows:
            return (0, 0)
        return (min(w[0] for w in self.windows.values()), max(w[1] for w in self.windows.values()))

    @property
    def ranks(self) -> list[int]:
        return sorted({p.rank for p in self.processors})

    def rank_origin(self, rank: int) -> int:
        w = self.windows.get(rank)
        return w[0] if w else 0

    def copy(self) -> "ExecutionGraph":
        return ExecutionGraph(
            tasks=[replace(t, meta=dict(t.meta)) for t in self.tasks],
            fixed_edges=list(self.fixed_edges),
            runtime_rules=[replace(r) for r in self.runtime_rules],
            processors=set(self.processors),
            windows=dict(self.windows),
            diagnostics=list(self.diagnostics),
            orphans=list(self.orphans),
            attrs=dict(self.attrs),
            rendezvous=list(self.rendezvous),
        )

    def edge_count_by_kind(self) -> dict[str, int]:
        counts: dict[str, int] = defaultdict(int)
        for e in self.fixed_edges:
            counts[EdgeKind(e.kind).name] += 1
        return dict(counts)


# --------------------------------------------------------------------------
# classification


def classify_task(name: str, category: Category, policy: BuildPolicy | None = None) -> OpClass:
    policy = policy or DEFAULT_POLICY
    if category in GPU_CATEGORIES:
        low = name.lower()
        if any(p in low for p in policy.comm_patterns):
            return OpClass.Communication
        return OpClass.Compute
    if name in policy.launch_names:
        return OpClass.Launch
    if name in policy.sync_names:
        return OpClass.Sync
    if name in policy.record_names:
        return OpClass.EventRecord
    if name in policy.wait_names:
        return OpClass.EventWait
    return OpClass.Other


# --------------------------------------------------------------------------
# helpers


def _arg_int(task: Task, *keys: str) -> Optional[int]:
    for k in keys:
        v = task.meta.get(k)
        if v is not None:
            try:
                return int(v)
            except ValueError:
                continue
    return None


def _order_key(task: Task) -> tuple:
    # GPU tasks without a launcher sort ahead of CPU calls at the same instant
    return (task.original_start, 1 if task.kind is TaskKind.Cpu else 0, task.id)


def _flatten_cpu(events: list[TraceEvent]) -> tuple[list[TraceEvent], int]:
    """Drop CPU events that enclose other events on the same thread.

    Children inherit the enclosing names as ``scope`` metadata, which is how
    module paths such as ``layers.3`` survive flattening.
    """
    by_thread: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, ev in enumerate(events):
        if ev.category not in GPU_CATEGORIES:
            by_thread[(ev.process_id, ev.thread_id)].append(i)
    drop: set[int] = set()
    scope: dict[int, str] = {}
    for idxs in by_thread.values():
        idxs.sort(key=lambda i: (events[i].timestamp, -events[i].end, i))
        stack: list[int] = []
        for i in idxs:
            ev = events[i]
            if ev.duration == 0:
                # instants mark a point, they do not imply an enclosing call
                continue
            while stack and events[stack[-1]].end <= ev.timestamp:
                stack.pop()
            # partial overlaps are malformed nesting; treat them as siblings
            while stack and ev.end > events[stack[-1]].end:
                stack.pop()
            if stack:
                drop.update(stack)
                scope[i] = "/".join(events[j].name for j in stack)
            stack.append(i)
    if not drop:
        return events, 0
    kept = []
    for i, ev in enumerate(events):
        if i in drop:
            continue
        if i in scope:
            args = dict(ev.args)
            args["scope"] = scope[i]
            ev = replace(ev, args=args)
        kept.append(ev)
    return kept, len(drop)


def tasks_from_events(
    events: Sequence[TraceEvent], policy: BuildPolicy | None = None, rank: int = 0
) -> tuple[list[Task], int]:
    policy = policy or DEFAULT_POLICY
    retained = [e for e in events if e.category is not Category.Metadata]
    retained, dropped = _flatten_cpu(retained)
    order = sorted(
        range(len(retained)),
        key=lambda i: (
            retained[i].timestamp,
            1 if retained[i].category in GPU_CATEGORIES else 0,
            retained[i].thread_id,
            i,
        ),
    )
    tasks: list[Task] = []
    for tid, i in enumerate(order):
        ev = retained[i]
        if ev.category in GPU_CATEGORIES:
            kind = TaskKind.Gpu
            proc = ProcessorId(rank, LaneKind.CudaStream, ev.stream_id if ev.stream_id is not None else ev.thread_id)
        else:
            kind = TaskKind.Cpu
            proc = ProcessorId(rank, LaneKind.CpuThread, ev.thread_id)
        tasks.append(
            Task(
                id=tid,
                kind=kind,
                op_class=classify_task(ev.name, ev.category, policy),
                name=ev.name,
                duration=ev.duration,
                processor=proc,
                original_start=ev.timestamp,
                correlation_id=ev.correlation_id,
                meta=ev.args,
            )
        )
    return tasks, dropped


# --------------------------------------------------------------------------
# dependency inference


def infer_cpu_cpu(
    tasks: Sequence[Task], policy: BuildPolicy | None = None
) -> list[Edge]:
    """Thread program order plus gap-detected inter-thread hand-offs."""
    policy = policy or DEFAULT_POLICY
    edges = lane_edges([t for t in tasks if t.kind is TaskKind.Cpu])
    edges.extend(infer_handoffs(tasks, policy))
    return edges


def lane_edges(tasks: Iterable[Task]) -> list[Edge]:
    lanes: dict[ProcessorId, list[Task]] = defaultdict(list)
    for t in tasks:
        lanes[t.processor].append(t)
    edges: list[Edge] = []
    for lane in sorted(lanes):
        seq = sorted(lanes[lane], key=lambda t: (t.original_start, t.id))
        edges.extend(Edge(a.id, b.id, EdgeKind.LANE) for a, b in zip(seq, seq[1:]))
    return edges


def infer_handoffs(tasks: Sequence[Task], policy: BuildPolicy | None = None) -> list[Edge]:
    """For every CPU task preceded by an idle gap >= threshold on its thread,
    add an edge from the latest task on another thread of the same rank that
    finished no later than it started."""
    policy = policy or DEFAULT_POLICY
    threshold = policy.gap_threshold_us
    by_rank: dict[int, dict[int, list[Task]]] = defaultdict(lambda: defaultdict(list))
    origin: dict[int, int] = {}
    for t in tasks:
        r = t.processor.rank
        origin[r] = min(origin.get(r, t.original_start), t.original_start)
        if t.kind is TaskKind.Cpu:
            by_rank[r][t.processor.lane].append(t)
    edges: list[Edge] = []
    for rank in sorted(by_rank):
        threads = by_rank[rank]
        if len(threads) < 2:
            continue
        ends: dict[int, tuple[list, list]] = {}
        for lane, seq in threads.items():
            seq.sort(key=lambda t: (t.original_start, t.id))
            pairs = sorted((t.original_end, t.id) for t in seq)
            ends[lane] = ([p[0] for p in pairs], [p[1] for p in pairs])
        for lane in sorted(threads):
            reach = origin[rank]
            for t in threads[lane]:
                gap = t.original_start - reach
                reach = max(reach, t.original_end)
                if gap < threshold:
                    continue
                best = None
                for other, (e_list, id_list) in ends.items():
                    if other == lane:
                        continue
                    k = bisect.bisect_right(e_list, t.original_start)
                    if k:
                        cand = (e_list[k - 1], id_list[k - 1])
                        if best is None or cand > best:
                            best = cand
                if best is not None:
                    edges.append(Edge(best[1], t.id, EdgeKind.THREAD))
                    logger.debug("inter-thread edge %d -> %d (gap %d us)", best[1], t.id, gap)
    return edges


def infer_cpu_gpu(tasks: Sequence[Task]) -> tuple[list[Edge], list[int], list[int]]:
    """Correlation-id links.  Returns (edges, orphan GPU ids, unmatched launch ids)."""
    gpu_by_corr: dict[tuple[int, int], list[int]] = defaultdict(list)
    for t in tasks:
        if t.kind is TaskKind.Gpu and t.correlation_id is not None:
            gpu_by_corr[(t.processor.rank, t.correlation_id)].append(t.id)
    edges: list[Edge] = []
    linked: set[int] = set()
    unmatched: list[int] = []
    for t in tasks:
        if t.kind is not TaskKind.Cpu or t.correlation_id is None:
            continue
        hits = gpu_by_corr.get((t.processor.rank, t.correlation_id))
        if not hits:
            if t.op_class is OpClass.Launch:
                unmatched.append(t.id)
            continue
        for g in hits:
            edges.append(Edge(t.id, g, EdgeKind.LAUNCH))
            linked.add(g)
    orphans = [t.id for t in tasks if t.kind is TaskKind.Gpu and t.id not in linked]
    return edges, orphans, unmatched


class _StreamIndex:
    """Per-stream GPU tasks sorted by the program position of their launch."""

    def __init__(self, tasks: Sequence[Task], launcher: Mapping[int, Task]):
        lanes: dict[ProcessorId, list[tuple[tuple, int]]] = defaultdict(list)
        for t in tasks:
            if t.kind is TaskKind.Gpu:
                src = launcher.get(t.id, t)
                lanes[t.processor].append((_order_key(src) if src is not t else _order_key(t), t.id))
        self.keys: dict[ProcessorId, list[tuple]] = {}
        self.ids: dict[ProcessorId, list[int]] = {}
        for lane, items in lanes.items():
            items.sort()
            self.keys[lane] = [k for k, _ in items]
            self.ids[lane] = [i for _, i in items]

    def last_before(self, lane: ProcessorId, key: tuple) -> Optional[int]:
        keys = self.keys.get(lane)
        if not keys:
            return None
        k = bisect.bisect_left(keys, key)
        return self.ids[lane][k - 1] if k else None

    def first_after(self, lane: ProcessorId, key: tuple) -> Optional[int]:
        keys = self.keys.get(lane)
        if not keys:
            return None
        k = bisect.bisect_right(keys, key)
        return self.ids[lane][k] if k < len(keys) else None


def _records_by_event(tasks: Sequence[Task]) -> dict[tuple[int, int], tuple[list, list]]:
    recs: dict[tuple[int, int], list[tuple[tuple, int]]] = defaultdict(list)
    for t in tasks:
        if t.op_class is OpClass.EventRecord:
            ev = _arg_int(t, "event")
            if ev is not None:
                recs[(t.processor.rank, ev)].append((_order_key(t), t.id))
    out = {}
    for k, items in recs.items():
        items.sort()
        out[k] = ([a for a, _ in items], [b for _, b in items])
    return out


def _latest_record(records, rank: int, event: int, key: tuple) -> Optional[int]:
    entry = records.get((rank, event))
    if not entry:
        return None
    k = bisect.bisect_left(entry[0], key)
    return entry[1][k - 1] if k else None


def infer_gpu_gpu(
    tasks: Sequence[Task], launch_edges: Sequence[Edge]
) -> tuple[list[Edge], list[dict]]:
    """Stream FIFO chains plus record/wait inter-stream edges.

    A wait binds to the most recent earlier record of the same event id; the
    record captures the last kernel enqueued on its stream before it, and the
    wait gates the first kernel enqueued on the waiting stream after it.
    """
    edges = lane_edges(t for t in tasks if t.kind is TaskKind.Gpu)
    edges.extend(_event_edges(tasks, launch_edges))
    diags: list[dict] = []
    return edges, diags


def _event_edges(tasks: Sequence[Task], launch_edges: Sequence[Edge], diags: list | None = None) -> list[Edge]:
    by_id = {t.id: t for t in tasks}
    launcher = {e.dst: by_id[e.src] for e in launch_edges}
    index = _StreamIndex(tasks, launcher)
    records = _records_by_event(tasks)
    edges: list[Edge] = []
    for t in tasks:
        if t.op_class is not OpClass.EventWait:
            continue
        ev = _arg_int(t, "event")
        stream = _arg_int(t, "stream")
        if ev is None or stream is None:
            continue
        rank = t.processor.rank
        rec_id = _latest_record(records, rank, ev, _order_key(t))
        if rec_id is None:
            if diags is not None:
                diags.append({"kind": "wait_without_record", "task": t.id, "event": ev})
            continue
        rec = by_id[rec_id]
        rec_stream = _arg_int(rec, "stream")
        if rec_stream is None or rec_stream == stream:
            continue
        src = index.last_before(ProcessorId(rank, LaneKind.CudaStream, rec_stream), _order_key(rec))
        dst = index.first_after(ProcessorId(rank, LaneKind.CudaStream, stream), _order_key(t))
        if src is not None and dst is not None:
            edges.append(Edge(src, dst, EdgeKind.STREAM))
    return edges


def infer_gpu_cpu(
    tasks: Sequence[Task], policy: BuildPolicy | None = None, diags: list | None = None
) -> list[RuntimeRule]:
    """One runtime rule per synchronize call."""
    policy = policy or DEFAULT_POLICY
    streams: dict[int, set[ProcessorId]] = defaultdict(set)
    for t in tasks:
        if t.kind is TaskKind.Gpu:
            streams[t.processor.rank].add(t.processor)
    records = _records_by_event(tasks)
    by_id = {t.id: t for t in tasks}
    rules: list[RuntimeRule] = []
    for t in tasks:
        if t.op_class is not OpClass.Sync:
            continue
        kind = policy.sync_names.get(t.name)
        if kind is None:
            continue
        rank = t.processor.rank
        if kind is RuleKind.DeviceSync:
            rules.append(RuntimeRule(kind, t.id, frozenset(streams[rank])))
        elif kind is RuleKind.StreamSync:
            s = _arg_int(t, "stream")
            lane = ProcessorId(rank, LaneKind.CudaStream, s) if s is not None else None
            if lane is None or lane not in streams[rank]:
                if diags is not None:
                    diags.append({"kind": "sync_unknown_stream", "task": t.id, "stream": s})
                logger.warning("stream sync %d names unseen stream %s", t.id, s)
                rules.append(RuntimeRule(kind, t.id, frozenset()))
            else:
                rules.append(RuntimeRule(kind, t.id, frozenset({lane})))
        else:
            ev = _arg_int(t, "event")
            rec_id = _latest_record(records, rank, ev, _order_key(t)) if ev is not None else None
            lanes: frozenset = frozenset()
            if rec_id is not None:
                rs = _arg_int(by_id[rec_id], "stream")
                if rs is not None:
                    lanes = frozenset({ProcessorId(rank, LaneKind.CudaStream, rs)})
            else:
                if diags is not None:
                    diags.append({"kind": "event_sync_without_record", "task": t.id, "event": ev})
            rules.append(RuntimeRule(kind, t.id, lanes, event_id=ev, record_task=rec_id))
    return rules


# --------------------------------------------------------------------------
# assembly


def wire(
    tasks: list[Task],
    handoffs: Sequence[Edge],
    policy: BuildPolicy | None = None,
) -> tuple[list[Edge], list[RuntimeRule], list[dict], list[int]]:
    """Derive every fixed edge and runtime rule from program order.

    `tasks` must be indexed by id.  Hand-off edges are passed in because they
    come either from gap detection (traces) or from re-assembled programs.
    """
    policy = policy or DEFAULT_POLICY
    diags: list[dict] = []
    edges = lane_edges(tasks)
    edges.extend(handoffs)
    launch, orphans, unmatched = infer_cpu_gpu(tasks)
    edges.extend(launch)
    edges.extend(_event_edges(tasks, launch, diags))
    rules = infer_gpu_cpu(tasks, policy, diags)
    if unmatched:
        logger.warning("%d launch calls matched no kernel", len(unmatched))
        diags.append({"kind": "unmatched_launch", "count": len(unmatched), "tasks": unmatched[:20]})
    if orphans:
        diags.append({"kind": "orphan_gpu_tasks", "count": len(orphans), "tasks": orphans[:20]})
    return edges, rules, diags, orphans


def topological_order(n: int, edges: Iterable[Edge]) -> list[int]:
    """Kahn's algorithm; raises GraphError with a cycle witness."""
    succ: list[list[int]] = [[] for _ in range(n)]
    indeg = [0] * n
    for e in edges:
        succ[e.src].append(e.dst)
        indeg[e.dst] += 1
    stack = [i for i in range(n - 1, -1, -1) if indeg[i] == 0]
    order: list[int] = []
    while stack:
        u = stack.pop()
        order.append(u)
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                stack.append(v)
    if len(order) != n:
        witness = find_cycle(n, succ, indeg)
        raise GraphError(f"dependency cycle through tasks {witness}", witness)
    return order


def find_cycle(n: int, succ: Sequence[Sequence[int]], indeg: Sequence[int]) -> list[int]:
    """Walk successors inside the residual (non-sorted) subgraph until a repeat."""
    start = next(i for i in range(n) if indeg[i] > 0)
    seen: dict[int, int] = {}
    path: list[int] = []
    u = start
    while u not in seen:
        seen[u] = len(path)
        path.append(u)
        u = next(v for v in succ[u] if indeg[v] > 0)
    return path[seen[u]:]


def build_graph(
    events: Sequence[TraceEvent],
    policy: BuildPolicy | None = None,
    rank: int = 0,
    window: tuple[int, int] | None = None,
) -> ExecutionGraph:
    """Construct one rank's execution graph from its (windowed) events."""
    policy = policy or DEFAULT_POLICY
    if window is not None:
        events = [e for e in events if window[0] <= e.timestamp < window[1]]
    tasks, dropped = tasks_from_events(events, policy, rank)
    handoffs = infer_handoffs(tasks, policy)
    edges, rules, diags, orphans = wire(tasks, handoffs, policy)
    if dropped:
        diags.insert(0, {"kind": "flattened_parents", "count": dropped})
    if handoffs:
        diags.append({"kind": "inter_thread_edges", "count": len(handoffs)})
    topological_order(len(tasks), edges)
    processors = {t.processor for t in tasks}
    windows = {}
    if tasks:
        windows[rank] = (
            min(t.original_start for t in tasks),
            max(t.original_end for t in tasks),
        )
    return ExecutionGraph(tasks, edges, rules, processors, windows, diags, orphans)


def merge_graphs(graphs: Sequence[ExecutionGraph]) -> ExecutionGraph:
    """Concatenate graphs (normally one per rank) with renumbered task ids."""
    tasks: list[Task] = []
    edges: list[Edge] = []
    rules: list[RuntimeRule] = []
    processors: set = set()
    windows: dict = {}
    diags: list = []
    orphans: list = []
    attrs: dict = {}
    groups: list = []
    for g in graphs:
        for k, v in g.attrs.items():
            attrs.setdefault(k, v)
        off = len(tasks)
        for t in g.tasks:
            tasks.append(replace(t, id=t.id + off, meta=dict(t.meta)))
        edges.extend(Edge(e.src + off, e.dst + off, e.kind) for e in g.fixed_edges)
        for r in g.runtime_rules:
            rules.append(
                replace(
                    r,
                    waiting_task=r.waiting_task + off,
                    record_task=None if r.record_task is None else r.record_task + off,
                )
            )
        processors |= g.processors
        for rank, w in g.windows.items():
            if rank in windows:
                raise GraphError(f"rank {rank} appears in more than one graph")
            windows[rank] = w
        diags.extend(g.diagnostics)
        orphans.extend(o + off for o in g.orphans)
        groups.extend(tuple(i + off for i in grp) for grp in g.rendezvous)
    return ExecutionGraph(tasks, edges, rules, processors, windows, diags, orphans, attrs, groups)


def configs_from_metadata(meta: Mapping[str, Any]) -> dict:
    """Model / parallelism descriptions carried in a trace's top-level keys."""
    attrs: dict = {}
    try:
        if meta.get("parallelConfig"):
            attrs["parallelism"] = ParallelismConfig.from_dict(meta["parallelConfig"])
        if meta.get("modelConfig"):
            attrs["model"] = ModelConfig.from_dict(meta["modelConfig"])
        if isinstance(meta.get("workload"), Mapping):
            attrs["workload"] = dict(meta["workload"])
    except (TypeError, ValueError) as exc:
        logger.warning("ignoring malformed configuration metadata: %s", exc)
    return attrs


Window = Optional[tuple[int, int] | str]


def load_graph(
    traces: Mapping[int, str | Path] | Sequence[str | Path],
    policy: BuildPolicy | None = None,
    window: Window = "auto",
) -> ExecutionGraph:
    """Parse per-rank trace files and merge their graphs.

    `traces` maps rank -> path, or is a list of paths whose names carry the
    rank.  `window` is an explicit [start, end) range, ``"auto"`` for one
    detected iteration per rank, or None for the whole trace.
    """
    if not isinstance(traces, Mapping):
        traces = {rank_from_path(p): p for p in traces}
    graphs = []
    attrs: dict = {}
    for rank in sorted(traces):
        raw = read_bytes(traces[rank])
        events = parse_trace(raw)
        for k, v in configs_from_metadata(read_trace_metadata(raw)).items():
            attrs.setdefault(k, v)
        win = detect_iteration_window(events) if window == "auto" else window
        graphs.append(build_graph(events, policy, rank=rank, window=win))
    g = merge_graphs(graphs)
    g.attrs.update(attrs)
    return g

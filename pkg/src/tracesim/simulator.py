"""Discrete-event replay of an execution graph.

Time advances chronologically.  A task becomes feasible once its fixed
predecessors have finished and starts when its lane is free.  Synchronize
calls are resolved when they are reached: the call waits for every kernel
already enqueued on the watched streams, and re-checks when those finish in
case more work was enqueued meanwhile.  Rendezvous groups (both sides of a
transfer) each hold their lane from their own start and all finish together,
a fixed cost after the last member arrives.
"""

from __future__ import annotations

import heapq
import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional

from .graph import EdgeKind, ExecutionGraph, GraphError, RuleKind, find_cycle
from .trace_model import ProcessorId, TaskKind


class SimulationError(RuntimeError):
    def __init__(self, message: str, blocked: dict | None = None):
        super().__init__(message)
        self.blocked = blocked or {}


def pick(ready: Iterable[int], graph: ExecutionGraph) -> int:
    """Deterministic choice among simultaneously ready tasks."""
    tasks = graph.tasks
    return min(ready, key=lambda i: (tasks[i].original_start, i))


@dataclass
class SimulatedTrace:
    graph: ExecutionGraph
    starts: list[int]
    ends: list[int]

    @property
    def entries(self) -> list[tuple[int, int, int, ProcessorId]]:
        tasks = self.graph.tasks
        out = [(t.id, self.starts[t.id], self.ends[t.id], t.processor) for t in tasks]
        out.sort(key=lambda e: (e[3], e[1], e[0]))
        return out

    @property
    def makespan(self) -> int:
        if not self.starts:
            return 0
        return max(self.ends) - min(self.starts)

    def span(self, rank: int | None = None) -> tuple[int, int]:
        if rank is None:
            if not self.starts:
                return (0, 0)
            return (min(self.starts), max(self.ends))
        idx = [t.id for t in self.graph.tasks if t.processor.rank == rank]
        if not idx:
            return (0, 0)
        return (min(self.starts[i] for i in idx), max(self.ends[i] for i in idx))

    def rank_makespan(self, rank: int) -> int:
        a, b = self.span(rank)
        return b - a

    def rank_makespans(self) -> dict[int, int]:
        lo: dict[int, int] = {}
        hi: dict[int, int] = {}
        for t in self.graph.tasks:
            r = t.processor.rank
            s, e = self.starts[t.id], self.ends[t.id]
            if r not in lo or s < lo[r]:
                lo[r] = s
            if r not in hi or e > hi[r]:
                hi[r] = e
        return {r: hi[r] - lo[r] for r in sorted(lo)}

    def to_chrome_trace(self) -> str:
        events = []
        for t in self.graph.tasks:
            events.append(
                {
                    "name": t.name,
                    "cat": "kernel" if t.kind is TaskKind.Gpu else "cpu_op",
                    "ph": "X",
                    "ts": self.starts[t.id],
                    "dur": self.ends[t.id] - self.starts[t.id],
                    "pid": t.processor.rank,
                    "tid": t.processor.lane,
                    "args": {"task_id": t.id, "op_class": t.op_class.value},
                }
            )
        events.sort(key=lambda e: (e["pid"], e["ts"], e["args"]["task_id"]))
        return json.dumps({"traceEvents": events}, sort_keys=True, separators=(",", ":"))


def original_schedule(graph: ExecutionGraph) -> SimulatedTrace:
    """The recorded timeline of a graph, in the same shape as a simulation."""
    starts = [t.original_start for t in graph.tasks]
    ends = [t.original_start + t.duration for t in graph.tasks]
    return SimulatedTrace(graph, starts, ends)


# --------------------------------------------------------------------------
# validation


def validate(graph: ExecutionGraph) -> list[dict]:
    """Report structural problems without raising."""
    issues: list[dict] = []
    n = len(graph.tasks)
    for i, t in enumerate(graph.tasks):
        if t.id != i:
            issues.append({"kind": "id_mismatch", "task": i, "id": t.id})
        if t.duration < 0:
            issues.append({"kind": "negative_duration", "task": t.id, "duration": t.duration})
        thread = t.processor.lane_kind == 0
        if (t.kind is TaskKind.Cpu) != thread:
            issues.append({"kind": "processor_mismatch", "task": t.id})
    succ: list[list[int]] = [[] for _ in range(n)]
    indeg = [0] * n
    tasks = graph.tasks
    for e in graph.fixed_edges:
        if not (0 <= e.src < n and 0 <= e.dst < n):
            issues.append({"kind": "dangling_edge", "edge": [e.src, e.dst]})
            continue
        succ[e.src].append(e.dst)
        indeg[e.dst] += 1
        if e.kind == EdgeKind.LANE:
            a, b = tasks[e.src], tasks[e.dst]
            if a.processor != b.processor or a.original_start > b.original_start:
                issues.append({"kind": "chain_order", "edge": [e.src, e.dst]})
    deg = list(indeg)
    stack = [i for i in range(n) if deg[i] == 0]
    seen = 0
    while stack:
        u = stack.pop()
        seen += 1
        for v in succ[u]:
            deg[v] -= 1
            if deg[v] == 0:
                stack.append(v)
    if seen != n:
        issues.append({"kind": "cycle", "witness": find_cycle(n, succ, deg)})
    for grp in graph.rendezvous:
        if any(not 0 <= i < n for i in grp):
            issues.append({"kind": "dangling_rendezvous", "group": list(grp)})
        elif len({tasks[i].processor for i in grp}) != len(set(grp)):
            issues.append({"kind": "rendezvous_lane_clash", "group": list(grp)})
    for r in graph.runtime_rules:
        if not 0 <= r.waiting_task < n:
            issues.append({"kind": "dangling_rule", "task": r.waiting_task})
            continue
        if r.kind is RuleKind.EventSync:
            if r.event_id is None or not r.lanes:
                issues.append({"kind": "empty_scope", "task": r.waiting_task})
        elif not r.lanes:
            issues.append({"kind": "empty_scope", "task": r.waiting_task})
    return issues


# --------------------------------------------------------------------------
# simulation


def simulate(graph: ExecutionGraph) -> SimulatedTrace:
    tasks = graph.tasks
    n = len(tasks)
    for t in tasks:
        if t.duration < 0:
            raise ValueError(f"task {t.id} has negative duration {t.duration}")

    succ: list[list[int]] = [[] for _ in range(n)]
    deps = [0] * n
    launch_left = [0] * n
    launch_succ: list[list[int]] = [[] for _ in range(n)]
    for src, dst, kind in graph.fixed_edges:
        succ[src].append(dst)
        deps[dst] += 1
        if kind == EdgeKind.LAUNCH:
            launch_left[dst] += 1
            launch_succ[src].append(dst)

    lane_index: dict[ProcessorId, int] = {}
    lane_of = [0] * n
    orig = [0] * n
    dur = [0] * n
    for t in tasks:
        li = lane_index.get(t.processor)
        if li is None:
            li = lane_index[t.processor] = len(lane_index)
        lane_of[t.id] = li
        orig[t.id] = t.original_start
        dur[t.id] = t.duration
    n_lanes = len(lane_index)
    origin = {r: graph.rank_origin(r) for r in {p.rank for p in lane_index}}
    if not graph.windows and tasks:
        lo = min(orig)
        origin = {r: lo for r in origin}

    rule_of: dict[int, object] = {}
    record_watchers: dict[int, int] = {}  # record task -> watched lane
    for r in graph.runtime_rules:
        rule_of[r.waiting_task] = r
        if r.kind is RuleKind.EventSync and r.record_task is not None and r.lanes:
            record_watchers[r.record_task] = lane_index.get(next(iter(r.lanes)), -1)

    watched: set[int] = set()
    for r in graph.runtime_rules:
        for lane in r.lanes:
            if lane in lane_index:
                watched.add(lane_index[lane])

    group_of: dict[int, int] = {}
    members: list[list[int]] = []
    group_left: list[int] = []
    group_cost: list[int] = []
    for grp in graph.rendezvous:
        gi = len(members)
        ids = sorted(set(grp))
        for i in ids:
            group_of[i] = gi
        members.append(ids)
        group_left.append(len(ids))
        group_cost.append(max(dur[i] for i in ids))

    INF = None
    start: list[Optional[int]] = [INF] * n
    end = [0] * n
    known = [False] * n  # end time determined
    ready_at = [0] * n
    lane_clock = [0] * n_lanes
    lane_open = [True] * n_lanes  # False while a rendezvous member holds it
    parked: list[list] = [[] for _ in range(n_lanes)]
    enq_heap: list[list] = [[] for _ in range(n_lanes)]
    pending: list[set] = [set() for _ in range(n_lanes)]
    enq_at = [0] * n
    rt_waiters: dict[int, list[int]] = defaultdict(list)
    rt_left = [0] * n
    rt_time = [0] * n
    captured: dict[int, tuple[list[int], int]] = {}

    heap: list[tuple[int, int, int, int]] = []
    for t in tasks:
        o = origin[t.processor.rank]
        ready_at[t.id] = o
        if deps[t.id] == 0:
            heap.append((o, 1 if t.id in rule_of else 0, t.original_start, t.id))
        if lane_of[t.id] in watched and launch_left[t.id] == 0:
            enq_at[t.id] = o
            enq_heap[lane_of[t.id]].append((o, t.id))
    heapq.heapify(heap)
    for h in enq_heap:
        heapq.heapify(h)

    def drain(li: int, now: int) -> set:
        h = enq_heap[li]
        p = pending[li]
        while h and h[0][0] <= now:
            _, tid = heapq.heappop(h)
            if not known[tid]:
                p.add(tid)
        return p

    def blockers_for(rule, now: int) -> tuple[list[int], int]:
        latest = now
        blocked: list[int] = []
        if rule.kind is RuleKind.EventSync:
            rec = rule.record_task
            if rec is None or rec not in captured:
                return [], now
            ids, busy = captured[rec]
            latest = max(latest, busy)
            for c in ids:
                if not known[c]:
                    blocked.append(c)
                else:
                    latest = max(latest, end[c])
            return blocked, latest
        for lane in rule.lanes:
            li = lane_index.get(lane)
            if li is None:
                continue
            blocked.extend(drain(li, now))
            latest = max(latest, lane_clock[li])
        return blocked, latest

    pop = heapq.heappop
    push = heapq.heappush
    done = 0

    def finish(tid: int, e: int) -> None:
        nonlocal done
        li = lane_of[tid]
        end[tid] = e
        known[tid] = True
        lane_clock[li] = e
        done += 1
        if not lane_open[li]:
            lane_open[li] = True
            for is_sync, o, w in parked[li]:
                push(heap, (e, is_sync, o, w))
            parked[li].clear()
        if li in watched:
            pending[li].discard(tid)
        for v in succ[tid]:
            if e > ready_at[v]:
                ready_at[v] = e
            deps[v] -= 1
            if deps[v] == 0:
                push(heap, (ready_at[v], 1 if v in rule_of else 0, orig[v], v))
        for v in launch_succ[tid]:
            if e > enq_at[v]:
                enq_at[v] = e
            launch_left[v] -= 1
            if launch_left[v] == 0 and lane_of[v] in watched:
                push(enq_heap[lane_of[v]], (enq_at[v], v))
        waiters = rt_waiters.pop(tid, None)
        if waiters:
            for w in waiters:
                if e > rt_time[w]:
                    rt_time[w] = e
                rt_left[w] -= 1
                if rt_left[w] == 0:
                    push(heap, (rt_time[w], 1, orig[w], w))

    while heap:
        now, is_sync, o, tid = pop(heap)
        if start[tid] is not None:
            continue
        li = lane_of[tid]
        if not lane_open[li]:
            parked[li].append((is_sync, o, tid))
            continue
        if lane_clock[li] > now:
            push(heap, (lane_clock[li], is_sync, o, tid))
            continue
        if is_sync:
            blocked, latest = blockers_for(rule_of[tid], now)
            if blocked:
                rt_left[tid] = len(blocked)
                rt_time[tid] = latest
                for b in blocked:
                    rt_waiters[b].append(tid)
                continue
            if latest > now:
                push(heap, (latest, 1, o, tid))
                continue
        start[tid] = now
        if tid in record_watchers:
            wl = record_watchers[tid]
            if wl >= 0:
                ids = [c for c in drain(wl, now) if c != tid]
                captured[tid] = (ids, lane_clock[wl])
            else:
                captured[tid] = ([], now)
        gi = group_of.get(tid)
        if gi is None:
            finish(tid, now + dur[tid])
            continue
        # a rendezvous member occupies its lane until the last member arrives
        lane_open[li] = False
        group_left[gi] -= 1
        if group_left[gi] == 0:
            e = now + group_cost[gi]
            for m in members[gi]:
                finish(m, e)

    if done != n:
        blocked = {}
        for t in tasks:
            if start[t.id] is None and len(blocked) < 20:
                blocked[t.id] = {"fixed_deps_left": deps[t.id], "runtime_deps_left": rt_left[t.id]}
        _raise_deadlock(graph, blocked, n - done)
    return SimulatedTrace(graph, start, end)  # type: ignore[arg-type]


def _raise_deadlock(graph: ExecutionGraph, blocked: dict, remaining: int) -> None:
    n = len(graph.tasks)
    succ: list[list[int]] = [[] for _ in range(n)]
    indeg = [0] * n
    for e in graph.fixed_edges:
        succ[e.src].append(e.dst)
        indeg[e.dst] += 1
    stack = [i for i in range(n) if indeg[i] == 0]
    while stack:
        u = stack.pop()
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                stack.append(v)
    if any(indeg):
        witness = find_cycle(n, succ, indeg)
        raise GraphError(f"dependency cycle through tasks {witness}", witness)
    raise SimulationError(
        f"deadlock: {remaining} tasks never became runnable; first blocked: {sorted(blocked)[:10]}",
        blocked,
    )

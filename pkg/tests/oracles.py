"""Independent reference implementations used only by the tests.

These are deliberately naive (per-tick scans, greedy enumeration) so that
they share no logic with the production code they check.
"""

from __future__ import annotations

import random

from tracesim.graph import Edge, EdgeKind, ExecutionGraph, RuleKind, RuntimeRule
from tracesim.trace_model import LaneKind, OpClass, ProcessorId, Task, TaskKind


class OracleDeadlock(Exception):
    pass


def tick_simulate(graph: ExecutionGraph, limit: int = 1_000_000) -> tuple[list[int], list[int]]:
    """Global time stepping, one microsecond at a time.

    Within a tick, ordinary tasks are started to a fixpoint first, then
    synchronize calls are considered one at a time.  Ties on a lane go to
    the smallest (original_start, id).
    """
    tasks = graph.tasks
    n = len(tasks)
    preds = [[] for _ in range(n)]
    launch_preds = [[] for _ in range(n)]
    for e in graph.fixed_edges:
        preds[e.dst].append(e.src)
        if e.kind == EdgeKind.LAUNCH:
            launch_preds[e.dst].append(e.src)
    rules = {r.waiting_task: r for r in graph.runtime_rules}
    lanes: dict = {}
    for t in tasks:
        lanes.setdefault(t.processor, []).append(t.id)
    start = [None] * n
    end = [None] * n
    order = sorted(range(n), key=lambda i: (tasks[i].original_start, i))
    t0 = min((graph.rank_origin(r) for r in graph.windows), default=0) if graph.windows else 0

    def finished(i, now):
        return end[i] is not None and end[i] <= now

    def lane_free(i, now):
        return all(start[j] is None or end[j] <= now for j in lanes[tasks[i].processor])

    def enqueued_by(i, now):
        return all(finished(p, now) for p in launch_preds[i])

    def rule_ok(rule, now):
        if rule.kind is RuleKind.EventSync:
            rec = rule.record_task
            if rec is None or start[rec] is None or start[rec] > now:
                return True
            cut = start[rec]
            for lane in rule.lanes:
                for j in lanes.get(lane, []):
                    on_time = all(end[p] is not None and end[p] <= cut for p in launch_preds[j])
                    if on_time and not finished(j, now):
                        return False
            return True
        for lane in rule.lanes:
            for j in lanes.get(lane, []):
                if enqueued_by(j, now) and not finished(j, now):
                    return False
        return True

    def can_start(i, now):
        return (
            start[i] is None
            and all(finished(p, now) for p in preds[i])
            and lane_free(i, now)
        )

    remaining = n
    now = t0
    while remaining:
        if now - t0 > limit:
            raise OracleDeadlock("tick limit")
        progressed = True
        started_any = False
        while progressed:
            progressed = False
            for i in order:
                if i not in rules and can_start(i, now):
                    start[i], end[i] = now, now + tasks[i].duration
                    remaining -= 1
                    progressed = started_any = True
        for i in order:
            if i in rules and can_start(i, now) and rule_ok(rules[i], now):
                start[i], end[i] = now, now + tasks[i].duration
                remaining -= 1
                started_any = True
        if remaining and not started_any and all(e is None or e <= now for e in end):
            raise OracleDeadlock(f"stuck at {now}")
        now += 1
    return start, end  # type: ignore[return-value]


def random_program_graph(rng: random.Random, max_tasks: int = 50, max_lanes: int = 4) -> ExecutionGraph:
    """A small random program: CPU threads issue plain work, launches and syncs."""
    n_lanes = rng.randint(2, max_lanes)
    n_threads = rng.randint(1, n_lanes - 1)
    threads = [ProcessorId(0, LaneKind.CpuThread, i + 1) for i in range(n_threads)]
    streams = [ProcessorId(0, LaneKind.CudaStream, 10 + i) for i in range(n_lanes - n_threads)]
    target = rng.randint(2, max_tasks)
    tasks: list[Task] = []
    edges: list[Edge] = []
    rules: list[RuntimeRule] = []
    clock = 0
    last_on: dict = {}

    def add(kind, op, proc, d):
        nonlocal clock
        clock += rng.randint(0, 3)
        t = Task(len(tasks), kind, op, f"t{len(tasks)}", d, proc, clock)
        tasks.append(t)
        prev = last_on.get(proc)
        if prev is not None:
            edges.append(Edge(prev, t.id, EdgeKind.LANE))
        last_on[proc] = t.id
        return t

    records: list[tuple[int, ProcessorId]] = []
    while len(tasks) < target:
        roll = rng.random()
        thread = rng.choice(threads)
        if roll < 0.45 and len(tasks) + 2 <= target:
            # each stream is fed by one thread so FIFO order equals launch order
            si = rng.randrange(len(streams))
            stream = streams[si]
            launch = add(TaskKind.Cpu, OpClass.Launch, threads[si % n_threads], rng.randint(1, 4))
            frontier = launch.id
            k = add(TaskKind.Gpu, OpClass.Compute, stream, rng.randint(1, 20))
            edges.append(Edge(launch.id, k.id, EdgeKind.LAUNCH))
            if frontier > 0 and rng.random() < 0.3:
                src = rng.randrange(frontier)
                if tasks[src].kind is TaskKind.Gpu and tasks[src].processor != stream:
                    edges.append(Edge(src, k.id, EdgeKind.STREAM))
        elif roll < 0.65:
            t = add(TaskKind.Cpu, OpClass.Sync, thread, rng.randint(1, 5))
            pick = rng.random()
            if pick < 0.4:
                rules.append(RuntimeRule(RuleKind.StreamSync, t.id, frozenset({rng.choice(streams)})))
            elif pick < 0.7 or not records:
                rules.append(RuntimeRule(RuleKind.DeviceSync, t.id, frozenset(streams)))
            else:
                rec, lane = rng.choice(records)
                rules.append(RuntimeRule(RuleKind.EventSync, t.id, frozenset({lane}), event_id=rec, record_task=rec))
        elif roll < 0.75:
            t = add(TaskKind.Cpu, OpClass.EventRecord, thread, rng.randint(1, 3))
            records.append((t.id, rng.choice(streams)))
        else:
            t = add(TaskKind.Cpu, OpClass.Other, thread, rng.randint(1, 15))
            if t.id > 0 and rng.random() < 0.3:
                src = rng.randrange(t.id)
                if tasks[src].processor != thread:
                    edges.append(Edge(src, t.id, EdgeKind.THREAD))
    procs = {t.processor for t in tasks}
    return ExecutionGraph(tasks, edges, rules, procs, {0: (0, max(t.original_end for t in tasks))})


# --------------------------------------------------------------------------
# metrics oracles


def tick_breakdown(intervals, window):
    """intervals: (start, end, is_comm).  Scan every microsecond."""
    lo, hi = window
    comp = comm = both = 0
    for x in range(lo, hi):
        c = any(s <= x < e and not k for s, e, k in intervals)
        m = any(s <= x < e and k for s, e, k in intervals)
        if c and m:
            both += 1
        elif c:
            comp += 1
        elif m:
            comm += 1
    return comp, comm, both, (hi - lo) - comp - comm - both


def tick_utilization(intervals, window, bin_width):
    lo, hi = window
    out = []
    b = lo
    while b < hi:
        top = min(b + bin_width, hi)
        covered = sum(1 for x in range(b, top) if any(s <= x < e for s, e in intervals))
        out.append(covered / (top - b))
        b += bin_width
    return out


# --------------------------------------------------------------------------
# 1F1B reference


def greedy_1f1b(pp: int, m: int, stage: int) -> list[tuple[str, int]]:
    """Stage-local greedy: run a backward whenever the activation budget
    (pp - stage in-flight microbatches) is exhausted or forwards ran out."""
    cap = pp - stage
    f = b = 0
    out = []
    while b < m:
        in_flight = f - b
        if f < m and in_flight < cap:
            out.append(("F", f))
            f += 1
        else:
            out.append(("B", b))
            b += 1
    return out

"""Iteration time, GPU time breakdown, utilization and replay error.

All interval arithmetic is on half-open integer intervals ``[start, end)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence, Union

from .graph import DEFAULT_POLICY, BuildPolicy, ExecutionGraph, classify_task
from .simulator import SimulatedTrace, original_schedule
from .trace_model import GPU_CATEGORIES, Category, OpClass, TaskKind, TraceEvent

SCHEMA_VERSION = 1

Interval = tuple[int, int, bool]  # (start, end, is_communication)


@dataclass(frozen=True)
class Breakdown:
    exposed_compute: int = 0
    exposed_comm: int = 0
    overlapped: int = 0
    other: int = 0
    total: int = 0

    def to_dict(self) -> dict[str, int]:
        return asdict(self)


@dataclass(frozen=True)
class UtilizationSeries:
    bin_width: int
    values: list[float]
    start: int = 0


def breakdown_intervals(intervals: Iterable[Interval], window: tuple[int, int]) -> Breakdown:
    """Boundary sweep over compute/communication coverage inside `window`."""
    lo, hi = window
    total = max(0, hi - lo)
    if total == 0:
        return Breakdown()
    deltas: list[tuple[int, int, int]] = []
    for s, e, is_comm in intervals:
        s, e = max(s, lo), min(e, hi)
        if s >= e:
            continue
        if is_comm:
            deltas.append((s, 0, 1))
            deltas.append((e, 0, -1))
        else:
            deltas.append((s, 1, 0))
            deltas.append((e, -1, 0))
    deltas.sort()
    comp = comm = both = 0
    n_comp = n_comm = 0
    prev = lo
    for x, dc, dm in deltas:
        if x > prev:
            span = x - prev
            if n_comp and n_comm:
                both += span
            elif n_comp:
                comp += span
            elif n_comm:
                comm += span
            prev = x
        n_comp += dc
        n_comm += dm
    return Breakdown(comp, comm, both, total - comp - comm - both, total)


def utilization_intervals(
    intervals: Iterable[tuple[int, int]], window: tuple[int, int], bin_width: int = 1000
) -> UtilizationSeries:
    """Fraction of each bin covered by the union of the intervals."""
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    lo, hi = window
    n_bins = math.ceil(max(0, hi - lo) / bin_width)
    covered = [0] * n_bins
    merged: list[list[int]] = []
    for s, e in sorted((max(s, lo), min(e, hi)) for s, e in intervals):
        if s >= e:
            continue
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    for s, e in merged:
        b = (s - lo) // bin_width
        while s < e:
            edge = lo + (b + 1) * bin_width
            part = min(e, edge) - s
            covered[b] += part
            s += part
            b += 1
    # a trailing partial bin is normalised by its own length
    widths = [min(bin_width, hi - lo - i * bin_width) for i in range(n_bins)]
    return UtilizationSeries(bin_width, [c / w for c, w in zip(covered, widths)], lo)


# --------------------------------------------------------------------------
# sources

Source = Union[SimulatedTrace, ExecutionGraph, Sequence[TraceEvent]]


def _as_schedule(source: Source) -> Optional[SimulatedTrace]:
    if isinstance(source, SimulatedTrace):
        return source
    if isinstance(source, ExecutionGraph):
        return original_schedule(source)
    return None


def gpu_intervals(source: Source, rank: int = 0, policy: BuildPolicy | None = None) -> list[Interval]:
    sched = _as_schedule(source)
    if sched is not None:
        out = []
        for t in sched.graph.tasks:
            if t.kind is TaskKind.Gpu and t.processor.rank == rank:
                if t.op_class in (OpClass.Compute, OpClass.Communication):
                    out.append((sched.starts[t.id], sched.ends[t.id], t.op_class is OpClass.Communication))
        return out
    policy = policy or DEFAULT_POLICY
    return [
        (e.timestamp, e.end, classify_task(e.name, e.category, policy) is OpClass.Communication)
        for e in source
        if e.category in GPU_CATEGORIES and e.process_id == rank
    ]


def rank_window(source: Source, rank: int = 0) -> tuple[int, int]:
    sched = _as_schedule(source)
    if sched is not None:
        return sched.span(rank)
    evs = [e for e in source if e.process_id == rank and e.category is not Category.Metadata]
    if not evs:
        return (0, 0)
    return (min(e.timestamp for e in evs), max(e.end for e in evs))


def breakdown(source: Source, rank: int = 0, window: tuple[int, int] | None = None) -> Breakdown:
    return breakdown_intervals(gpu_intervals(source, rank), window or rank_window(source, rank))


def sm_utilization(
    source: Source, rank: int = 0, bin_width: int = 1000, window: tuple[int, int] | None = None
) -> UtilizationSeries:
    spans = [(s, e) for s, e, _ in gpu_intervals(source, rank)]
    return utilization_intervals(spans, window or rank_window(source, rank), bin_width)


# --------------------------------------------------------------------------
# comparison and reports


def pct_error(reference: float, candidate: float) -> Optional[float]:
    if reference == 0:
        return None
    return abs(candidate - reference) / reference * 100.0


def compare(reference: Source, candidate: Source, rank: int | None = 0) -> dict:
    """Relative error of candidate against reference (percent)."""
    ref_win = rank_window(reference, rank) if rank is not None else _overall(reference)
    cand_win = rank_window(candidate, rank) if rank is not None else _overall(candidate)
    ref_ms, cand_ms = ref_win[1] - ref_win[0], cand_win[1] - cand_win[0]
    r_rank = 0 if rank is None else rank
    rb = breakdown(reference, r_rank).to_dict()
    cb = breakdown(candidate, r_rank).to_dict()
    per_cat = {k: pct_error(rb[k], cb[k]) for k in ("exposed_compute", "exposed_comm", "overlapped", "other")}
    report = {
        "schema_version": SCHEMA_VERSION,
        "reference_makespan_us": ref_ms,
        "candidate_makespan_us": cand_ms,
        "makespan_error_pct": pct_error(ref_ms, cand_ms),
        "per_category_error_pct": per_cat,
        "undefined": ref_ms == 0,
        "per_task_start_deltas": None,
    }
    rs, cs = _as_schedule(reference), _as_schedule(candidate)
    if rs is not None and cs is not None and _same_task_space(rs.graph, cs.graph):
        deltas = [c - r for r, c in zip(rs.starts, cs.starts)]
        report["per_task_start_deltas"] = {
            "max_abs_us": max((abs(d) for d in deltas), default=0),
            "mismatched_tasks": sum(1 for d in deltas if d),
            "deltas": deltas if len(deltas) <= 10_000 else None,
        }
    return report


def _overall(source: Source) -> tuple[int, int]:
    sched = _as_schedule(source)
    if sched is not None:
        return sched.span()
    evs = [e for e in source if e.category is not Category.Metadata]
    if not evs:
        return (0, 0)
    return (min(e.timestamp for e in evs), max(e.end for e in evs))


def _same_task_space(a: ExecutionGraph, b: ExecutionGraph) -> bool:
    return len(a.tasks) == len(b.tasks) and all(x.name == y.name for x, y in zip(a.tasks, b.tasks))


def metrics_report(source: Source, ranks: Sequence[int] | None = None, bin_width: int = 1000, reporting_rank: int = 0) -> dict:
    sched = _as_schedule(source)
    if ranks is None:
        if sched is not None:
            ranks = sched.graph.ranks
        else:
            ranks = sorted({e.process_id for e in source})
    per_rank = {}
    for r in ranks:
        win = rank_window(source, r)
        per_rank[str(r)] = {
            "makespan_us": win[1] - win[0],
            "breakdown": breakdown(source, r, win).to_dict(),
            "utilization": sm_utilization(source, r, bin_width, win).values,
        }
    overall = _overall(source)
    head = per_rank.get(str(reporting_rank)) or (next(iter(per_rank.values())) if per_rank else None)
    return {
        "schema_version": SCHEMA_VERSION,
        "makespan_us": overall[1] - overall[0],
        "reporting_rank": reporting_rank,
        "breakdown": head["breakdown"] if head else Breakdown().to_dict(),
        "utilization": head["utilization"] if head else [],
        "bin_width_us": bin_width,
        "ranks": per_rank,
    }


def utilization_csv(series: UtilizationSeries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_start_us", "utilization"])
    for i, v in enumerate(series.values):
        w.writerow([series.start + i * series.bin_width, f"{v:.6f}"])
    return buf.getvalue()

"""Shared domain types and Chrome-trace ingestion.

Profiler dumps arrive as Chrome Trace Event JSON (Kineto style): a top-level
object with a ``traceEvents`` array, or a bare array.  Everything is kept in
integer microseconds.
"""

from __future__ import annotations

import gzip
import json
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Iterable, Mapping, NamedTuple, Optional, Sequence

logger = logging.getLogger(__name__)


class Category(Enum):
    CpuOp = "cpu_op"
    CudaRuntime = "cuda_runtime"
    GpuKernel = "kernel"
    GpuMemcpy = "gpu_memcpy"
    GpuMemset = "gpu_memset"
    Metadata = "metadata"


GPU_CATEGORIES = frozenset({Category.GpuKernel, Category.GpuMemcpy, Category.GpuMemset})

# Profiler `cat` strings drift between framework versions, so this is only
# the default; callers can pass their own (merged on top).
DEFAULT_CATEGORY_TABLE: dict[str, Category] = {
    "cpu_op": Category.CpuOp,
    "operator": Category.CpuOp,
    "user_annotation": Category.CpuOp,
    "python_function": Category.CpuOp,
    "cuda_runtime": Category.CudaRuntime,
    "cuda_driver": Category.CudaRuntime,
    "runtime": Category.CudaRuntime,
    "kernel": Category.GpuKernel,
    "gpu_memcpy": Category.GpuMemcpy,
    "gpu_memset": Category.GpuMemset,
    "metadata": Category.Metadata,
}

LAUNCH_NAMES = frozenset(
    {
        "cudaLaunchKernel",
        "cudaLaunchKernelExC",
        "cuLaunchKernel",
        "cuLaunchKernelEx",
        "cudaLaunchCooperativeKernel",
        "cudaMemcpyAsync",
        "cudaMemsetAsync",
        "cudaMemcpy",
        "cudaMemset",
    }
)

# Names that carry record/wait information even when logged as instants.
_SYNC_POINT_NAMES = frozenset({"cudaEventRecord", "cudaStreamWaitEvent", "cudaEventSynchronize"})


class TraceParseError(ValueError):
    """Malformed JSON document."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class TraceEventError(ValueError):
    """A single record is unusable; `index` is its position in the input array."""

    def __init__(self, message: str, index: int):
        super().__init__(f"event #{index}: {message}")
        self.index = index


@dataclass(slots=True)
class TraceEvent:
    name: str
    category: Category
    timestamp: int
    duration: int
    process_id: int
    thread_id: int
    correlation_id: Optional[int] = None
    stream_id: Optional[int] = None
    args: dict[str, str] = field(default_factory=dict)

    @property
    def end(self) -> int:
        return self.timestamp + self.duration


class TaskKind(Enum):
    Cpu = "cpu"
    Gpu = "gpu"


class OpClass(Enum):
    Compute = "compute"
    Communication = "communication"
    Launch = "launch"
    Sync = "sync"
    EventRecord = "event_record"
    EventWait = "event_wait"
    Other = "other"


class LaneKind(IntEnum):
    CpuThread = 0
    CudaStream = 1


class ProcessorId(NamedTuple):
    rank: int
    lane_kind: LaneKind
    lane: int

    def __str__(self) -> str:
        kind = "thread" if self.lane_kind == LaneKind.CpuThread else "stream"
        return f"rank{self.rank}/{kind}{self.lane}"


@dataclass(slots=True)
class Task:
    id: int
    kind: TaskKind
    op_class: OpClass
    name: str
    duration: int
    processor: ProcessorId
    original_start: int
    correlation_id: Optional[int] = None
    layer_tag: Optional[int] = None
    microbatch_tag: Optional[int] = None
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def original_end(self) -> int:
        return self.original_start + self.duration


def _int_fields(cls: type, d: Mapping[str, Any]) -> dict[str, int]:
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown keys {sorted(unknown)}; expected {sorted(cls.__dataclass_fields__)}")
    return {k: int(v) for k, v in d.items()}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    d_ffn: int
    n_heads: int
    d_head: int
    n_params: int = 0  # informational only

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_ffn", "n_heads", "d_head"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be > 0")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"d_model={self.d_model} != n_heads*d_head={self.n_heads * self.d_head}"
            )

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelConfig":
        return cls(**_int_fields(cls, d))

    def to_dict(self) -> dict[str, int]:
        return {
            "n_params": self.n_params,
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "d_ffn": self.d_ffn,
            "n_heads": self.n_heads,
            "d_head": self.d_head,
        }


@dataclass(frozen=True)
class ParallelismConfig:
    tp: int = 1
    pp: int = 1
    dp: int = 1
    num_microbatches: int = 1

    def __post_init__(self):
        if min(self.tp, self.pp, self.dp) < 1:
            raise ValueError("tp, pp and dp must be >= 1")
        if self.num_microbatches < self.pp:
            raise ValueError(
                f"num_microbatches={self.num_microbatches} must be >= pp={self.pp}"
            )

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ParallelismConfig":
        return cls(**_int_fields(cls, d))

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "pp": self.pp, "dp": self.dp, "num_microbatches": self.num_microbatches}


# --------------------------------------------------------------------------
# parsing


def round_us(value: Any) -> int:
    # half-up rounding of microsecond floats
    if isinstance(value, int):
        return value
    return int(math.floor(float(value) + 0.5))


def _as_int(value: Any) -> Optional[int]:
    if value is None:
        return None
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, int):
        return value
    try:
        return int(value)
    except (TypeError, ValueError):
        try:
            return int(float(value))
        except (TypeError, ValueError):
            return None


def _arg_str(v: Any) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, int) and not isinstance(v, bool):
        return str(v)
    return json.dumps(v)


def _load_json(data: bytes | str) -> Any:
    if isinstance(data, (bytes, bytearray)):
        if data[:2] == b"\x1f\x8b":
            data = gzip.decompress(data)
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TraceParseError("trace is not valid UTF-8", exc.start) from exc
    else:
        text = data
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        # JSONDecodeError.pos is a character index; convert to bytes
        offset = len(text[: exc.pos].encode("utf-8"))
        raise TraceParseError(f"malformed JSON: {exc.msg}", offset) from exc


def _record_list(doc: Any) -> list:
    if isinstance(doc, list):
        return doc
    if isinstance(doc, dict):
        records = doc.get("traceEvents", [])
        if not isinstance(records, list):
            raise TraceParseError("`traceEvents` is not an array")
        return records
    raise TraceParseError("trace document must be an object or an array")


def parse_trace(
    data: bytes | str,
    categories: Mapping[str, Category] | None = None,
) -> list[TraceEvent]:
    """Parse one rank's trace document into events sorted by (pid, ts)."""
    return events_from_records(_record_list(_load_json(data)), categories)


def events_from_records(
    records: Sequence[Mapping[str, Any]],
    categories: Mapping[str, Category] | None = None,
) -> list[TraceEvent]:
    table = dict(DEFAULT_CATEGORY_TABLE)
    if categories:
        table.update(categories)
    pid_codes: dict[Any, int] = {}
    out: list[TraceEvent] = []
    for index, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise TraceEventError("record is not an object", index)
        ph = rec.get("ph", "X")
        name = str(rec.get("name", ""))
        raw_args = rec.get("args") or {}
        if ph == "X":
            if "ts" not in rec or "dur" not in rec:
                missing = "ts" if "ts" not in rec else "dur"
                raise TraceEventError(f"complete event {name!r} lacks `{missing}`", index)
            ts, dur = round_us(rec["ts"]), round_us(rec["dur"])
        elif ph in ("i", "I") and (name in _SYNC_POINT_NAMES or "correlation" in raw_args):
            if "ts" not in rec:
                raise TraceEventError(f"instant event {name!r} lacks `ts`", index)
            ts, dur = round_us(rec["ts"]), 0
        else:
            # counters, flows, process/thread names, B/E pairs: not retained
            continue
        if ts < 0 or dur < 0:
            raise TraceEventError(f"negative ts/dur on {name!r}", index)

        cat = table.get(str(rec.get("cat", "")).lower(), Category.Metadata)
        pid = _as_int(rec.get("pid", 0))
        if pid is None:
            pid = pid_codes.setdefault(rec.get("pid"), len(pid_codes))
        tid = _as_int(rec.get("tid", 0))
        if tid is None:
            tid = pid_codes.setdefault(("tid", rec.get("tid")), len(pid_codes))
        args = {k: _arg_str(v) for k, v in raw_args.items()}
        corr = _as_int(raw_args.get("correlation", raw_args.get("correlation_id")))
        stream = _as_int(raw_args.get("stream"))
        if cat in GPU_CATEGORIES and stream is None:
            stream = tid
        if cat is Category.CudaRuntime and name in LAUNCH_NAMES and corr is None:
            raise TraceEventError(f"launch {name!r} has no correlation id", index)
        out.append(TraceEvent(name, cat, ts, dur, pid, tid, corr, stream, args))
    out.sort(key=lambda e: (e.process_id, e.timestamp))
    return out


def read_trace_metadata(data: bytes | str) -> dict[str, Any]:
    """Top-level keys other than ``traceEvents`` (distributedInfo etc.)."""
    doc = _load_json(data)
    if isinstance(doc, dict):
        return {k: v for k, v in doc.items() if k != "traceEvents"}
    return {}


def event_to_record(ev: TraceEvent) -> dict[str, Any]:
    args: dict[str, Any] = dict(ev.args)
    rec: dict[str, Any] = {
        "ph": "X",
        "cat": ev.category.value,
        "name": ev.name,
        "pid": ev.process_id,
        "tid": ev.thread_id,
        "ts": ev.timestamp,
        "dur": ev.duration,
    }
    if ev.correlation_id is not None:
        args["correlation"] = str(ev.correlation_id)
    if ev.stream_id is not None and ev.category in GPU_CATEGORIES:
        args["stream"] = str(ev.stream_id)
    if args:
        rec["args"] = args
    return rec


def dump_trace(events: Iterable[TraceEvent], metadata: Mapping[str, Any] | None = None) -> str:
    doc: dict[str, Any] = dict(metadata or {})
    doc["traceEvents"] = [event_to_record(e) for e in events]
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


# --------------------------------------------------------------------------
# multi-rank loading

_RANK_RE = re.compile(r"rank[_-]?(\d+)")


def read_manifest(path: str | Path) -> dict[int, Path]:
    base = Path(path).parent
    with open(path) as fh:
        raw = json.load(fh)
    ranks = raw.get("ranks", raw) if isinstance(raw, dict) else raw
    return {int(k): (base / v) for k, v in ranks.items()}


def rank_from_path(path: str | Path) -> int:
    m = _RANK_RE.search(Path(path).name)
    if m is None:
        raise ValueError(f"cannot infer rank from file name {str(path)!r}; use a manifest")
    return int(m.group(1))


def read_bytes(path: str | Path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise OSError(f"cannot read trace {str(path)!r}: {exc.strerror}") from exc


def load_multirank(
    paths: Sequence[str | Path],
    manifest: Mapping[int, str | Path] | None = None,
    categories: Mapping[str, Category] | None = None,
) -> dict[int, list[TraceEvent]]:
    """Parse one file per rank.  A manifest (rank -> path) overrides file names."""
    if manifest is not None:
        pairs = [(int(r), Path(p)) for r, p in manifest.items()]
    else:
        pairs = [(rank_from_path(p), Path(p)) for p in paths]
    out: dict[int, list[TraceEvent]] = {}
    for rank, path in pairs:
        if rank in out:
            raise ValueError(f"duplicate rank {rank} ({str(path)!r})")
        out[rank] = parse_trace(read_bytes(path), categories)
    return dict(sorted(out.items()))


# --------------------------------------------------------------------------
# iteration windows


def select_window(events: Sequence[TraceEvent], start: int, end: int) -> list[TraceEvent]:
    """Events whose start lies in [start, end)."""
    return [e for e in events if start <= e.timestamp < end]


def detect_iteration_window(events: Sequence[TraceEvent], min_gap_us: int = 1000) -> tuple[int, int]:
    """Pick one iteration using the dominant recurring idle gap.

    Idle means no CPU or GPU event of the rank is active, which inside an
    iteration essentially never happens (a blocked thread is covered by the
    kernels it waits for).  Gaps of at least half the largest one are taken
    as iteration boundaries, provided they also reach `min_gap_us`; with two or more boundaries the first fully
    bounded segment is returned, with one boundary the segment after it.
    """
    active = [e for e in events if e.category is not Category.Metadata]
    if not active:
        return (0, 0)
    pid = min(active, key=lambda e: e.timestamp).process_id
    spans = sorted((e.timestamp, e.end) for e in active if e.process_id == pid)
    gaps = []
    reach = spans[0][1]
    for ts, end in spans[1:]:
        if ts > reach:
            gaps.append((ts - reach, reach, ts))
        reach = max(reach, end)
    lo = spans[0][0]
    hi = reach + 1
    gaps = [g for g in gaps if g[0] >= min_gap_us]
    if not gaps:
        return (lo, hi)
    biggest = max(g[0] for g in gaps)
    cuts = [g for g in gaps if 2 * g[0] >= biggest]
    if len(cuts) >= 2:
        return (cuts[0][2], cuts[1][2])
    return (cuts[0][2], hi)

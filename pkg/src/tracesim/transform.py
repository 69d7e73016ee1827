"""Graph rewrites for what-if questions.

Duration-only rewrites (data-parallel degree, hidden width) retime kernels in
place.  Structural rewrites (pipeline degree, layer count) regroup the traced
tasks into blocks keyed by (phase, microbatch, region, layer), lay the blocks
out again following a 1F1B program for every target stage, and re-derive all
edges with the same wiring rules used for traces.
"""

from __future__ import annotations

import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .cost_model import (
    AnalyticalCostModel,
    CollectiveKind,
    CostModel,
    CostModelError,
    KernelKind,
    KernelQuery,
    load_cost_model,
)
from .graph import (
    DEFAULT_POLICY,
    BuildPolicy,
    Edge,
    EdgeKind,
    ExecutionGraph,
    topological_order,
    wire,
)
from .trace_model import (
    LaneKind,
    ModelConfig,
    OpClass,
    ParallelismConfig,
    ProcessorId,
    Task,
    TaskKind,
)

logger = logging.getLogger(__name__)


class TransformError(ValueError):
    pass


# --------------------------------------------------------------------------
# pipeline schedule


def schedule_1f1b(pp: int, num_microbatches: int, stage: int) -> list[tuple[str, int]]:
    """Per-stage one-forward-one-backward order as ("F"|"B", microbatch)."""
    if pp < 1 or not 0 <= stage < pp:
        raise TransformError(f"stage {stage} outside pipeline of depth {pp}")
    if num_microbatches < 1:
        raise TransformError("need at least one microbatch")
    m = num_microbatches
    warmup = min(pp - stage - 1, m)
    order = [("F", k) for k in range(warmup)]
    f, b = warmup, 0
    while f < m:
        order.append(("F", f))
        order.append(("B", b))
        f += 1
        b += 1
    order.extend(("B", k) for k in range(b, m))
    return order


def split_layers(n_layers: int, pp: int) -> list[list[int]]:
    """Contiguous layer ranges per stage; the remainder goes to the earliest stages."""
    if n_layers < pp:
        raise TransformError(f"{n_layers} layers cannot fill {pp} pipeline stages")
    base, extra = divmod(n_layers, pp)
    out, at = [], 0
    for s in range(pp):
        size = base + (1 if s < extra else 0)
        out.append(list(range(at, at + size)))
        at += size
    return out


# --------------------------------------------------------------------------
# configuration


class SchedulePolicy(Enum):
    OneFOneB = "1f1b"


@dataclass
class WhatIfConfig:
    """Target configuration.  Missing fields mean "same as the source"."""

    target_parallelism: Optional[dict] = None  # tp/pp/dp/num_microbatches, each optional
    target_model: Optional[ModelConfig] = None
    schedule_policy: SchedulePolicy = SchedulePolicy.OneFOneB
    cost_model: Any = "analytical"
    p2p_bytes: Optional[int] = None
    source_parallelism: Optional[ParallelismConfig] = None
    source_model: Optional[ModelConfig] = None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "WhatIfConfig":
        known = {"target_parallelism", "target_model", "schedule_policy", "cost_model", "cost_model_ref",
                 "p2p_bytes", "source_parallelism", "source_model"}
        extra = set(d) - known
        if extra:
            raise TransformError(f"unknown what-if keys {sorted(extra)}")
        tp = d.get("target_parallelism")
        if tp is not None:
            tp = {k: int(v) for k, v in tp.items()}
            bad = set(tp) - {"tp", "pp", "dp", "num_microbatches"}
            if bad:
                raise TransformError(f"unknown parallelism keys {sorted(bad)}")
        policy = str(d.get("schedule_policy", "1f1b")).lower().replace("onefoneb", "1f1b")
        try:
            sched = SchedulePolicy(policy)
        except ValueError:
            raise TransformError(f"unsupported schedule policy {policy!r}; only 1f1b is available") from None
        return cls(
            target_parallelism=tp,
            target_model=ModelConfig.from_dict(d["target_model"]) if d.get("target_model") else None,
            schedule_policy=sched,
            cost_model=d.get("cost_model", d.get("cost_model_ref", "analytical")),
            p2p_bytes=d.get("p2p_bytes"),
            source_parallelism=ParallelismConfig.from_dict(d["source_parallelism"]) if d.get("source_parallelism") else None,
            source_model=ModelConfig.from_dict(d["source_model"]) if d.get("source_model") else None,
        )

    @classmethod
    def load(cls, path: str | Path) -> "WhatIfConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def resolve(self, source: ParallelismConfig) -> ParallelismConfig:
        t = dict(self.target_parallelism or {})
        tp = t.get("tp", source.tp)
        pp = t.get("pp", source.pp)
        dp = t.get("dp", source.dp)
        if "num_microbatches" in t:
            m = t["num_microbatches"]
        elif pp != source.pp:
            m = tp * pp
        else:
            m = source.num_microbatches
        try:
            return ParallelismConfig(tp, pp, dp, m)
        except ValueError as exc:
            raise TransformError(str(exc)) from None


# --------------------------------------------------------------------------
# layer tagging

LAYER_RE = re.compile(r"layers\.(\d+)|layer_(\d+)")


@dataclass
class LayerGroup:
    layer_index: int
    task_ids: list[int]
    microbatch_tag: Optional[int]
    phase: str


def _int_or_none(v: Any) -> Optional[int]:
    if v is None:
        return None
    try:
        return int(v)
    except (TypeError, ValueError):
        return None


def load_sidecar(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return json.load(fh)


def tag_layers(graph: ExecutionGraph, sidecar: Sequence[Mapping[str, Any]] | None = None,
               pattern: re.Pattern = LAYER_RE) -> ExecutionGraph:
    """Populate layer/microbatch tags plus ``phase``/``region`` metadata.

    Sources in priority order: sidecar entries (``task_name_prefix`` or
    half-open ``id_range``), explicit ``layer``/``mb``/``phase``/``region``
    args, then the layer regex over task names and enclosing scopes.
    Untagged CPU tasks inherit from the previous tagged task on their thread
    and kernels inherit from the call that launched them.
    """
    g = graph.copy()
    tasks = g.tasks
    explicit: dict[int, dict] = {}
    for t in tasks:
        tag = _explicit_tag(t, pattern)
        if tag:
            explicit[t.id] = tag
    if sidecar:
        for entry in sidecar:
            tag = {"layer": _int_or_none(entry.get("layer")), "mb": _int_or_none(entry.get("microbatch")),
                   "phase": entry.get("phase"), "region": entry.get("region") or ("layer" if entry.get("layer") is not None else None),
                   "explicit_region": entry.get("region") is not None}
            if "id_range" in entry:
                a, b = entry["id_range"]
                hits = range(max(0, a), min(len(tasks), b))
            else:
                prefix = entry["task_name_prefix"]
                hits = [t.id for t in tasks if t.name.startswith(prefix)]
            for i in hits:
                explicit[i] = {**explicit.get(i, {}), **{k: v for k, v in tag.items() if v is not None}}
    if not any(v.get("layer") is not None for v in explicit.values()):
        raise TransformError("no transformer layers found in task names or args; supply an annotation sidecar")

    main_thread = {}
    for t in sorted(tasks, key=lambda t: (t.original_start, t.id)):
        if t.kind is TaskKind.Cpu:
            main_thread.setdefault(t.processor.rank, t.processor.lane)

    threads: dict[ProcessorId, list[Task]] = defaultdict(list)
    for t in tasks:
        if t.kind is TaskKind.Cpu:
            threads[t.processor].append(t)
    for proc, seq in threads.items():
        seq.sort(key=lambda t: (t.original_start, t.id))
        default_phase = "fwd" if proc.lane == main_thread.get(proc.rank) else "bwd"
        last_tagged = max((i for i, t in enumerate(seq) if t.id in explicit), default=-1)
        current: Optional[dict] = None
        for i, t in enumerate(seq):
            tag = explicit.get(t.id)
            if tag is not None:
                current = tag
            elif current is None:
                tag = {"region": "pre"}
            elif i > last_tagged and not current.get("explicit_region"):
                tag = {"region": "post"}
            else:
                tag = current
            _apply(t, tag, default_phase)
    launcher = {e.dst: e.src for e in g.fixed_edges if e.kind == EdgeKind.LAUNCH}
    for t in tasks:
        if t.kind is TaskKind.Gpu:
            src = launcher.get(t.id)
            if src is not None:
                s = tasks[src]
                t.layer_tag, t.microbatch_tag = s.layer_tag, s.microbatch_tag
                t.meta["phase"], t.meta["region"] = s.meta["phase"], s.meta["region"]
            else:
                _apply(t, explicit.get(t.id, {"region": "pre"}), "fwd")
    return g


def _explicit_tag(t: Task, pattern: re.Pattern) -> Optional[dict]:
    meta = t.meta
    if any(k in meta for k in ("layer", "mb", "phase", "region")):
        tag = {"layer": _int_or_none(meta.get("layer")), "mb": _int_or_none(meta.get("mb")),
               "phase": meta.get("phase"), "region": meta.get("region"), "explicit_region": "region" in meta}
        if tag["region"] is None and tag["layer"] is not None:
            tag["region"] = "layer"
        return tag
    if t.kind is TaskKind.Gpu:
        return None
    for text in (t.name, meta.get("scope", "")):
        m = pattern.search(text)
        if m:
            layer = int(next(x for x in m.groups() if x is not None))
            return {"layer": layer, "mb": None, "phase": None, "region": "layer", "explicit_region": False}
    return None


def _apply(t: Task, tag: Mapping[str, Any], default_phase: str) -> None:
    t.layer_tag = tag.get("layer")
    t.microbatch_tag = tag.get("mb")
    t.meta["phase"] = tag.get("phase") or default_phase
    t.meta["region"] = tag.get("region") or ("layer" if t.layer_tag is not None else "pre")


def layer_groups(graph: ExecutionGraph) -> list[LayerGroup]:
    groups: dict[tuple, list[int]] = defaultdict(list)
    for t in graph.tasks:
        if t.layer_tag is not None and t.meta.get("region") == "layer":
            groups[(t.processor.rank, t.meta.get("phase"), t.microbatch_tag, t.layer_tag)].append(t.id)
    return [LayerGroup(k[3], ids, k[2], k[1]) for k, ids in sorted(groups.items(), key=lambda kv: kv[1][0])]


# --------------------------------------------------------------------------
# duration rewrites


def _collective_of(t: Task) -> CollectiveKind:
    name = t.meta.get("collective")
    if name:
        return CollectiveKind.parse(name)
    low = t.name.lower()
    for kind in CollectiveKind:
        if kind.value in low:
            return kind
    return CollectiveKind.AllReduce


def scale_dp(graph: ExecutionGraph, new_dp: int, cost_model: CostModel | None = None,
             old_dp: int | None = None) -> ExecutionGraph:
    """Retime data-parallel collectives for a new group size; topology is untouched."""
    if new_dp < 1:
        raise TransformError("dp must be >= 1")
    cost_model = cost_model or AnalyticalCostModel()
    g = graph.copy()
    targets = [t for t in g.tasks if t.op_class is OpClass.Communication and t.meta.get("group") == "dp"]
    if old_dp is None:
        par = g.attrs.get("parallelism")
        old_dp = par.dp if par else (_int_or_none(targets[0].meta.get("group_size")) if targets else None)
    if old_dp == new_dp:
        return g
    if not targets and new_dp > 1:
        raise TransformError("trace has no data-parallel collectives to retime")
    missing = [t.id for t in targets if _int_or_none(t.meta.get("bytes")) is None]
    if missing:
        raise TransformError(f"data-parallel collectives without byte counts: {missing[:20]}")
    for t in targets:
        kind = _collective_of(t)
        nbytes = int(t.meta["bytes"])
        old_g = _int_or_none(t.meta.get("group_size")) or old_dp
        ref = KernelQuery(KernelKind.Collective, kind, nbytes, old_g)
        q = KernelQuery(KernelKind.Collective, kind, nbytes, new_dp, reference_duration=t.duration, reference_query=ref)
        t.duration = cost_model.estimate(q)
        t.meta["group_size"] = str(new_dp)
    if "parallelism" in g.attrs:
        p = g.attrs["parallelism"]
        g.attrs["parallelism"] = ParallelismConfig(p.tp, p.pp, new_dp, p.num_microbatches)
    return g


GEMM_PATTERNS = ("gemm", "matmul", "cutlass", "xmma")


def _role_scale(role: str, old: ModelConfig, new: ModelConfig) -> float:
    role = role.strip()
    if role == "d":
        return new.d_model / old.d_model
    if role == "f":
        return new.d_ffn / old.d_ffn
    return 1.0


def _param_count(m: ModelConfig) -> int:
    return 4 * m.d_model * m.d_model + 2 * m.d_model * m.d_ffn


def change_hidden(graph: ExecutionGraph, new_model: ModelConfig, cost_model: CostModel | None = None,
                  old_model: ModelConfig | None = None, gemm_patterns: Sequence[str] = GEMM_PATTERNS) -> ExecutionGraph:
    """Retime GEMMs and collectives for a new hidden / FFN width.

    GEMM dims carry ``dim_roles`` such as ``t,d,f`` (tokens, model width,
    FFN width); without roles the n and k dims follow the model width.
    Collective payloads scale with the width (``bytes_role=act``) or with the
    per-layer parameter count (``bytes_role=params``).
    """
    old_model = old_model or graph.attrs.get("model")
    if old_model is None:
        raise TransformError("source model configuration unknown")
    g = graph.copy()
    if (old_model.d_model, old_model.d_ffn) == (new_model.d_model, new_model.d_ffn):
        g.attrs["model"] = new_model
        return g
    cost_model = cost_model or AnalyticalCostModel()
    missing = []
    pats = tuple(p.lower() for p in gemm_patterns)
    for t in g.tasks:
        if t.kind is not TaskKind.Gpu:
            continue
        low = t.name.lower()
        if t.op_class is OpClass.Communication:
            nbytes = _int_or_none(t.meta.get("bytes"))
            if nbytes is None:
                missing.append(t.id)
                continue
            role = t.meta.get("bytes_role") or ("params" if t.meta.get("group") == "dp" else "act")
            if role == "act":
                new_bytes = round(nbytes * new_model.d_model / old_model.d_model)
            elif role == "params":
                new_bytes = round(nbytes * _param_count(new_model) / _param_count(old_model))
            else:
                new_bytes = nbytes
            group = _int_or_none(t.meta.get("group_size")) or 2
            kind = _collective_of(t)
            qk = KernelKind.P2P if kind is CollectiveKind.SendRecv else KernelKind.Collective
            ref = KernelQuery(qk, kind, nbytes, group)
            q = KernelQuery(qk, kind, new_bytes, group, reference_duration=t.duration, reference_query=ref)
            t.duration = cost_model.estimate(q)
            t.meta["bytes"] = str(new_bytes)
        elif any(p in low for p in pats):
            dims = t.meta.get("dims")
            if not dims:
                missing.append(t.id)
                continue
            old_dims = tuple(int(x) for x in dims.split(","))
            roles = (t.meta.get("dim_roles") or "t,d,d").split(",")
            new_dims = tuple(max(1, round(x * _role_scale(r, old_model, new_model))) for x, r in zip(old_dims, roles))
            ref = KernelQuery(KernelKind.Gemm, dims=old_dims)
            q = KernelQuery(KernelKind.Gemm, dims=new_dims, reference_duration=t.duration, reference_query=ref)
            t.duration = cost_model.estimate(q)
            t.meta["dims"] = ",".join(str(x) for x in new_dims)
    if missing:
        raise TransformError(f"width-dependent kernels without dimension metadata: {missing[:20]}")
    g.attrs["model"] = new_model
    return g


# --------------------------------------------------------------------------
# cross-rank transfers


def pair_transfers(graph: ExecutionGraph) -> ExecutionGraph:
    """Join matching point-to-point send/recv kernels across ranks.

    A recorded transfer kernel spans its own launch-ready time to the
    completion of the exchange, so it includes waiting for the peer.  The
    k-th send from rank a to b is paired with the k-th receive on b from a;
    both get the smaller recorded duration (the transfer itself) and a
    rendezvous group so that they finish together.
    """
    g = graph.copy()
    if g.attrs.get("transfers_paired"):
        return g
    sends: dict[tuple[int, int], list[Task]] = defaultdict(list)
    recvs: dict[tuple[int, int], list[Task]] = defaultdict(list)
    for t in g.tasks:
        if t.kind is not TaskKind.Gpu or t.op_class is not OpClass.Communication:
            continue
        role, peer = t.meta.get("p2p"), _int_or_none(t.meta.get("peer"))
        if peer is None or role not in ("send", "recv"):
            continue
        (sends if role == "send" else recvs)[(t.processor.rank, peer)].append(t)
    paired = 0
    for (a, b), snd in sorted(sends.items()):
        rcv = recvs.get((b, a))
        if not rcv:
            continue
        if len(rcv) != len(snd):
            logger.warning("ranks %d->%d: %d sends vs %d receives; leaving them unpaired", a, b, len(snd), len(rcv))
            g.diagnostics.append({"kind": "unpaired_transfers", "src": a, "dst": b})
            continue
        snd = sorted(snd, key=lambda t: (t.original_start, t.id))
        rcv = sorted(rcv, key=lambda t: (t.original_start, t.id))
        for x, y in zip(snd, rcv):
            x.duration = y.duration = min(x.duration, y.duration)
            g.rendezvous.append((x.id, y.id))
            paired += 1
    if paired:
        g.attrs["transfers_paired"] = True
    return g


# --------------------------------------------------------------------------
# structural reassembly

Item = tuple[Task, list[Task]]  # a CPU task with the kernels it launched

PHASES = ("fwd", "bwd")


@dataclass
class _Block:
    phase: str
    mb: Optional[int]
    region: str
    layer: Optional[int]
    items: list[Item] = field(default_factory=list)


@dataclass
class _Instance:
    phase: str
    mb: Optional[int]
    blocks: list[_Block] = field(default_factory=list)


def _rank_blocks(graph: ExecutionGraph, rank: int) -> list[_Block]:
    launched: dict[int, list[Task]] = defaultdict(list)
    for e in graph.fixed_edges:
        if e.kind == EdgeKind.LAUNCH:
            launched[e.src].append(graph.tasks[e.dst])
    cpu = sorted((t for t in graph.tasks if t.kind is TaskKind.Cpu and t.processor.rank == rank),
                 key=lambda t: (t.original_start, t.id))
    blocks: list[_Block] = []
    for t in cpu:
        key = (t.meta.get("phase"), t.microbatch_tag, t.meta.get("region"), t.layer_tag)
        if not blocks or (blocks[-1].phase, blocks[-1].mb, blocks[-1].region, blocks[-1].layer) != key:
            blocks.append(_Block(*key))
        blocks[-1].items.append((t, sorted(launched.get(t.id, ()), key=lambda k: k.id)))
    return blocks


def _instances(blocks: list[_Block]) -> tuple[list[_Block], list[_Instance], list[_Block]]:
    """Split a rank's blocks into prologue, per-(phase, microbatch) instances and tail."""
    prologue: list[_Block] = []
    instances: list[_Instance] = []
    pending: list[_Block] = []
    seen_layers: set = set()
    for b in blocks:
        if b.phase not in PHASES:
            (pending if instances else prologue).append(b)
            continue
        cur = instances[-1] if instances else None
        repeat = b.region == "layer" and b.layer in seen_layers
        if cur is None or (cur.phase, cur.mb) != (b.phase, b.mb) or repeat:
            if cur is not None:
                cur.blocks.extend(pending)
                pending = []
            instances.append(_Instance(b.phase, b.mb))
            seen_layers = set()
        else:
            instances[-1].blocks.extend(pending)
            pending = []
        if b.region == "layer":
            seen_layers.add(b.layer)
        instances[-1].blocks.append(b)
    return prologue, instances, pending


def _roles(stage: int, pp: int) -> dict[tuple[str, str], str]:
    first, last = stage == 0, stage == pp - 1
    return {
        ("fwd", "prefix"): "first" if first else "inner",
        ("fwd", "suffix"): "last" if last else "inner",
        ("bwd", "prefix"): "last" if last else "inner",
        ("bwd", "suffix"): "first" if first else "inner",
    }


def _pick_mb(options: Mapping[Optional[int], Any], mb: int) -> Any:
    if mb in options:
        return options[mb]
    keys = sorted(k for k in options if k is not None)
    if not keys:
        return options[None]
    below = [k for k in keys if k <= mb]
    return options[below[-1] if below else keys[0]]


@dataclass
class _Library:
    units: dict = field(default_factory=lambda: defaultdict(dict))      # (phase, layer) -> mb -> blocks
    dp_grad: dict = field(default_factory=dict)                         # layer -> blocks
    edges: dict = field(default_factory=lambda: defaultdict(dict))      # (phase, part, role) -> mb -> blocks
    prologue: dict = field(default_factory=dict)                        # stage -> blocks
    tail: dict = field(default_factory=dict)
    threads: dict = field(default_factory=dict)                         # phase -> thread id
    n_layers: int = 0


def _build_library(graph: ExecutionGraph, src: ParallelismConfig) -> _Library:
    lib = _Library()
    ranks = graph.ranks
    by_stage: dict[int, int] = {}
    for r in ranks:
        stage = r % src.pp
        if stage not in by_stage or r // src.pp < by_stage[stage] // src.pp:
            by_stage[stage] = r
    for stage, rank in sorted(by_stage.items()):
        prologue, instances, tail = _instances(_rank_blocks(graph, rank))
        lib.prologue[stage], lib.tail[stage] = prologue, tail
        roles = _roles(stage, src.pp)
        for inst in instances:
            # gradient all-reduces are re-attached to their layer on emission
            blocks = []
            for b in inst.blocks:
                if b.region == "dp_grad":
                    lib.dp_grad.setdefault(b.layer, []).append(b)
                else:
                    blocks.append(b)
            layer_pos = [i for i, b in enumerate(blocks) if b.region == "layer"]
            if layer_pos:
                lo, hi = layer_pos[0], layer_pos[-1]
            else:
                lo, hi = len(blocks), len(blocks) - 1
            parts = {"prefix": blocks[:lo], "suffix": blocks[hi + 1:]}
            for part, seq in parts.items():
                lib.edges[(inst.phase, part, roles[(inst.phase, part)])].setdefault(inst.mb, seq)
            unit: list[_Block] = []
            for b in blocks[lo:hi + 1]:
                if b.region == "layer":
                    unit = [b]
                    lib.units[(inst.phase, b.layer)].setdefault(inst.mb, unit)
                    lib.threads.setdefault(inst.phase, b.items[0][0].processor.lane)
                else:
                    unit.append(b)
    layers = [k[1] for k in lib.units if k[1] is not None]
    if not layers:
        raise TransformError("no layer blocks found; cannot rebuild the iteration")
    lib.n_layers = max(layers) + 1
    return lib


class _Emitter:
    """Appends renumbered copies of template tasks in program order."""

    def __init__(self):
        self.tasks: list[Task] = []
        self.handoffs: list[Edge] = []
        self.clock: dict[int, int] = defaultdict(int)
        self.last_cpu: dict[int, Task] = {}
        self.next_corr = 1
        self.next_event = 1

    def emit(self, blocks: Sequence[_Block], rank: int, mb: int, layer: Optional[int] = None) -> list[Task]:
        """Copy `blocks` onto `rank`; returns the new communication kernels."""
        comm: list[Task] = []
        for b in blocks:
            events: dict[str, str] = {}
            for cpu, kernels in b.items:
                corr = None
                if cpu.correlation_id is not None:
                    corr, self.next_corr = self.next_corr, self.next_corr + 1
                meta = self._meta(cpu, mb, layer, events)
                t = self._add(cpu, rank, self.clock[rank], corr, meta, mb, layer)
                prev = self.last_cpu.get(rank)
                if prev is not None and prev.processor != t.processor:
                    self.handoffs.append(Edge(prev.id, t.id, EdgeKind.THREAD))
                self.last_cpu[rank] = t
                self.clock[rank] += cpu.duration
                for k in kernels:
                    kt = self._add(k, rank, t.original_start, corr, self._meta(k, mb, layer, events), mb, layer)
                    if kt.op_class is OpClass.Communication:
                        comm.append(kt)
        return comm

    def _meta(self, t: Task, mb: int, layer: Optional[int], events: dict) -> dict:
        meta = dict(t.meta)
        if "mb" in meta:
            meta["mb"] = str(mb)
        if layer is not None and "layer" in meta:
            meta["layer"] = str(layer)
        if "event" in meta:
            old = meta["event"]
            if old not in events:
                events[old] = str(self.next_event)
                self.next_event += 1
            meta["event"] = events[old]
        return meta

    def _add(self, tmpl: Task, rank: int, start: int, corr: Optional[int], meta: dict, mb: int, layer: Optional[int]) -> Task:
        t = Task(
            id=len(self.tasks),
            kind=tmpl.kind,
            op_class=tmpl.op_class,
            name=tmpl.name,
            duration=tmpl.duration,
            processor=ProcessorId(rank, tmpl.processor.lane_kind, tmpl.processor.lane),
            original_start=start,
            correlation_id=corr if tmpl.correlation_id is not None else None,
            layer_tag=layer if layer is not None else tmpl.layer_tag,
            microbatch_tag=mb if tmpl.microbatch_tag is not None else None,
            meta=meta,
        )
        self.tasks.append(t)
        return t


def _is_p2p(t: Task) -> bool:
    return t.meta.get("group") == "pp" or "p2p" in t.meta or "sendrecv" in t.name.lower()


def _synth_p2p(lib: _Library, graph: ExecutionGraph, phase: str, send: bool, nbytes: int) -> list[_Block]:
    """A send or receive block for a source trace that had no pipeline peers."""
    def typical(cls: OpClass, default: int, low: bool = False) -> int:
        vals = sorted(t.duration for t in graph.tasks if t.kind is TaskKind.Cpu and t.op_class is cls)
        if not vals:
            return default
        return vals[0] if low else vals[len(vals) // 2]

    gpu = [t for t in graph.tasks if t.kind is TaskKind.Gpu and t.op_class is OpClass.Compute]
    streams = defaultdict(int)
    for t in gpu:
        streams[t.processor.lane] += 1
    compute = max(streams, key=lambda s: (streams[s], -s)) if streams else 7
    used = {t.processor.lane for t in graph.tasks if t.kind is TaskKind.Gpu}
    stream = max(used | {compute}) + (1 if phase == "fwd" else 2)
    thread = lib.threads.get(phase, 1)
    proc = ProcessorId(0, LaneKind.CpuThread, thread)
    sproc = ProcessorId(0, LaneKind.CudaStream, stream)
    region = "send" if send else "recv"
    tags = {"phase": phase, "region": region, "mb": "0"}
    items: list[Item] = []

    def cpu(name: str, cls: OpClass, dur: int, **meta) -> Task:
        return Task(0, TaskKind.Cpu, cls, name, dur, proc, 0, microbatch_tag=0, meta={**tags, **meta})

    items.append((cpu("nccl:" + region, OpClass.Other, typical(OpClass.Other, 100)), []))
    if send:
        items.append((cpu("cudaEventRecord", OpClass.EventRecord, typical(OpClass.EventRecord, 5), event="1", stream=str(compute)), []))
        items.append((cpu("cudaStreamWaitEvent", OpClass.EventWait, typical(OpClass.EventWait, 5), event="1", stream=str(stream)), []))
    launch = cpu("cudaLaunchKernel", OpClass.Launch, typical(OpClass.Launch, 12))
    launch.correlation_id = 1
    kernel = Task(0, TaskKind.Gpu, OpClass.Communication, "ncclDevKernel_SendRecv", 0, sproc, 0, 1, None, 0,
                  {"collective": "sendrecv", "bytes": str(nbytes), "group": "pp", "group_size": "2", "p2p": region})
    items.append((launch, [kernel]))
    if not send:
        items.append((cpu("cudaStreamSynchronize", OpClass.Sync, typical(OpClass.Sync, 5, low=True), stream=str(stream)), []))
    return [_Block(phase, 0, region, None, items)]


def _p2p_bytes(graph: ExecutionGraph, override: Optional[int]) -> Optional[int]:
    if override is not None:
        return int(override)
    for t in graph.tasks:
        if t.op_class is OpClass.Communication and t.meta.get("bytes_role", "act") == "act" and t.meta.get("group") != "dp":
            b = _int_or_none(t.meta.get("bytes"))
            if b is not None:
                return b
    work, model = graph.attrs.get("workload"), graph.attrs.get("model")
    if work and model:
        try:
            tokens = int(work["seq_len"]) * int(work["micro_batch_size"])
            return tokens * model.d_model * int(work.get("bytes_per_element", 2))
        except (KeyError, TypeError, ValueError):
            return None
    return None


def reassemble(
    graph: ExecutionGraph,
    source: ParallelismConfig,
    target: ParallelismConfig,
    n_layers: int,
    cost_model: CostModel | None = None,
    p2p_bytes: Optional[int] = None,
    policy: BuildPolicy | None = None,
) -> ExecutionGraph:
    """Rebuild one data-parallel replica for a new pipeline depth, microbatch
    count or layer count from the blocks of a tagged source graph.

    Layers missing from the source are cloned from its last layer.  The
    result holds one rank per target stage and is timed by simulation.
    """
    from .simulator import simulate

    if target.tp != source.tp:
        raise TransformError("changing the tensor-parallel degree is not supported")
    split = split_layers(n_layers, target.pp)
    cost_model = cost_model or AnalyticalCostModel()
    lib = _build_library(graph, source)
    em = _Emitter()
    sends: dict[tuple, list[Task]] = defaultdict(list)
    recvs: dict[tuple, list[Task]] = defaultdict(list)
    last = target.pp - 1

    def edge_blocks(phase: str, part: str, role: str, mb: int, send: bool) -> list[_Block]:
        options = lib.edges.get((phase, part, role))
        if options:
            return _pick_mb(options, mb)
        if role != "inner":
            raise TransformError(f"source trace lacks the {role}-stage {phase} {part}")
        nbytes = _p2p_bytes(graph, p2p_bytes)
        if nbytes is None:
            raise TransformError("pipeline transfer size unknown; set p2p_bytes in the what-if config")
        return _synth_p2p(lib, graph, phase, send, nbytes)

    def unit(phase: str, layer: int, mb: int) -> list[_Block]:
        src_layer = min(layer, lib.n_layers - 1)
        options = lib.units.get((phase, src_layer))
        if not options:
            raise TransformError(f"no {phase} template for layer {src_layer}")
        return _pick_mb(options, mb)

    for stage in range(target.pp):
        roles = _roles(stage, target.pp)
        src_stage = 0 if stage == 0 else (source.pp - 1 if stage == last else min(stage, source.pp - 1))
        em.emit(lib.prologue.get(src_stage, []), stage, 0)
        layers = split[stage]
        for op, mb in schedule_1f1b(target.pp, target.num_microbatches, stage):
            phase = "fwd" if op == "F" else "bwd"
            pre_role, suf_role = roles[(phase, "prefix")], roles[(phase, "suffix")]
            comm = em.emit(edge_blocks(phase, "prefix", pre_role, mb, False), stage, mb)
            if pre_role == "inner":
                peer = stage - 1 if phase == "fwd" else stage + 1
                recvs[(phase, mb, peer, stage)].extend(t for t in comm if _is_p2p(t))
            order = layers if phase == "fwd" else list(reversed(layers))
            for layer in order:
                em.emit(unit(phase, layer, mb), stage, mb, layer)
                if phase == "bwd" and mb == target.num_microbatches - 1 and target.dp > 1:
                    grads = lib.dp_grad.get(min(layer, lib.n_layers - 1))
                    if grads:
                        em.emit(grads, stage, mb, layer)
            comm = em.emit(edge_blocks(phase, "suffix", suf_role, mb, True), stage, mb)
            if suf_role == "inner":
                peer = stage + 1 if phase == "fwd" else stage - 1
                sends[(phase, mb, stage, peer)].extend(t for t in comm if _is_p2p(t))
        em.emit(lib.tail.get(src_stage, []), stage, 0)

    tasks = em.tasks
    edges, rules, diags, orphans = wire(tasks, em.handoffs, policy)
    groups = []
    for key, snd in sends.items():
        rcv = recvs.get(key, [])
        if len(rcv) != len(snd):
            raise TransformError(f"unmatched pipeline transfer {key}")
        for a, b in zip(snd, rcv):
            measured = min(a.duration, b.duration)
            nbytes = _int_or_none(a.meta.get("bytes"))
            if graph.attrs.get("transfers_paired") and measured > 0:
                a.duration = b.duration = measured
            else:
                est = cost_model.absolute(KernelQuery(KernelKind.P2P, CollectiveKind.SendRecv, nbytes, 2)) if nbytes is not None else None
                a.duration = b.duration = est if est is not None else max(a.duration, b.duration)
            a.meta["peer"], b.meta["peer"] = str(b.processor.rank), str(a.processor.rank)
            groups.append((a.id, b.id))
    if len(sends) != len(recvs):
        raise TransformError("pipeline receives without matching sends")
    topological_order(len(tasks), edges)
    windows = {s: (0, em.clock[s]) for s in range(target.pp)}
    g = ExecutionGraph(tasks, edges, rules, {t.processor for t in tasks}, windows, diags, orphans, dict(graph.attrs), groups)
    g.attrs["parallelism"] = ParallelismConfig(target.tp, target.pp, target.dp, target.num_microbatches)
    if "model" in g.attrs:
        g.attrs["model"] = replace(g.attrs["model"], n_layers=n_layers)
    sim = simulate(g)
    for t in g.tasks:
        t.original_start = sim.starts[t.id]
    g.windows = {r: sim.span(r) for r in g.ranks}
    return g


def _source_configs(graph: ExecutionGraph, cfg: "WhatIfConfig | None" = None) -> tuple[ParallelismConfig, Optional[ModelConfig]]:
    par = (cfg.source_parallelism if cfg else None) or graph.attrs.get("parallelism")
    model = (cfg.source_model if cfg else None) or graph.attrs.get("model")
    if par is None:
        raise TransformError("source parallelism unknown; add it to the trace metadata or the what-if config")
    return par, model


def scale_pp(graph: ExecutionGraph, new_pp: int, cost_model: CostModel | None = None,
             num_microbatches: Optional[int] = None, p2p_bytes: Optional[int] = None) -> ExecutionGraph:
    src, model = _source_configs(graph)
    if new_pp == src.pp and num_microbatches in (None, src.num_microbatches):
        return graph.copy()
    m = num_microbatches if num_microbatches is not None else src.tp * new_pp
    n_layers = model.n_layers if model else _tagged(graph).n_layers
    target = _parallel(src.tp, new_pp, src.dp, m)
    return reassemble(tag_layers(graph), src, target, n_layers, cost_model, p2p_bytes)


def change_layers(graph: ExecutionGraph, new_n_layers: int, cost_model: CostModel | None = None) -> ExecutionGraph:
    src, model = _source_configs(graph)
    tagged = tag_layers(graph)
    old = model.n_layers if model else _build_library(tagged, src).n_layers
    if new_n_layers == old:
        return graph.copy()
    return reassemble(tagged, src, src, new_n_layers, cost_model)


def _tagged(graph: ExecutionGraph) -> _Library:
    src, _ = _source_configs(graph)
    return _build_library(tag_layers(graph), src)


def _parallel(tp: int, pp: int, dp: int, m: int) -> ParallelismConfig:
    try:
        return ParallelismConfig(tp, pp, dp, m)
    except ValueError as exc:
        raise TransformError(str(exc)) from None


def apply_whatif(graph: ExecutionGraph, cfg: WhatIfConfig, cost_model: CostModel | None = None,
                 sidecar: Sequence[Mapping[str, Any]] | None = None) -> ExecutionGraph:
    """Width change, then data-parallel retiming, then structural rebuild."""
    if cfg.schedule_policy is not SchedulePolicy.OneFOneB:
        raise TransformError("only the 1F1B schedule is supported")
    if cost_model is None:
        try:
            cost_model = load_cost_model(cfg.cost_model)
        except CostModelError as exc:
            raise TransformError(str(exc)) from None
    src, model = _source_configs(graph, cfg)
    target = cfg.resolve(src)
    if target.tp != src.tp:
        raise TransformError("changing the tensor-parallel degree is not supported")
    g = pair_transfers(graph)
    new_model = cfg.target_model
    if new_model is not None and model is None:
        raise TransformError("source model configuration unknown; cannot apply a model change")
    if new_model is not None and (new_model.d_model, new_model.d_ffn) != (model.d_model, model.d_ffn):
        g = change_hidden(g, new_model, cost_model, model)
    if target.dp != src.dp:
        g = scale_dp(g, target.dp, cost_model, src.dp)
    n_layers_old = model.n_layers if model else None
    n_layers_new = new_model.n_layers if new_model else n_layers_old
    structural = (target.pp, target.num_microbatches) != (src.pp, src.num_microbatches) or n_layers_new != n_layers_old
    if structural:
        tagged = tag_layers(g, sidecar)
        if n_layers_new is None:
            n_layers_new = _build_library(tagged, src).n_layers
        g = reassemble(tagged, ParallelismConfig(src.tp, src.pp, target.dp, src.num_microbatches), target,
                       n_layers_new, cost_model, cfg.p2p_bytes)
    g.attrs["parallelism"] = target
    if new_model is not None:
        g.attrs["model"] = new_model
    return g

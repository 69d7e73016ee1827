"""Synthetic GPT-style training traces with known ground truth.

Every rank runs a 1F1B pipeline program: the forward of a microbatch on the
main thread, its backward on an autograd thread, per-layer gradient
all-reduces in the last microbatch, and an optimizer step closed by a device
synchronize.  Timestamps come from an exact longest-path schedule over all
ranks, using the same duration formulas as the analytical cost model.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from .cost_model import CollectiveKind, collective_time, gemm_time
from .graph import classify_task
from .metrics import breakdown_intervals
from .trace_model import (
    Category,
    ModelConfig,
    ParallelismConfig,
    TraceEvent,
    dump_trace,
    round_us,
)
from .transform import schedule_1f1b, split_layers

MAIN_THREAD = 1
BWD_THREAD = 2
COMPUTE_STREAM = 7
DP_STREAM = 13
FWD_P2P_STREAM = 20
BWD_P2P_STREAM = 21

DEFAULT_OP_COSTS = {
    "cpu_op": 100,
    "record": 3,
    "wait": 3,
    "sync": 5,
    "layernorm": 40,
    "layernorm_bwd": 60,
    "attention": 400,
    "attention_bwd": 900,
    "gelu": 50,
    "gelu_bwd": 70,
    "embedding": 60,
    "embedding_bwd": 90,
    "loss": 120,
    "loss_bwd": 120,
    "optimizer": 400,
}


class SynthError(ValueError):
    pass


@dataclass
class SynthSpec:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(4, 4096, 16384, 32, 128))
    parallelism: ParallelismConfig = field(default_factory=lambda: ParallelismConfig(1, 1, 1, 1))
    per_op_costs: dict = field(default_factory=dict)
    launch_overhead: int = 12
    seed: int = 0
    jitter_pct: float = 0.0
    seq_len: int = 2048
    micro_batch_size: int = 2
    iterations: int = 1
    iteration_gap_us: int = 50_000
    alpha_us: float = 10.0
    beta_bytes_per_us: float = 50_000.0
    gemm_flops_per_us: float = 4e8
    bytes_per_element: int = 2
    gap_threshold_us: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.jitter_pct <= 0.2:
            raise SynthError("jitter_pct must lie in [0, 0.2]")
        unknown = set(self.per_op_costs) - set(DEFAULT_OP_COSTS)
        if unknown:
            raise SynthError(f"unknown op cost keys {sorted(unknown)}")
        if self.iterations < 1 or self.seq_len < 1 or self.micro_batch_size < 1:
            raise SynthError("iterations, seq_len and micro_batch_size must be positive")

    @property
    def costs(self) -> dict[str, int]:
        return {**DEFAULT_OP_COSTS, **self.per_op_costs}

    @property
    def tokens(self) -> int:
        return self.seq_len * self.micro_batch_size

    def check_feasible(self) -> None:
        m, p = self.model, self.parallelism
        if m.n_layers < p.pp:
            raise SynthError(f"{m.n_layers} layers cannot be split over pp={p.pp}")
        for name, v in (("d_model", m.d_model), ("d_ffn", m.d_ffn), ("n_heads", m.n_heads)):
            if v % p.tp:
                raise SynthError(f"{name}={v} not divisible by tp={p.tp}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "parallelism": self.parallelism.to_dict(),
            "per_op_costs": dict(sorted(self.per_op_costs.items())),
            "launch_overhead": self.launch_overhead,
            "seed": self.seed,
            "jitter_pct": self.jitter_pct,
            "seq_len": self.seq_len,
            "micro_batch_size": self.micro_batch_size,
            "iterations": self.iterations,
            "iteration_gap_us": self.iteration_gap_us,
            "alpha_us": self.alpha_us,
            "beta_bytes_per_us": self.beta_bytes_per_us,
            "gemm_flops_per_us": self.gemm_flops_per_us,
            "bytes_per_element": self.bytes_per_element,
            "gap_threshold_us": self.gap_threshold_us,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SynthSpec":
        kw = dict(d)
        if "model" in kw:
            kw["model"] = ModelConfig.from_dict(kw["model"])
        if "parallelism" in kw:
            kw["parallelism"] = ParallelismConfig.from_dict(kw["parallelism"])
        known = set(cls.__dataclass_fields__)
        extra = set(kw) - known
        if extra:
            raise SynthError(f"unknown spec keys {sorted(extra)}")
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "SynthSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class GroundTruth:
    makespan: dict[int, int]
    breakdown: dict[int, dict[str, int]]
    schedule: dict[int, list[tuple[str, int]]]
    iterations: list[tuple[int, int]]
    unexplained_gaps: list[dict]
    tags: dict[int, dict[int, list]]
    # per-iteration variants; `makespan` / `breakdown` describe the first
    iteration_makespans: list[dict[int, int]] = field(default_factory=list)
    iteration_breakdowns: list[dict[int, dict[str, int]]] = field(default_factory=list)

    def iteration_of(self, ts: int) -> int:
        """Index of the iteration whose span contains timestamp `ts`."""
        for i, (lo, hi) in enumerate(self.iterations):
            if lo <= ts <= hi:
                return i
        raise KeyError(ts)

    @property
    def iteration_time(self) -> int:
        a, b = self.iterations[0]
        return b - a

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": 1,
            "makespan_us": {str(r): v for r, v in sorted(self.makespan.items())},
            "breakdown": {str(r): v for r, v in sorted(self.breakdown.items())},
            "iteration_makespan_us": [{str(r): v for r, v in sorted(m.items())} for m in self.iteration_makespans],
            "schedule": {str(s): [f"{p}{k}" for p, k in v] for s, v in sorted(self.schedule.items())},
            "iterations": [list(w) for w in self.iterations],
            "unexplained_gaps": self.unexplained_gaps,
            "unexplained_gap_total_us": sum(g["gap_us"] for g in self.unexplained_gaps),
        }


@dataclass
class SynthResult:
    spec: SynthSpec
    events: dict[int, list[TraceEvent]]
    metadata: dict[int, dict]
    truth: GroundTruth

    def trace_json(self, rank: int) -> str:
        return dump_trace(self.events[rank], self.metadata[rank])

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for r in sorted(self.events):
            p = out / f"rank_{r}.json"
            p.write_text(self.trace_json(r))
            paths.append(p)
        (out / "ground_truth.json").write_text(json.dumps(self.truth.to_dict(), sort_keys=True, indent=1))
        (out / "manifest.json").write_text(
            json.dumps({"ranks": {str(r): f"rank_{r}.json" for r in sorted(self.events)}}, sort_keys=True, indent=1)
        )
        return paths


# --------------------------------------------------------------------------
# program construction


class _Node:
    __slots__ = ("rank", "gpu", "name", "lane", "dur", "preds", "args", "group", "release", "start", "end", "cat")

    def __init__(self, rank, gpu, name, lane, dur, cat, args):
        self.rank = rank
        self.gpu = gpu
        self.name = name
        self.lane = lane
        self.dur = dur
        self.cat = cat
        self.args = args
        self.preds: list[int] = []
        self.group = None
        self.release = 0
        self.start = 0
        self.end = 0


class _Program:
    """Shared node store plus per-rank CPU program cursors."""

    def __init__(self, spec: SynthSpec, rng: random.Random):
        self.spec = spec
        self.rng = rng
        self.costs = spec.costs
        self.nodes: list[_Node] = []
        self.groups: dict[tuple, list[int]] = {}
        self.group_cost: dict[tuple, int] = {}
        self.handoffs: list[int] = []
        self.corr = 0
        self.event_ids = 0
        self.tags: dict[int, dict[int, list]] = {}

    def jitter(self, base: float) -> int:
        j = self.spec.jitter_pct
        if j:
            base = base * (1.0 + self.rng.uniform(-j, j))
        return max(1, round_us(base))

    def add(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1


class _Rank:
    def __init__(self, prog: _Program, rank: int, release: int):
        self.prog = prog
        self.rank = rank
        self.last_cpu: Optional[int] = None
        self.thread = MAIN_THREAD
        self.first = True
        self.release = release
        self.last_on_stream: dict[int, int] = {}
        self.pending_waits: dict[int, list[int]] = {}
        self.tag: list = [None, None, None, None]
        prog.tags.setdefault(rank, {})

    def _cpu(self, name: str, cat: Category, dur: int, args: dict, thread: int) -> int:
        node = _Node(self.rank, False, name, thread, dur, cat, args)
        if self.last_cpu is not None:
            node.preds.append(self.last_cpu)
            if thread != self.prog.nodes[self.last_cpu].lane:
                self.prog.handoffs.append(len(self.prog.nodes))
        if self.first:
            node.release = self.release
            self.first = False
        idx = self.prog.add(node)
        self.last_cpu = idx
        return idx

    def op(self, name: str, thread: int, tags: dict) -> int:
        args = {k: str(v) for k, v in tags.items() if v is not None}
        self.tag = [tags.get("layer"), tags.get("mb"), tags.get("phase"), tags.get("region")]
        return self._cpu(name, Category.CpuOp, self.prog.jitter(self.prog.costs["cpu_op"]), args, thread)

    def launch(self, kernel: str, stream: int, dur: int, thread: int, kargs: dict | None = None, group: tuple | None = None) -> int:
        self.prog.corr += 1
        c = self.prog.corr
        launch = self._cpu("cudaLaunchKernel", Category.CudaRuntime, self.prog.jitter(self.prog.spec.launch_overhead), {"correlation": str(c)}, thread)
        args = {"correlation": str(c), "stream": str(stream)}
        if kargs:
            args.update({k: str(v) for k, v in kargs.items()})
        k = _Node(self.rank, True, kernel, stream, dur, Category.GpuKernel, args)
        k.preds.append(launch)
        prev = self.last_on_stream.get(stream)
        if prev is not None:
            k.preds.append(prev)
        k.preds.extend(self.pending_waits.pop(stream, ()))
        idx = self.prog.add(k)
        if group is not None:
            self.prog.groups.setdefault(group, []).append(idx)
            k.group = group
        self.last_on_stream[stream] = idx
        self.prog.tags[self.rank][c] = list(self.tag)
        return idx

    def record_wait(self, src_stream: int, dst_stream: int, thread: int) -> None:
        self.prog.event_ids += 1
        ev = self.prog.event_ids
        costs = self.prog.costs
        self._cpu("cudaEventRecord", Category.CudaRuntime, self.prog.jitter(costs["record"]), {"event": str(ev), "stream": str(src_stream)}, thread)
        captured = self.last_on_stream.get(src_stream)
        self._cpu("cudaStreamWaitEvent", Category.CudaRuntime, self.prog.jitter(costs["wait"]), {"event": str(ev), "stream": str(dst_stream)}, thread)
        if captured is not None:
            self.pending_waits.setdefault(dst_stream, []).append(captured)

    def sync(self, thread: int, stream: int | None = None) -> int:
        if stream is None:
            name, args = "cudaDeviceSynchronize", {}
            watched = list(self.last_on_stream.values())
        else:
            name, args = "cudaStreamSynchronize", {"stream": str(stream)}
            watched = [self.last_on_stream[stream]] if stream in self.last_on_stream else []
        idx = self._cpu(name, Category.CudaRuntime, self.prog.jitter(self.prog.costs["sync"]), args, thread)
        self.prog.nodes[idx].preds.extend(watched)
        return idx


def _layer_forward(rk: _Rank, spec: SynthSpec, layer: int, mb: int, thread: int) -> None:
    p = rk.prog
    c = p.costs
    t, d, f, tp = spec.tokens, spec.model.d_model, spec.model.d_ffn, spec.parallelism.tp
    tags = {"layer": layer, "mb": mb, "phase": "fwd", "region": "layer"}

    def gemm(op, kernel, m, n, k, roles):
        rk.op(op, thread, tags)
        dur = p.jitter(gemm_time(m, n, k, spec.gemm_flops_per_us))
        rk.launch(kernel, COMPUTE_STREAM, dur, thread, {"dims": f"{m},{n},{k}", "dim_roles": roles})

    def simple(op, kernel, key):
        rk.op(op, thread, tags)
        rk.launch(kernel, COMPUTE_STREAM, p.jitter(c[key]), thread)

    simple("aten::layer_norm", "vectorized_layer_norm_kernel", "layernorm")
    gemm("aten::linear", "ampere_bf16_s16816gemm_bf16_128x128_qkv", t, 3 * d // tp, d, "t,d,d")
    simple("flash_attn::_flash_attn_forward", "flash_fwd_kernel", "attention")
    gemm("aten::linear", "ampere_bf16_s16816gemm_bf16_128x64_proj", t, d, d // tp, "t,d,d")
    _tp_allreduce(rk, spec, thread, tags)
    simple("aten::layer_norm", "vectorized_layer_norm_kernel", "layernorm")
    gemm("aten::linear", "ampere_bf16_s16816gemm_bf16_256x128_fc1", t, f // tp, d, "t,f,d")
    simple("aten::gelu", "vectorized_elementwise_kernel_gelu", "gelu")
    gemm("aten::linear", "ampere_bf16_s16816gemm_bf16_128x256_fc2", t, d, f // tp, "t,d,f")
    _tp_allreduce(rk, spec, thread, tags)


def _layer_backward(rk: _Rank, spec: SynthSpec, layer: int, mb: int, thread: int) -> None:
    p = rk.prog
    c = p.costs
    t, d, f, tp = spec.tokens, spec.model.d_model, spec.model.d_ffn, spec.parallelism.tp
    tags = {"layer": layer, "mb": mb, "phase": "bwd", "region": "layer"}

    def gemm(op, kernel, m, n, k, roles):
        rk.op(op, thread, tags)
        dur = p.jitter(gemm_time(m, n, k, spec.gemm_flops_per_us))
        rk.launch(kernel, COMPUTE_STREAM, dur, thread, {"dims": f"{m},{n},{k}", "dim_roles": roles})

    def simple(op, kernel, key):
        rk.op(op, thread, tags)
        rk.launch(kernel, COMPUTE_STREAM, p.jitter(c[key]), thread)

    gemm("aten::mm", "ampere_bf16_s16816gemm_bf16_fc2_dgrad", t, f // tp, d, "t,f,d")
    gemm("aten::mm", "ampere_bf16_s16816gemm_bf16_fc2_wgrad", f // tp, d, t, "f,d,t")
    simple("aten::gelu_backward", "vectorized_elementwise_kernel_gelu_bwd", "gelu_bwd")
    gemm("aten::mm", "ampere_bf16_s16816gemm_bf16_fc1_dgrad", t, d, f // tp, "t,d,f")
    gemm("aten::mm", "ampere_bf16_s16816gemm_bf16_fc1_wgrad", d, f // tp, t, "d,f,t")
    _tp_allreduce(rk, spec, thread, tags)
    simple("aten::native_layer_norm_backward", "layer_norm_grad_kernel", "layernorm_bwd")
    gemm("aten::mm", "ampere_bf16_s16816gemm_bf16_proj_dgrad", t, d // tp, d, "t,d,d")
    gemm("aten::mm", "ampere_bf16_s16816gemm_bf16_proj_wgrad", d, d // tp, t, "d,d,t")
    simple("flash_attn::_flash_attn_backward", "flash_bwd_kernel", "attention_bwd")
    gemm("aten::mm", "ampere_bf16_s16816gemm_bf16_qkv_dgrad", t, d, 3 * d // tp, "t,d,d")
    gemm("aten::mm", "ampere_bf16_s16816gemm_bf16_qkv_wgrad", 3 * d // tp, d, t, "d,d,t")
    _tp_allreduce(rk, spec, thread, tags)
    simple("aten::native_layer_norm_backward", "layer_norm_grad_kernel", "layernorm_bwd")


def _tp_allreduce(rk: _Rank, spec: SynthSpec, thread: int, tags: dict) -> None:
    tp = spec.parallelism.tp
    if tp <= 1:
        return
    nbytes = spec.tokens * spec.model.d_model * spec.bytes_per_element
    rk.op("c10d::allreduce_", thread, tags)
    dur = rk.prog.jitter(collective_time(CollectiveKind.AllReduce, nbytes, tp, spec.alpha_us, spec.beta_bytes_per_us))
    rk.launch(
        "ncclDevKernel_AllReduce_Sum_bf16_RING_LL",
        COMPUTE_STREAM,
        dur,
        thread,
        {"collective": "allreduce", "bytes": nbytes, "bytes_role": "act", "group": "tp", "group_size": tp},
    )


def layer_param_bytes(spec_model: ModelConfig, tp: int, bytes_per_element: int) -> int:
    d, f = spec_model.d_model, spec_model.d_ffn
    return (4 * d * d + 2 * d * f) // tp * bytes_per_element


def _p2p(rk: _Rank, spec: SynthSpec, thread: int, tags: dict, stream: int, send: bool, key: tuple) -> None:
    nbytes = spec.tokens * spec.model.d_model * spec.bytes_per_element
    kargs = {"collective": "sendrecv", "bytes": nbytes, "bytes_role": "act", "group": "pp", "group_size": 2,
             "p2p": "send" if send else "recv",
             "peer": key[2] * spec.parallelism.pp + (key[-1] if send else key[-2])}
    rk.op("nccl:send" if send else "nccl:recv", thread, tags)
    if send:
        rk.record_wait(COMPUTE_STREAM, stream, thread)
    rk.prog.group_cost[key] = rk.prog.jitter(collective_time(CollectiveKind.SendRecv, nbytes, 2, spec.alpha_us, spec.beta_bytes_per_us))
    rk.launch("ncclDevKernel_SendRecv", stream, 0, thread, kargs, group=key)
    if not send:
        rk.sync(thread, stream)


def _build_rank(prog: _Program, spec: SynthSpec, it: int, stage: int, dp_idx: int, release: int) -> _Rank:
    par = spec.parallelism
    pp, m = par.pp, par.num_microbatches
    rank = dp_idx * pp + stage
    rk = _Rank(prog, rank, release)
    layers = split_layers(spec.model.n_layers, pp)[stage]
    last = pp - 1
    c = prog.costs
    for phase, mb in schedule_1f1b(pp, m, stage):
        if phase == "F":
            th = MAIN_THREAD
            if stage > 0:
                key = ("p2p", it, dp_idx, "fwd", mb, stage - 1, stage)
                _p2p(rk, spec, th, {"mb": mb, "phase": "fwd", "region": "recv"}, FWD_P2P_STREAM, False, key)
            if stage == 0:
                rk.op("aten::embedding", th, {"mb": mb, "phase": "fwd", "region": "embed"})
                rk.launch("indexSelectLargeIndex", COMPUTE_STREAM, prog.jitter(c["embedding"]), th)
            for layer in layers:
                _layer_forward(rk, spec, layer, mb, th)
            if stage == last:
                rk.op("aten::cross_entropy_loss", th, {"mb": mb, "phase": "fwd", "region": "head"})
                rk.launch("cross_entropy_kernel", COMPUTE_STREAM, prog.jitter(c["loss"]), th)
            else:
                key = ("p2p", it, dp_idx, "fwd", mb, stage, stage + 1)
                _p2p(rk, spec, th, {"mb": mb, "phase": "fwd", "region": "send"}, FWD_P2P_STREAM, True, key)
        else:
            th = BWD_THREAD
            if stage < last:
                key = ("p2p", it, dp_idx, "bwd", mb, stage + 1, stage)
                _p2p(rk, spec, th, {"mb": mb, "phase": "bwd", "region": "recv"}, BWD_P2P_STREAM, False, key)
            else:
                rk.op("aten::cross_entropy_loss_backward", th, {"mb": mb, "phase": "bwd", "region": "head"})
                rk.launch("cross_entropy_backward_kernel", COMPUTE_STREAM, prog.jitter(c["loss_bwd"]), th)
            for layer in reversed(layers):
                _layer_backward(rk, spec, layer, mb, th)
                if mb == m - 1 and par.dp > 1:
                    _dp_grad(rk, spec, th, layer, mb, it, stage)
            if stage == 0:
                rk.op("aten::embedding_backward", th, {"mb": mb, "phase": "bwd", "region": "embed"})
                rk.launch("embedding_backward_kernel", COMPUTE_STREAM, prog.jitter(c["embedding_bwd"]), th)
            else:
                key = ("p2p", it, dp_idx, "bwd", mb, stage, stage - 1)
                _p2p(rk, spec, th, {"mb": mb, "phase": "bwd", "region": "send"}, BWD_P2P_STREAM, True, key)
    th = MAIN_THREAD
    rk.op("Optimizer.step#AdamW.step", th, {"phase": "step", "region": "optimizer"})
    if par.dp > 1:
        rk.record_wait(DP_STREAM, COMPUTE_STREAM, th)
    rk.launch("multi_tensor_apply_kernel", COMPUTE_STREAM, prog.jitter(c["optimizer"]), th)
    rk.sync(th)
    return rk


def _dp_grad(rk: _Rank, spec: SynthSpec, thread: int, layer: int, mb: int, it: int, stage: int) -> None:
    dp = spec.parallelism.dp
    nbytes = layer_param_bytes(spec.model, spec.parallelism.tp, spec.bytes_per_element)
    rk.op("c10d::allreduce_", thread, {"layer": layer, "mb": mb, "phase": "bwd", "region": "dp_grad"})
    rk.record_wait(COMPUTE_STREAM, DP_STREAM, thread)
    key = ("dp", it, stage, layer)
    rk.prog.group_cost.setdefault(
        key, rk.prog.jitter(collective_time(CollectiveKind.AllReduce, nbytes, dp, spec.alpha_us, spec.beta_bytes_per_us))
    )
    rk.launch(
        "ncclDevKernel_AllReduce_Sum_f32_RING_LL",
        DP_STREAM,
        0,
        thread,
        {"collective": "allreduce", "bytes": nbytes, "bytes_role": "params", "group": "dp", "group_size": dp},
        group=key,
    )


# --------------------------------------------------------------------------
# exact schedule


def _schedule(prog: _Program, first: int, last: int) -> None:
    """Longest-path timing of nodes[first:last]; rendezvous groups end together."""
    nodes = prog.nodes
    n = last - first
    succ: list[list[int]] = [[] for _ in range(n)]
    indeg = [0] * n
    gate: dict[tuple, list[int]] = {}
    for gkey, members in prog.groups.items():
        members = [m for m in members if first <= m < last]
        if members:
            gate[gkey] = members
    # a rendezvous kernel waits for every member's own predecessors
    extra: dict[int, list[int]] = {}
    for members in gate.values():
        all_preds = sorted({p for m in members for p in nodes[m].preds})
        for m in members:
            extra[m] = all_preds
    for i in range(first, last):
        preds = extra.get(i, nodes[i].preds)
        for p in preds:
            succ[p - first].append(i - first)
            indeg[i - first] += 1
    stack = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(stack)
    done = 0
    while stack:
        u = heapq.heappop(stack) + first
        node = nodes[u]
        ready = max([nodes[p].end for p in node.preds] + [node.release])
        if node.group is not None:
            members = gate[node.group]
            together = max(max([nodes[p].end for p in nodes[mm].preds] + [nodes[mm].release]) for mm in members)
            node.start = ready
            node.end = together + prog.group_cost[node.group]
        else:
            node.start = ready
            node.end = ready + node.dur
        done += 1
        for v in succ[u - first]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(stack, v)
    if done != n:
        raise SynthError("generated program deadlocks")


def generate(spec: SynthSpec) -> SynthResult:
    spec.check_feasible()
    rng = random.Random(spec.seed)
    prog = _Program(spec, rng)
    par = spec.parallelism
    release = 0
    windows = []
    schedule = {s: schedule_1f1b(par.pp, par.num_microbatches, s) for s in range(par.pp)}
    for it in range(spec.iterations):
        first = len(prog.nodes)
        for dp_idx in range(par.dp):
            for stage in range(par.pp):
                _build_rank(prog, spec, it, stage, dp_idx, release)
        _schedule(prog, first, len(prog.nodes))
        lo = min(nd.start for nd in prog.nodes[first:])
        hi = max(nd.end for nd in prog.nodes[first:])
        windows.append((lo, hi))
        release = hi + spec.iteration_gap_us

    events: dict[int, list[TraceEvent]] = {}
    for nd in prog.nodes:
        if nd.gpu:
            ev = TraceEvent(nd.name, nd.cat, nd.start, nd.end - nd.start, nd.rank, nd.lane, int(nd.args["correlation"]), nd.lane, nd.args)
        else:
            corr = nd.args.get("correlation")
            ev = TraceEvent(nd.name, nd.cat, nd.start, nd.end - nd.start, nd.rank, nd.lane,
                            int(corr) if corr is not None else None, None, nd.args)
        events.setdefault(nd.rank, []).append(ev)
    for r in events:
        events[r].sort(key=lambda e: (e.timestamp, 0 if e.category is not Category.GpuKernel else 1, e.thread_id))

    gaps = _unexplained_gaps(prog, spec.gap_threshold_us, windows)
    per_iter = []
    for w_lo, w_hi in windows:
        makespan, bd = {}, {}
        for r, all_evs in sorted(events.items()):
            evs = [e for e in all_evs if w_lo <= e.timestamp <= w_hi]
            lo = min(e.timestamp for e in evs)
            hi = max(e.end for e in evs)
            makespan[r] = hi - lo
            intervals = [(e.timestamp, e.end, classify_task(e.name, e.category).value == "communication")
                         for e in evs if e.category is Category.GpuKernel]
            bd[r] = breakdown_intervals(intervals, (lo, hi)).to_dict()
        per_iter.append((makespan, bd))
    meta = {}
    for r in events:
        meta[r] = {
            "distributedInfo": {"rank": r, "stage": r % par.pp, "dp_index": r // par.pp,
                                "tp": par.tp, "pp": par.pp, "dp": par.dp, "world_size": par.tp * par.pp * par.dp},
            "modelConfig": spec.model.to_dict(),
            "parallelConfig": par.to_dict(),
            "workload": {"seq_len": spec.seq_len, "micro_batch_size": spec.micro_batch_size,
                         "bytes_per_element": spec.bytes_per_element},
        }
    truth = GroundTruth(per_iter[0][0], per_iter[0][1], schedule, windows, gaps, prog.tags,
                        [m for m, _ in per_iter], [b for _, b in per_iter])
    return SynthResult(spec, events, meta, truth)


def _unexplained_gaps(prog: _Program, threshold: int, windows) -> list[dict]:
    """Thread hand-offs too short for gap detection to recover."""
    nodes = prog.nodes
    last_end: dict[tuple[int, int], int] = {}
    origin: dict[int, int] = {}
    for nd in nodes:
        if not nd.gpu:
            origin[nd.rank] = min(origin.get(nd.rank, nd.start), nd.start)
    handoff = set(prog.handoffs)
    out = []
    order = sorted((i for i, nd in enumerate(nodes) if not nd.gpu), key=lambda i: (nodes[i].rank, nodes[i].start, i))
    for i in order:
        nd = nodes[i]
        key = (nd.rank, nd.lane)
        prev = last_end.get(key, origin[nd.rank])
        if i in handoff:
            gap = nd.start - prev
            if 0 < gap < threshold:
                out.append({"rank": nd.rank, "ts": nd.start, "gap_us": gap})
        last_end[key] = max(prev, nd.end)
    return out

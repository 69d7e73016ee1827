"""Trace-driven replay and what-if prediction for distributed training."""

from .graph import BuildPolicy, EdgeKind, ExecutionGraph, build_graph, merge_graphs
from .simulator import SimulatedTrace, simulate, validate
from .trace_model import ModelConfig, ParallelismConfig, load_multirank, parse_trace

__all__ = [
    "BuildPolicy",
    "EdgeKind",
    "ExecutionGraph",
    "ModelConfig",
    "ParallelismConfig",
    "SimulatedTrace",
    "build_graph",
    "load_multirank",
    "merge_graphs",
    "parse_trace",
    "simulate",
    "validate",
]

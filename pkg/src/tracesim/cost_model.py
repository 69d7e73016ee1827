"""Kernel duration estimators for resized or newly inserted kernels.

The formula helpers at the top are shared with the synthetic generator, so a
what-if prediction made with the default backend can be checked exactly
against a regenerated trace.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional

from .trace_model import round_us


class KernelKind(Enum):
    Collective = "collective"
    P2P = "p2p"
    Gemm = "gemm"
    Other = "other"


class CollectiveKind(Enum):
    AllReduce = "allreduce"
    AllGather = "allgather"
    ReduceScatter = "reducescatter"
    AllToAll = "alltoall"
    SendRecv = "sendrecv"

    @classmethod
    def parse(cls, name: str) -> "CollectiveKind":
        key = name.lower().replace("_", "").replace("-", "")
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown collective {name!r}")


class CostModelError(ValueError):
    pass


# --------------------------------------------------------------------------
# shared formulas


def bus_scale(kind: CollectiveKind, group_size: int) -> float:
    """Bytes-on-the-wire multiplier of a ring implementation."""
    g = group_size
    if g <= 1:
        return 0.0 if kind is not CollectiveKind.SendRecv else 1.0
    if kind is CollectiveKind.AllReduce:
        return 2.0 * (g - 1) / g
    if kind is CollectiveKind.SendRecv:
        return 1.0
    return (g - 1) / g


def collective_time(kind: CollectiveKind, nbytes: int, group_size: int, alpha_us: float, beta_bytes_per_us: float) -> float:
    if kind is not CollectiveKind.SendRecv and group_size <= 1:
        return 0.0
    return alpha_us + nbytes * bus_scale(kind, group_size) / beta_bytes_per_us


def gemm_flops(m: int, n: int, k: int) -> int:
    return 2 * m * n * k


def gemm_time(m: int, n: int, k: int, flops_per_us: float) -> float:
    return gemm_flops(m, n, k) / flops_per_us


# --------------------------------------------------------------------------
# queries


@dataclass(frozen=True)
class KernelQuery:
    kind: KernelKind
    collective: Optional[CollectiveKind] = None
    bytes: Optional[int] = None
    group_size: Optional[int] = None
    dims: Optional[tuple[int, int, int]] = None
    reference_duration: Optional[int] = None
    reference_query: Optional["KernelQuery"] = None

    def __post_init__(self):
        if self.kind is KernelKind.Collective:
            if self.collective is None or self.bytes is None or self.group_size is None:
                raise CostModelError("collective query needs collective, bytes and group_size")
        if self.kind is KernelKind.P2P and self.bytes is None:
            raise CostModelError("p2p query needs bytes")
        if self.kind is KernelKind.Gemm and self.dims is None:
            raise CostModelError("gemm query needs dims")
        if self.bytes is not None and self.bytes < 0:
            raise CostModelError("bytes must be >= 0")


class CostModel:
    name = "base"

    def estimate(self, query: KernelQuery) -> int:
        raise NotImplementedError

    def absolute(self, query: KernelQuery) -> Optional[int]:
        """Estimate without any reference kernel, or None if unsupported."""
        try:
            return self.estimate(KernelQuery(query.kind, query.collective, query.bytes, query.group_size, query.dims))
        except CostModelError:
            return None


class IdentityCostModel(CostModel):
    """Returns the reference duration unchanged."""

    name = "identity"

    def estimate(self, query: KernelQuery) -> int:
        if query.reference_duration is None:
            raise CostModelError("identity cost model needs a reference duration")
        return query.reference_duration


class AnalyticalCostModel(CostModel):
    """Alpha-beta collectives and FLOP-proportional GEMMs.

    With a reference kernel the estimate is the reference duration scaled by
    the formula ratio, so uncalibrated constants cancel out.
    """

    name = "analytical"

    def __init__(self, alpha_us: float = 10.0, beta_bytes_per_us: float = 50_000.0, gemm_flops_per_us: float | None = None):
        if beta_bytes_per_us <= 0:
            raise CostModelError("beta must be positive")
        if alpha_us < 0:
            raise CostModelError("alpha must be >= 0")
        self.alpha_us = alpha_us
        self.beta = beta_bytes_per_us
        self.gemm_rate = gemm_flops_per_us

    def _formula(self, q: KernelQuery) -> Optional[float]:
        if q.kind is KernelKind.Collective:
            return collective_time(q.collective, q.bytes, q.group_size, self.alpha_us, self.beta)
        if q.kind is KernelKind.P2P:
            return collective_time(CollectiveKind.SendRecv, q.bytes, 2, self.alpha_us, self.beta)
        if q.kind is KernelKind.Gemm:
            if self.gemm_rate is None:
                return None
            return gemm_time(*q.dims, self.gemm_rate)
        return None

    def estimate(self, query: KernelQuery) -> int:
        ref = query.reference_query
        if query.reference_duration is not None and ref is not None:
            if query.kind is KernelKind.Gemm and ref.kind is KernelKind.Gemm:
                new, old = gemm_flops(*query.dims), gemm_flops(*ref.dims)
            else:
                new, old = self._formula(query), self._formula(ref)
            if new is not None and old:
                return max(0, round_us(query.reference_duration * new / old))
            if new is not None and old == 0 and query.kind is not KernelKind.Gemm:
                return max(0, round_us(new))
        if query.kind is KernelKind.Other:
            if query.reference_duration is not None:
                return query.reference_duration
            raise CostModelError("no analytical rule for an 'other' kernel without a reference")
        value = self._formula(query)
        if value is None:
            if query.reference_duration is not None and ref is None:
                return query.reference_duration
            raise CostModelError(f"cannot estimate {query.kind.value} kernel without a reference or rate")
        return max(0, round_us(value))


class TableCostModel(CostModel):
    """Look-up table of measured durations.

    JSON format::

        {"entries": [{"kind": "collective", "key": "allreduce/8", "bytes": 1048576, "us": 180}, ...]}

    ``key`` identifies the kernel family (for collectives ``<name>/<group>``,
    for p2p ``sendrecv``, for GEMMs ``m,n,k``).  Collectives and p2p
    interpolate linearly in bytes between the two nearest entries.
    """

    name = "table"

    def __init__(self, entries: list[Mapping[str, Any]]):
        if not entries:
            raise CostModelError("table cost model needs at least one entry")
        self.exact: dict[tuple[str, str, int], int] = {}
        self.curves: dict[tuple[str, str], list[tuple[int, int]]] = {}
        for e in entries:
            kind = str(e["kind"])
            key = str(e["key"])
            nbytes = int(e.get("bytes", 0))
            us = int(e["us"])
            self.exact[(kind, key, nbytes)] = us
            self.curves.setdefault((kind, key), []).append((nbytes, us))
        for pts in self.curves.values():
            pts.sort()

    @classmethod
    def load(cls, path: str | Path) -> "TableCostModel":
        with open(path) as fh:
            doc = json.load(fh)
        return cls(doc["entries"] if isinstance(doc, dict) else doc)

    @staticmethod
    def key_for(query: KernelQuery) -> str:
        if query.kind is KernelKind.Collective:
            return f"{query.collective.value}/{query.group_size}"
        if query.kind is KernelKind.P2P:
            return "sendrecv"
        if query.kind is KernelKind.Gemm:
            return ",".join(str(d) for d in query.dims)
        return "other"

    def estimate(self, query: KernelQuery) -> int:
        kind, key = query.kind.value, self.key_for(query)
        nbytes = query.bytes or 0
        hit = self.exact.get((kind, key, nbytes))
        if hit is not None:
            return hit
        pts = self.curves.get((kind, key))
        if pts and query.kind in (KernelKind.Collective, KernelKind.P2P):
            xs = [p[0] for p in pts]
            i = bisect.bisect_left(xs, nbytes)
            if 0 < i < len(pts):
                (x0, y0), (x1, y1) = pts[i - 1], pts[i]
                return round_us(y0 + (y1 - y0) * (nbytes - x0) / (x1 - x0))
        raise CostModelError(f"no table entry or interpolation neighbours for {kind} {key} bytes={nbytes}")


def load_cost_model(config: Mapping[str, Any] | str | None) -> CostModel:
    """Build a backend from ``{"backend": "analytical"|"identity"|"table", ...}``."""
    if config is None:
        return AnalyticalCostModel()
    if isinstance(config, str):
        config = {"backend": config}
    backend = config.get("backend", "analytical")
    if backend == "analytical":
        return AnalyticalCostModel(
            alpha_us=float(config.get("alpha_us", 10.0)),
            beta_bytes_per_us=float(config.get("beta_bytes_per_us", 50_000.0)),
            gemm_flops_per_us=config.get("gemm_flops_per_us"),
        )
    if backend == "identity":
        return IdentityCostModel()
    if backend == "table":
        if "entries" in config:
            return TableCostModel(config["entries"])
        return TableCostModel.load(config["path"])
    raise CostModelError(f"unknown cost model backend {backend!r}")

"""Shared domain types, trace ingestion and cluster validation.

Everything in this module is an immutable value type or a pure function, so
objects can be shared freely across threads and simulation runs.

Trace files are line-delimited JSON (one record per line):

* load trace:         ``{"step": 0, "layer": 0, "counts": [5, 5]}``
* availability trace: ``{"t": 60.0, "kind": "remove", "nodes": [2]}``
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence


class TraceParseError(ValueError):
    """A trace line could not be decoded; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class TraceSchemaError(TraceParseError):
    """A well-formed line violates the trace schema (e.g. wrong count width)."""


class TraceValidationError(ValueError):
    """Trace-level invariant violated (ordering, unknown node, ...)."""


class InfeasibleError(ValueError):
    """Cluster cannot satisfy a structural requirement (e.g. slots < experts)."""


@dataclass(frozen=True)
class CostModel:
    """Linear time model plus operational intervals for the simulator.

    ``per_token_compute_s`` and ``per_token_comm_s`` are the per-token costs of
    expert computation and cross-node transfer; ``step_overhead_s`` is paid once
    per training step regardless of load.
    """

    per_token_compute_s: float = 2e-6
    per_token_comm_s: float = 6e-7
    step_overhead_s: float = 0.05
    reconfig_s: float = 30.0
    checkpoint_save_s: float = 10.0
    restart_s: float = 60.0
    checkpoint_interval_steps: int = 200
    rebalance_interval_steps: int = 200
    join_accumulation_s: float = 120.0

    def __post_init__(self) -> None:
        for name in (
            "per_token_compute_s",
            "per_token_comm_s",
            "step_overhead_s",
            "reconfig_s",
            "checkpoint_save_s",
            "restart_s",
            "join_accumulation_s",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.checkpoint_interval_steps < 1 or self.rebalance_interval_steps < 1:
            raise ValueError("intervals must be >= 1")


@dataclass(frozen=True)
class ClusterSpec:
    """Cluster shape: node count, replica slots per node and fault threshold."""

    n_nodes: int
    slots_per_node: int
    fault_threshold: int = 2
    cost_model: CostModel = field(default_factory=CostModel)

    def __post_init__(self) -> None:
        if self.n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")
        if self.slots_per_node < 1:
            raise ValueError("slots_per_node must be >= 1")
        if self.fault_threshold < 0:
            raise ValueError("fault_threshold must be non-negative")
        if self.fault_threshold > self.n_nodes:
            raise ValueError("fault_threshold cannot exceed n_nodes")

    @property
    def total_slots(self) -> int:
        return self.n_nodes * self.slots_per_node


def validate_cluster_spec(spec: ClusterSpec, n_experts: int) -> int:
    """Return the effective fault threshold for ``n_experts`` on ``spec``.

    The threshold is reduced when the cluster lacks the slots to give every
    expert ``fault_threshold`` replicas, and is never below 1 (every expert
    always needs at least one replica).  Raises :class:`InfeasibleError` when
    the cluster cannot hold even one replica per expert.
    """
    if n_experts < 1:
        raise ValueError("n_experts must be >= 1")
    if spec.total_slots < n_experts:
        raise InfeasibleError(
            f"cluster cannot hold one replica per expert "
            f"({spec.total_slots} slots < {n_experts} experts)"
        )
    return max(1, min(spec.fault_threshold, spec.total_slots // n_experts))


@dataclass(frozen=True)
class ExpertLoads:
    """Routed-token counts per expert, optionally split per rank.

    ``per_rank_counts[e][j]`` is the number of tokens routed to expert ``e``
    that originate on rank ``j``; ``totals[e]`` is the row sum.
    """

    n_experts: int
    per_rank_counts: tuple[tuple[int, ...], ...]
    totals: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if len(self.per_rank_counts) != self.n_experts or len(self.totals) != self.n_experts:
            raise ValueError("per_rank_counts/totals must have one row per expert")
        for e, row in enumerate(self.per_rank_counts):
            if any(v < 0 for v in row):
                raise ValueError(f"negative token count for expert {e}")
            if sum(row) != self.totals[e]:
                raise ValueError(f"totals inconsistent with per_rank_counts for expert {e}")

    @classmethod
    def from_totals(cls, totals: Sequence[int], n_ranks: int = 1) -> "ExpertLoads":
        """Build loads from per-expert totals, split uniformly across ranks."""
        rows = tuple(tuple(split_evenly(t, n_ranks)) for t in totals)
        return cls(len(totals), rows, tuple(totals))

    @classmethod
    def from_per_rank(cls, matrix: Sequence[Sequence[int]]) -> "ExpertLoads":
        rows = tuple(tuple(row) for row in matrix)
        return cls(len(rows), rows, tuple(sum(row) for row in rows))

    @property
    def n_ranks(self) -> int:
        return len(self.per_rank_counts[0]) if self.per_rank_counts else 0


@dataclass(frozen=True)
class LoadRecord:
    step: int
    layer: int
    counts: tuple[int, ...]


@dataclass(frozen=True)
class LoadTrace:
    """Validated sequence of per-step, per-layer expert token counts."""

    records: tuple[LoadRecord, ...]
    n_experts: int = 0

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted({r.layer for r in self.records}))

    def records_for_layer(self, layer: int) -> tuple[LoadRecord, ...]:
        return tuple(r for r in self.records if r.layer == layer)

    def totals_for_layer(self, layer: int) -> tuple[int, ...]:
        """Sum counts across all records of one layer (aggregate routing history)."""
        recs = self.records_for_layer(layer)
        if not recs:
            raise TraceValidationError(f"trace has no records for layer {layer}")
        out = [0] * self.n_experts
        for r in recs:
            for e, v in enumerate(r.counts):
                out[e] += v
        return tuple(out)


EVENT_ADD = "add"
EVENT_REMOVE = "remove"


@dataclass(frozen=True)
class AvailEvent:
    time_s: float
    kind: str
    nodes: tuple[int, ...]


@dataclass(frozen=True)
class AvailabilityTrace:
    """Time-ordered node add/remove events; removals only name live nodes."""

    events: tuple[AvailEvent, ...]

    def live_at_end(self) -> frozenset[int]:
        live: set[int] = set()
        for ev in self.events:
            if ev.kind == EVENT_ADD:
                live.update(ev.nodes)
            else:
                live.difference_update(ev.nodes)
        return frozenset(live)


def parse_load_trace(text: str) -> LoadTrace:
    """Parse a line-delimited JSON load trace.

    The expert count is inferred from the first record; later records with a
    different count width raise :class:`TraceSchemaError`.  Step numbers must
    be non-decreasing within each layer.
    """
    records: list[LoadRecord] = []
    n_experts = 0
    last_step: dict[int, int] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(line_no, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise TraceParseError(line_no, "record must be a JSON object")
        try:
            step = int(obj["step"])
            layer = int(obj["layer"])
            counts = obj["counts"]
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceParseError(line_no, f"missing or malformed field: {exc}") from exc
        if not isinstance(counts, list) or not all(isinstance(v, int) for v in counts):
            raise TraceParseError(line_no, "counts must be an array of integers")
        if any(v < 0 for v in counts):
            raise TraceParseError(line_no, "counts must be non-negative")
        if step < 0 or layer < 0:
            raise TraceParseError(line_no, "step and layer must be non-negative")
        if not counts:
            raise TraceParseError(line_no, "counts must be non-empty")
        if n_experts == 0:
            n_experts = len(counts)
        elif len(counts) != n_experts:
            raise TraceSchemaError(
                line_no, f"expected {n_experts} counts, got {len(counts)}"
            )
        if layer in last_step and step < last_step[layer]:
            raise TraceValidationError(
                f"line {line_no}: step {step} decreases within layer {layer}"
            )
        last_step[layer] = step
        records.append(LoadRecord(step, layer, tuple(counts)))
    return LoadTrace(tuple(records), n_experts)


def serialize_load_trace(trace: LoadTrace) -> str:
    lines = [
        json.dumps({"step": r.step, "layer": r.layer, "counts": list(r.counts)})
        for r in trace.records
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def parse_availability_trace(text: str) -> AvailabilityTrace:
    """Parse a line-delimited JSON availability trace and validate liveness."""
    events: list[AvailEvent] = []
    live: set[int] = set()
    last_t = None
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(line_no, f"invalid JSON: {exc.msg}") from exc
        try:
            t = float(obj["t"])
            kind = obj["kind"]
            nodes = obj["nodes"]
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceParseError(line_no, f"missing or malformed field: {exc}") from exc
        if t < 0:
            raise TraceParseError(line_no, "negative event time")
        if kind not in (EVENT_ADD, EVENT_REMOVE):
            raise TraceParseError(line_no, f"unknown event kind {kind!r}")
        if not isinstance(nodes, list) or not all(isinstance(v, int) for v in nodes):
            raise TraceParseError(line_no, "nodes must be an array of integers")
        if last_t is not None and t < last_t:
            raise TraceValidationError(f"line {line_no}: event times must be non-decreasing")
        last_t = t
        for n in nodes:
            if kind == EVENT_ADD:
                if n in live:
                    raise TraceValidationError(f"line {line_no}: node {n} is already live")
                live.add(n)
            else:
                if n not in live:
                    raise TraceValidationError(f"line {line_no}: node {n} is not live")
                live.remove(n)
        events.append(AvailEvent(t, kind, tuple(nodes)))
    return AvailabilityTrace(tuple(events))


def serialize_availability_trace(trace: AvailabilityTrace) -> str:
    lines = [
        json.dumps({"t": ev.time_s, "kind": ev.kind, "nodes": list(ev.nodes)})
        for ev in trace.events
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def split_proportionally(total: int, weights: Sequence[int]) -> list[int]:
    """Split ``total`` integer units proportionally to non-negative ``weights``.

    Uses the largest-remainder method; ties go to the lower index, so the
    result is deterministic and sums to ``total`` exactly.
    """
    if total < 0:
        raise ValueError("total must be non-negative")
    if any(w < 0 for w in weights):
        raise ValueError("weights must be non-negative")
    wsum = sum(weights)
    if wsum == 0:
        if total == 0:
            return [0] * len(weights)
        raise ValueError("cannot split a positive total over all-zero weights")
    shares = [total * w // wsum for w in weights]
    remainders = [(total * w) % wsum for w in weights]
    leftover = total - sum(shares)
    for idx in sorted(range(len(weights)), key=lambda i: (-remainders[i], i))[:leftover]:
        shares[idx] += 1
    return shares


def split_evenly(total: int, n: int) -> list[int]:
    """Split ``total`` into ``n`` near-equal non-negative integers."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return split_proportionally(total, [1] * n)


def as_totals(loads: "ExpertLoads | Sequence[int]") -> tuple[int, ...]:
    """Accept either an ExpertLoads or a plain totals sequence."""
    if isinstance(loads, ExpertLoads):
        return loads.totals
    return tuple(int(v) for v in loads)


def check_ragged(rows: Iterable[Sequence[int]]) -> int:
    """Return the common row width, raising ValueError on ragged input."""
    width = None
    for row in rows:
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ValueError("ragged input: rows have differing lengths")
    if width is None:
        raise ValueError("empty input")
    return width

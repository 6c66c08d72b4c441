"""Fault-tolerant replica placement with grouped node overlap.

Experts are chunked (ascending replica count) into groups of ``c`` and each
group is co-located on a dedicated set of nodes, so recovering a group only
requires one of its nodes to survive.  The construction is deterministic:
identical inputs produce byte-identical plans.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from math import ceil

from .allocation import AllocationPlan
from .core import ClusterSpec, InfeasibleError


@dataclass(frozen=True)
class PlacementPlan:
    """A ``c x N`` slot matrix; ``slots[i][j]`` is the expert id at node j's slot i."""

    layer: int
    n_experts: int
    slots: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if self.slots:
            widths = {len(row) for row in self.slots}
            if len(widths) > 1:
                raise ValueError("slot matrix rows must have equal width")
        for row in self.slots:
            for v in row:
                if not 0 <= v < self.n_experts:
                    raise ValueError(f"slot entry {v} outside [0, {self.n_experts})")

    @property
    def n_nodes(self) -> int:
        return len(self.slots[0]) if self.slots else 0

    @property
    def slots_per_node(self) -> int:
        return len(self.slots)

    def column(self, j: int) -> tuple[int, ...]:
        return tuple(self.slots[i][j] for i in range(self.slots_per_node))

    @cached_property
    def col_sets(self) -> tuple[frozenset[int], ...]:
        """Distinct experts per node (duplicates collapsed)."""
        return tuple(frozenset(self.column(j)) for j in range(self.n_nodes))

    @cached_property
    def replica_counts(self) -> tuple[int, ...]:
        counts = [0] * self.n_experts
        for row in self.slots:
            for v in row:
                counts[v] += 1
        return tuple(counts)

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "n_experts": self.n_experts,
            "slots": [list(row) for row in self.slots],
            "replicas": list(self.replica_counts),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "PlacementPlan":
        return cls(
            int(obj["layer"]),
            int(obj["n_experts"]),
            tuple(tuple(row) for row in obj["slots"]),
        )


def expert_groups(alloc: AllocationPlan, slots_per_node: int) -> list[list[int]]:
    """Chunk expert ids (ascending replica order) into groups of ``c``."""
    order = alloc.sorted_order
    c = slots_per_node
    return [list(order[i : i + c]) for i in range(0, len(order), c)]


def group_sizes(alloc: AllocationPlan, n_nodes: int, slots_per_node: int) -> list[int]:
    """Node-group sizes: each group gets as many nodes as its least-replicated
    expert has replicas; the last group is clamped to the nodes left over."""
    c = slots_per_node
    n_groups = ceil(alloc.n_experts / c)
    srt = alloc.sorted_replicas
    sizes = [srt[i * c] for i in range(n_groups - 1)]
    used = sum(sizes)
    sizes.append(min(n_nodes - used, srt[(n_groups - 1) * c]))
    return sizes


def build_mro_plan(alloc: AllocationPlan, spec: ClusterSpec, layer: int = 0) -> PlacementPlan:
    """Construct the grouped maximum-overlap placement for ``alloc``.

    Every node of node-group i holds one replica of each expert of expert
    group i; replicas left over after the group pass fill vacant slots
    node-by-node, always placing the expert with the most unplaced replicas
    (ties to the lower expert id).  Requires the allocation to fill the
    cluster exactly (sum r_e == N*c).
    """
    n, c = spec.n_nodes, spec.slots_per_node
    if alloc.total_replicas != n * c:
        raise InfeasibleError(
            f"allocation places {alloc.total_replicas} replicas "
            f"but the cluster has {n * c} slots"
        )
    groups = expert_groups(alloc, c)
    sizes = group_sizes(alloc, n, c)

    columns: list[list[int]] = [[] for _ in range(n)]
    remaining = list(alloc.replicas)
    node = 0
    for grp, size in zip(groups, sizes):
        for _ in range(size):
            for e in grp:
                columns[node].append(e)
                remaining[e] -= 1
            node += 1

    for j in range(n):
        while len(columns[j]) < c:
            e = min(range(alloc.n_experts), key=lambda x: (-remaining[x], x))
            assert remaining[e] > 0, "leftover replicas exhausted before slots"
            columns[j].append(e)
            remaining[e] -= 1
    assert all(v == 0 for v in remaining)

    slots = tuple(tuple(columns[j][i] for j in range(n)) for i in range(c))
    return PlacementPlan(layer, alloc.n_experts, slots)


def verify_mro(plan: PlacementPlan, alloc: AllocationPlan) -> bool:
    """Check that ``plan`` realises the grouped-overlap structure for ``alloc``.

    True iff the replica counts match and the nodes admit a partition into
    groups of the required sizes where every node of group i carries the whole
    expert group i.  Candidate node sets of distinct groups are disjoint (a
    full group occupies every slot of its node), so a per-group counting check
    is exact.
    """
    if plan.n_experts != alloc.n_experts:
        return False
    if plan.replica_counts != alloc.replicas:
        return False
    groups = expert_groups(alloc, plan.slots_per_node)
    sizes = group_sizes(alloc, plan.n_nodes, plan.slots_per_node)
    for grp, size in zip(groups, sizes):
        want = set(grp)
        candidates = sum(1 for cs in plan.col_sets if want <= cs)
        if candidates < size:
            return False
    return True


def distinct_node_span(plan: PlacementPlan, expert: int) -> int:
    """Number of distinct nodes holding at least one replica of ``expert``."""
    if not 0 <= expert < plan.n_experts:
        raise ValueError(f"unknown expert id {expert}")
    return sum(1 for cs in plan.col_sets if expert in cs)

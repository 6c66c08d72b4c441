"""Load-adaptive expert replica allocation.

Replica counts follow the routed-token distribution while every expert keeps
at least ``f_eff`` replicas, so recovery is guaranteed under fewer than
``f_eff`` simultaneous node failures (placement permitting).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .core import ClusterSpec, ExpertLoads, as_totals, validate_cluster_spec


@dataclass(frozen=True)
class AllocationPlan:
    """Per-expert replica counts.

    ``replicas`` is indexed by original expert id.  ``sorted_order`` maps the
    ascending-load rank to the original id; listed in that order the replica
    counts are non-decreasing.
    """

    replicas: tuple[int, ...]
    sorted_order: tuple[int, ...]
    f_used: int

    def __post_init__(self) -> None:
        if sorted(self.sorted_order) != list(range(len(self.replicas))):
            raise ValueError("sorted_order must be a permutation of expert ids")
        seq = self.sorted_replicas
        if any(seq[i] > seq[i + 1] for i in range(len(seq) - 1)):
            raise ValueError("replicas must be non-decreasing in sorted_order")
        if any(r < 1 for r in self.replicas):
            raise ValueError("every expert needs at least one replica")

    @property
    def n_experts(self) -> int:
        return len(self.replicas)

    @property
    def total_replicas(self) -> int:
        return sum(self.replicas)

    @property
    def sorted_replicas(self) -> tuple[int, ...]:
        return tuple(self.replicas[e] for e in self.sorted_order)

    def to_dict(self) -> dict:
        return {
            "replicas": list(self.replicas),
            "sorted_order": list(self.sorted_order),
            "f_used": self.f_used,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "AllocationPlan":
        return cls(
            tuple(obj["replicas"]), tuple(obj["sorted_order"]), int(obj["f_used"])
        )


def allocation_from_replicas(replicas: Sequence[int], f_used: int | None = None) -> AllocationPlan:
    """Wrap a raw replica vector (by expert id) into an AllocationPlan.

    Useful for exercising placement and reliability code on hand-picked
    replica counts that did not come from a load distribution.
    """
    order = tuple(sorted(range(len(replicas)), key=lambda e: (replicas[e], e)))
    f = min(replicas) if f_used is None else f_used
    return AllocationPlan(tuple(replicas), order, f)


def allocate_replicas(loads: ExpertLoads | Sequence[int], spec: ClusterSpec) -> AllocationPlan:
    """Compute per-expert replica counts from routed-token totals.

    Experts are processed in ascending load order (ties by expert id); each
    receives its proportional share of the still-unassigned slots, floored,
    but never fewer than the effective fault threshold:

        r_e = max(floor(t_e / sum_{e'>=e} t_e' * remaining_slots), f_eff)

    The most-loaded expert absorbs the remainder, so the counts always sum to
    ``n_nodes * slots_per_node`` exactly.  All-zero loads are treated as
    uniform (one synthetic token per expert).
    """
    totals = as_totals(loads)
    n_experts = len(totals)
    f_eff = validate_cluster_spec(spec, n_experts)
    if sum(totals) == 0:
        totals = tuple(1 for _ in totals)

    order = sorted(range(n_experts), key=lambda e: (totals[e], e))
    slots_left = spec.total_slots
    tokens_left = sum(totals)
    replicas = [0] * n_experts
    for e in order:
        share = totals[e] * slots_left // tokens_left
        r = max(share, f_eff)
        replicas[e] = r
        slots_left -= r
        tokens_left -= totals[e]
    # The last expert's share is exactly the remaining slots; the f_eff clamp
    # can only have moved slots forward, never produced a deficit.
    assert slots_left == 0 and tokens_left == 0
    return AllocationPlan(tuple(replicas), tuple(order), f_eff)


def allocation_skew(plan: AllocationPlan, loads: ExpertLoads | Sequence[int]) -> float:
    """Largest absolute gap between replica share and token share.

    Zero means the allocation matches the load distribution exactly; the gap
    grows when the fault-tolerance floor forces extra replicas onto cold
    experts.  All-zero loads return 0 by convention.
    """
    totals = as_totals(loads)
    if len(totals) != plan.n_experts:
        raise ValueError("loads and plan disagree on expert count")
    t_sum = sum(totals)
    if t_sum == 0:
        return 0.0
    r_sum = plan.total_replicas
    return max(
        abs(plan.replicas[e] / r_sum - totals[e] / t_sum) for e in range(plan.n_experts)
    )

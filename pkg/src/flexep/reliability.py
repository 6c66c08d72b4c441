"""Recovery probability under uniformly random node failures.

A cluster state is recoverable when the union of experts held by surviving
nodes covers every expert.  Probabilities are exact rationals
(:class:`fractions.Fraction`); floating point appears only in Monte Carlo
summaries.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations, combinations_with_replacement
from typing import Iterable, Sequence

from .allocation import AllocationPlan
from .core import ClusterSpec, InfeasibleError, validate_cluster_spec
from .placement import PlacementPlan, group_sizes

DEFAULT_ENUMERATION_CAP = 10**6
MC_PRNG_NAME = "mt19937-partial-shuffle"


class EnumerationCapError(ValueError):
    """Exact enumeration would exceed the configured subset cap."""


class OracleCapError(ValueError):
    """Instance is too large for the brute-force placement oracle."""


@dataclass(frozen=True)
class McEstimate:
    """Monte Carlo recovery estimate with its standard error and provenance."""

    value: float
    stderr: float
    n_samples: int
    seed: int
    prng: str = MC_PRNG_NAME


def is_recoverable(plan: PlacementPlan, alive_set: Iterable[int]) -> bool:
    """True iff the surviving nodes jointly hold every expert."""
    alive = set(alive_set)
    if not alive <= set(range(plan.n_nodes)):
        raise ValueError("alive_set contains unknown node indices")
    covered: set[int] = set()
    for j in alive:
        covered |= plan.col_sets[j]
        if len(covered) == plan.n_experts:
            return True
    return len(covered) == plan.n_experts


def _coverage_masks(plan: PlacementPlan) -> tuple[list[int], int]:
    masks = [0] * plan.n_nodes
    for j, cs in enumerate(plan.col_sets):
        m = 0
        for e in cs:
            m |= 1 << e
        masks[j] = m
    return masks, (1 << plan.n_experts) - 1


def recovery_probability_exact(
    plan: PlacementPlan, k_failed: int, enumeration_cap: int = DEFAULT_ENUMERATION_CAP
) -> Fraction:
    """Exact recovery probability under ``k_failed`` uniform node failures.

    Enumerates every alive set of size ``N - k``; raises
    :class:`EnumerationCapError` when there are more than ``enumeration_cap``
    of them (use :func:`recovery_probability_mc` instead).
    """
    n = plan.n_nodes
    if not 0 <= k_failed <= n:
        raise ValueError("k_failed must be in [0, N]")
    n_alive = n - k_failed
    total = math.comb(n, n_alive)
    if total > enumeration_cap:
        raise EnumerationCapError(
            f"C({n},{n_alive}) = {total} exceeds cap {enumeration_cap}; "
            "use recovery_probability_mc"
        )
    masks, full = _coverage_masks(plan)
    good = 0
    for alive in combinations(range(n), n_alive):
        m = 0
        for j in alive:
            m |= masks[j]
        if m == full:
            good += 1
    return Fraction(good, total)


def recovery_probability_closed_form(
    alloc: AllocationPlan, spec: ClusterSpec, r_alive: int
) -> Fraction:
    """Closed-form recovery probability of the grouped placement.

    With g expert groups whose node segments have lengths L_1..L_g, recovery
    means every segment keeps a survivor; inclusion-exclusion over the set of
    missed segments gives

        sum over S of (-1)^|S| * C(N - sum_{i in S} L_i, R) / C(N, R)

    where terms with a negative top argument vanish.
    """
    n = spec.n_nodes
    if not 0 <= r_alive <= n:
        raise ValueError("r_alive must be in [0, N]")
    lengths = group_sizes(alloc, n, spec.slots_per_node)
    denom = math.comb(n, r_alive)
    total = Fraction(0)
    g = len(lengths)
    for bits in range(1 << g):
        removed = sum(lengths[i] for i in range(g) if bits >> i & 1)
        sign = -1 if bin(bits).count("1") % 2 else 1
        if n - removed >= 0:
            total += sign * math.comb(n - removed, r_alive)
    return Fraction(total, denom)


def recovery_probability_mc(
    plan: PlacementPlan, k_failed: int, n_samples: int, seed: int
) -> McEstimate:
    """Unbiased Monte Carlo estimate of the recovery probability.

    Failure sets are drawn by a partial Fisher-Yates shuffle of the node ids
    driven by a Mersenne Twister seeded with ``seed``, so results are
    reproducible bit-for-bit.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n = plan.n_nodes
    if not 0 <= k_failed <= n:
        raise ValueError("k_failed must be in [0, N]")
    masks, full = _coverage_masks(plan)
    rng = random.Random(seed)
    ids = list(range(n))
    hits = 0
    for _ in range(n_samples):
        for i in range(k_failed):
            j = rng.randrange(i, n)
            ids[i], ids[j] = ids[j], ids[i]
        m = 0
        for j in ids[k_failed:]:
            m |= masks[j]
        if m == full:
            hits += 1
    p = hits / n_samples
    stderr = math.sqrt(p * (1.0 - p) / n_samples)
    return McEstimate(p, stderr, n_samples, seed)


def _candidate_columns(n_experts: int, slots_per_node: int):
    return list(combinations_with_replacement(range(n_experts), slots_per_node))


def brute_force_optimal_profile(
    alloc: AllocationPlan,
    spec: ClusterSpec,
    caps: tuple[int, int, int] = (5, 2, 4),
) -> dict[int, Fraction]:
    """Best achievable recovery probability for every failure count.

    Enumerates all slot matrices consistent with the replica counts, deduped
    by column multiset (recovery only depends on the set of experts per node),
    and maximises the exact recovery probability independently per k.
    Instances above ``caps = (max_N, max_c, max_E)`` are rejected.
    """
    n, c, e = spec.n_nodes, spec.slots_per_node, alloc.n_experts
    max_n, max_c, max_e = caps
    if n > max_n or c > max_c or e > max_e:
        raise OracleCapError(
            f"instance (N={n}, c={c}, E={e}) exceeds oracle caps {caps}"
        )
    if alloc.total_replicas != n * c:
        raise InfeasibleError("replica counts must fill the cluster exactly")

    want = alloc.replicas
    full = (1 << e) - 1
    col_types = _candidate_columns(e, c)
    type_counts = []
    type_masks = []
    for col in col_types:
        counts = [0] * e
        m = 0
        for v in col:
            counts[v] += 1
            m |= 1 << v
        type_counts.append(tuple(counts))
        type_masks.append(m)

    best: dict[int, Fraction] = {
        k: Fraction(0) for k in range(n + 1)
    }
    denom = {k: math.comb(n, n - k) for k in range(n + 1)}
    for combo in combinations_with_replacement(range(len(col_types)), n):
        totals = [0] * e
        for t in combo:
            tc = type_counts[t]
            for i in range(e):
                totals[i] += tc[i]
        if tuple(totals) != want:
            continue
        masks = [type_masks[t] for t in combo]
        good_by_size = [0] * (n + 1)
        for bits in range(1 << n):
            m = 0
            jj = bits
            idx = 0
            while jj:
                if jj & 1:
                    m |= masks[idx]
                jj >>= 1
                idx += 1
            if m == full:
                good_by_size[bin(bits).count("1")] += 1
        for k in range(n + 1):
            p = Fraction(good_by_size[n - k], denom[k])
            if p > best[k]:
                best[k] = p
    return best


def brute_force_optimal_probability(
    alloc: AllocationPlan,
    spec: ClusterSpec,
    r_alive: int,
    caps: tuple[int, int, int] = (5, 2, 4),
) -> Fraction:
    """Max recovery probability over all placements, for ``r_alive`` survivors."""
    if not 0 <= r_alive <= spec.n_nodes:
        raise ValueError("r_alive must be in [0, N]")
    profile = brute_force_optimal_profile(alloc, spec, caps)
    return profile[spec.n_nodes - r_alive]


def baseline_placement(
    strategy: str, alloc: AllocationPlan, spec: ClusterSpec, layer: int = 0
) -> PlacementPlan:
    """Reference placements for comparison.

    ``spread`` walks experts in descending replica count and deals replicas
    round-robin over nodes with free slots; ``compact`` packs each expert
    (ascending id) onto as few nodes as possible.
    """
    n, c = spec.n_nodes, spec.slots_per_node
    if alloc.total_replicas != n * c:
        raise InfeasibleError("replica counts must fill the cluster exactly")
    columns: list[list[int]] = [[] for _ in range(n)]
    if strategy == "spread":
        order = sorted(range(alloc.n_experts), key=lambda e: (-alloc.replicas[e], e))
        ptr = 0
        for e in order:
            for _ in range(alloc.replicas[e]):
                while len(columns[ptr % n]) >= c:
                    ptr += 1
                columns[ptr % n].append(e)
                ptr += 1
    elif strategy == "compact":
        node = 0
        for e in range(alloc.n_experts):
            left = alloc.replicas[e]
            while left > 0:
                room = c - len(columns[node])
                take = min(room, left)
                columns[node].extend([e] * take)
                left -= take
                if len(columns[node]) == c:
                    node += 1
    else:
        raise ValueError(f"unknown baseline strategy {strategy!r}")
    slots = tuple(tuple(columns[j][i] for j in range(n)) for i in range(c))
    return PlacementPlan(layer, alloc.n_experts, slots)

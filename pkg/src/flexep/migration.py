"""Mapping physical nodes onto new placement plans with minimal state movement.

Items are opaque hashables: plain expert ids for a single layer, or
``(layer, expert)`` pairs when one reconfiguration event covers several
layers.  Only experts a node does not already hold have to be fetched.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations
from typing import Hashable, Mapping, Sequence

Item = Hashable


class NoSurvivingOwnerError(ValueError):
    """A required expert state has no live owner; caller must fall back to a
    checkpoint."""


@dataclass(frozen=True)
class NodeMapping:
    """Injective assignment of physical nodes to new-plan columns."""

    assignment: tuple[tuple[int, int], ...]  # (node_id, column_index)
    fetch_sets: tuple[tuple[int, frozenset], ...]  # (node_id, items to fetch)

    @property
    def by_node(self) -> dict[int, int]:
        return dict(self.assignment)

    @property
    def fetches(self) -> dict[int, frozenset]:
        return dict(self.fetch_sets)


@dataclass(frozen=True)
class Transfer:
    item: Item
    source: int
    dest: int
    size_bytes: int


@dataclass(frozen=True)
class TransferSchedule:
    transfers: tuple[Transfer, ...]

    @property
    def send_counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for t in self.transfers:
            out[t.source] = out.get(t.source, 0) + 1
        return out

    @property
    def total_bytes(self) -> int:
        return sum(t.size_bytes for t in self.transfers)

    def to_dict(self) -> dict:
        return {
            "transfers": [
                {
                    "item": list(t.item) if isinstance(t.item, tuple) else t.item,
                    "source": t.source,
                    "dest": t.dest,
                    "size_bytes": t.size_bytes,
                }
                for t in self.transfers
            ]
        }


def greedy_node_mapping(
    old_holdings: Mapping[int, set],
    new_columns: Sequence[set],
    live_nodes: Sequence[int],
) -> NodeMapping:
    """Assign live nodes to plan columns, cheapest pair first.

    Repeatedly picks the unassigned (node, column) pair whose column needs the
    fewest items the node does not already hold; ties break on lower node id,
    then lower column index.  Nodes missing from ``old_holdings`` (fresh
    joiners) count as holding nothing.  The pairwise greedy can occasionally
    lock in a bad early match, so the plain in-order assignment is kept as a
    fallback: the result is never costlier than mapping nodes onto columns in
    order.
    """
    nodes = list(live_nodes)
    if len(nodes) != len(new_columns):
        raise ValueError(
            f"{len(nodes)} live nodes cannot cover {len(new_columns)} plan columns"
        )
    held = {n: frozenset(old_holdings.get(n, ())) for n in nodes}
    cols = [frozenset(cset) for cset in new_columns]
    free_nodes = set(nodes)
    free_cols = set(range(len(cols)))
    assignment: list[tuple[int, int]] = []
    while free_cols:
        best = None
        for n in sorted(free_nodes):
            hn = held[n]
            for ci in sorted(free_cols):
                cost = len(cols[ci] - hn)
                key = (cost, n, ci)
                if best is None or key < best:
                    best = key
        _, n, ci = best
        assignment.append((n, ci))
        free_nodes.remove(n)
        free_cols.remove(ci)
    greedy_cost = sum(len(cols[ci] - held[n]) for n, ci in assignment)
    identity = [(n, ci) for ci, n in enumerate(nodes)]
    identity_cost = sum(len(cols[ci] - held[n]) for n, ci in identity)
    if identity_cost < greedy_cost:
        assignment = identity
    assignment.sort()
    fetches = tuple((n, cols[ci] - held[n]) for n, ci in assignment)
    return NodeMapping(tuple(assignment), fetches)


def transfer_cost(mapping: NodeMapping) -> int:
    """Total number of expert states that must be fetched."""
    return sum(len(f) for _, f in mapping.fetch_sets)


def identity_mapping_cost(
    old_holdings: Mapping[int, set],
    new_columns: Sequence[set],
    live_nodes: Sequence[int],
) -> int:
    """Cost of mapping node order straight onto column order (the baseline)."""
    nodes = list(live_nodes)
    if len(nodes) != len(new_columns):
        raise ValueError("live node count must match column count")
    return sum(
        len(frozenset(col) - frozenset(old_holdings.get(n, ())))
        for n, col in zip(nodes, new_columns)
    )


def brute_force_mapping_cost(
    old_holdings: Mapping[int, set],
    new_columns: Sequence[set],
    live_nodes: Sequence[int],
) -> int:
    """Exact optimum over all node-to-column bijections (small instances only)."""
    nodes = list(live_nodes)
    if len(nodes) != len(new_columns):
        raise ValueError("live node count must match column count")
    if len(nodes) > 8:
        raise ValueError("brute-force mapping is limited to 8 nodes")
    held = [frozenset(old_holdings.get(n, ())) for n in nodes]
    cols = [frozenset(cset) for cset in new_columns]
    best = None
    for perm in permutations(range(len(nodes))):
        cost = sum(len(cols[ci] - held[ni]) for ni, ci in enumerate(perm))
        if best is None or cost < best:
            best = cost
    return best if best is not None else 0


def plan_state_transfers(
    mapping: NodeMapping,
    owners: Mapping[Item, Sequence[int]],
    state_size: Mapping[Item, int] | int = 0,
) -> TransferSchedule:
    """Pick a source for every fetch, balancing sends across owners.

    Each item's fetches are spread round-robin over its surviving owners
    (per-item send counts stay within ceil(fetches/owners)); among equally
    loaded owners the one with fewer total sends wins, then the lower node id.
    Raises :class:`NoSurvivingOwnerError` if an item has no owner.
    """
    per_item_sends: dict[tuple[Item, int], int] = {}
    total_sends: dict[int, int] = {}
    transfers: list[Transfer] = []
    work = sorted(
        ((node, item) for node, fset in mapping.fetch_sets for item in fset),
        key=lambda p: (repr(p[1]), p[0]),
    )
    for node, item in work:
        candidates = [o for o in owners.get(item, ()) if o != node]
        if not candidates:
            raise NoSurvivingOwnerError(f"no surviving owner for {item!r}")
        src = min(
            candidates,
            key=lambda o: (per_item_sends.get((item, o), 0), total_sends.get(o, 0), o),
        )
        per_item_sends[(item, src)] = per_item_sends.get((item, src), 0) + 1
        total_sends[src] = total_sends.get(src, 0) + 1
        size = state_size if isinstance(state_size, int) else state_size.get(item, 0)
        transfers.append(Transfer(item, src, node, size))
    return TransferSchedule(tuple(transfers))

"""Token dispatch schedules for asymmetric expert placements.

Each rank decides, per expert, how many of its locally routed tokens stay
local and how many go to every other rank, so that every replica processes
about the same number of tokens and no all-to-all slot is padded.  All ranks
compute from the same global (T, R) matrices, so send and receive sides agree
without extra negotiation.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil
from typing import Sequence

from .core import check_ragged, split_proportionally
from .placement import PlacementPlan


class UnroutableTokenError(ValueError):
    """Tokens are routed to an expert that has no replica anywhere."""


class DispatchConsistencyError(ValueError):
    """Send and receive schedules disagree; indicates corrupted inputs."""


@dataclass(frozen=True)
class ReplicaMatrix:
    """``counts[e][j]``: replicas of expert e hosted on rank j."""

    counts: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        check_ragged(self.counts)
        for row in self.counts:
            if any(v < 0 for v in row):
                raise ValueError("replica counts must be non-negative")

    @classmethod
    def from_plan(cls, plan: PlacementPlan) -> "ReplicaMatrix":
        rows = []
        for e in range(plan.n_experts):
            rows.append(
                tuple(plan.column(j).count(e) for j in range(plan.n_nodes))
            )
        return cls(tuple(rows))

    @property
    def n_experts(self) -> int:
        return len(self.counts)

    @property
    def n_ranks(self) -> int:
        return len(self.counts[0])

    def total(self, e: int) -> int:
        return sum(self.counts[e])


@dataclass(frozen=True)
class DispatchSchedule:
    """One rank's dispatch decisions.

    ``send_counts[e][j]`` tokens of expert e go from this rank to rank j
    (j == rank means processed locally); ``send_sizes[j]`` is the per-rank
    total, ``recv_sizes[j]`` the tokens expected from rank j, and ``quota[e]``
    the per-replica token budget used to balance the load.
    """

    rank: int
    send_counts: tuple[tuple[int, ...], ...]
    send_sizes: tuple[int, ...]
    recv_sizes: tuple[int, ...]
    quota: tuple[int, ...]

    @property
    def n_experts(self) -> int:
        return len(self.send_counts)

    @property
    def n_ranks(self) -> int:
        return len(self.send_sizes)

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "D": [list(row) for row in self.send_counts],
            "s": list(self.send_sizes),
            "recv": list(self.recv_sizes),
            "quota": list(self.quota),
        }


def gather_load_matrix(per_rank_counts: Sequence[Sequence[int]]) -> tuple[tuple[int, ...], ...]:
    """Assemble the global load matrix T[e][j] from per-rank report vectors.

    ``per_rank_counts[j]`` is rank j's per-expert routed-token vector; all
    vectors must have the same length.
    """
    check_ragged(per_rank_counts)
    n_ranks = len(per_rank_counts)
    n_experts = len(per_rank_counts[0])
    return tuple(
        tuple(int(per_rank_counts[j][e]) for j in range(n_ranks))
        for e in range(n_experts)
    )


def _dispatch_row(
    i: int, t_row: Sequence[int], r_row: Sequence[int], quota: int
) -> list[int]:
    """Sender i's per-destination token counts for one expert."""
    n = len(t_row)
    caps = [quota * r_row[j] for j in range(n)]
    local = min(t_row[i], caps[i])
    overflow = t_row[i] - local
    out = [0] * n
    out[i] = local
    if overflow:
        residual = [caps[j] - min(caps[j], t_row[j]) for j in range(n)]
        residual[i] = 0
        split = split_proportionally(overflow, residual)
        for j in range(n):
            out[j] += split[j]
    return out


def full_dispatch_matrices(
    t_matrix: Sequence[Sequence[int]], replicas: ReplicaMatrix
) -> list[list[list[int]]]:
    """All senders' dispatch matrices: result[i][e][j] tokens of e from i to j.

    Deterministic given (T, R); every rank can reproduce every other rank's
    schedule, which is how receive sizes are known without communication.
    """
    n_experts = len(t_matrix)
    if n_experts != replicas.n_experts:
        raise ValueError("T and R disagree on expert count")
    n_ranks = check_ragged(t_matrix)
    if n_ranks != replicas.n_ranks:
        raise ValueError("T and R disagree on rank count")
    quotas = []
    for e in range(n_experts):
        t_e = sum(t_matrix[e])
        r_e = replicas.total(e)
        if t_e > 0 and r_e == 0:
            raise UnroutableTokenError(
                f"expert {e} has {t_e} routed tokens but no replicas"
            )
        quotas.append(ceil(t_e / r_e) if r_e else 0)
    out = []
    for i in range(n_ranks):
        rows = [
            _dispatch_row(i, t_matrix[e], replicas.counts[e], quotas[e])
            for e in range(n_experts)
        ]
        out.append(rows)
    return out


def compute_dispatch_schedule(
    rank: int, t_matrix: Sequence[Sequence[int]], replicas: ReplicaMatrix
) -> DispatchSchedule:
    """Build rank ``rank``'s schedule from the shared (T, R) matrices.

    Per expert the quota is ceil(t_e / r_e), so total capacity always covers
    the routed tokens.  Local tokens are kept up to the local capacity; the
    overflow is split over the other ranks proportionally to their residual
    capacity with largest-remainder rounding (ties to the lower rank id).
    """
    matrices = full_dispatch_matrices(t_matrix, replicas)
    n_experts = len(t_matrix)
    n_ranks = replicas.n_ranks
    if not 0 <= rank < n_ranks:
        raise ValueError("rank out of range")
    mine = matrices[rank]
    send_sizes = tuple(
        sum(mine[e][j] for e in range(n_experts)) for j in range(n_ranks)
    )
    recv_sizes = tuple(
        sum(matrices[j][e][rank] for e in range(n_experts)) if j != rank else 0
        for j in range(n_ranks)
    )
    quotas = []
    for e in range(n_experts):
        t_e = sum(t_matrix[e])
        r_e = replicas.total(e)
        quotas.append(ceil(t_e / r_e) if r_e else 0)
    return DispatchSchedule(
        rank=rank,
        send_counts=tuple(tuple(row) for row in mine),
        send_sizes=send_sizes,
        recv_sizes=recv_sizes,
        quota=tuple(quotas),
    )


def build_shuffle_index(
    schedule: DispatchSchedule, routed_experts: Sequence[int]
) -> list[int]:
    """Gather indices turning the local token order into the send order.

    ``routed_experts[p]`` is the expert of the rank's p-th local token.  The
    send buffer is grouped destination-major then expert-major; within a group
    the original token order is preserved, and for each expert the first
    ``D[e][0]`` of its tokens go to rank 0, the next ``D[e][1]`` to rank 1,
    and so on.  ``result[s]`` is the local position of the token at send slot
    ``s`` (a bijection).
    """
    n_experts = schedule.n_experts
    n_ranks = schedule.n_ranks
    expected = [sum(schedule.send_counts[e]) for e in range(n_experts)]
    if len(routed_experts) != sum(expected):
        raise ValueError(
            f"routing list has {len(routed_experts)} tokens, "
            f"schedule covers {sum(expected)}"
        )
    positions: list[list[int]] = [[] for _ in range(n_experts)]
    for p, e in enumerate(routed_experts):
        if not 0 <= e < n_experts:
            raise ValueError(f"token {p} routed to unknown expert {e}")
        positions[e].append(p)
    for e in range(n_experts):
        if len(positions[e]) != expected[e]:
            raise ValueError(
                f"routing list has {len(positions[e])} tokens for expert {e}, "
                f"schedule expects {expected[e]}"
            )
    index: list[int] = []
    taken = [0] * n_experts
    for j in range(n_ranks):
        for e in range(n_experts):
            cnt = schedule.send_counts[e][j]
            index.extend(positions[e][taken[e] : taken[e] + cnt])
            taken[e] += cnt
    return index


def invert_permutation(index: Sequence[int]) -> list[int]:
    out = [0] * len(index)
    for new_pos, old_pos in enumerate(index):
        out[old_pos] = new_pos
    return out


def simulate_all_to_all(
    schedules: Sequence[DispatchSchedule],
) -> list[list[list[int]]]:
    """Cross-check all ranks' schedules and return the receive-side view.

    Returns ``received[j][e][i]``: tokens of expert e that rank j receives
    from rank i (i == j entries are the locally kept tokens).  Raises
    :class:`DispatchConsistencyError` when any pair disagrees on transfer
    sizes, which can only happen if the schedules were not computed from the
    same (T, R).
    """
    n_ranks = len(schedules)
    if n_ranks == 0:
        return []
    n_experts = schedules[0].n_experts
    for s in schedules:
        if s.n_ranks != n_ranks or s.n_experts != n_experts:
            raise DispatchConsistencyError("schedules have mismatched shapes")
    for i, si in enumerate(schedules):
        for j in range(n_ranks):
            if i == j:
                continue
            sent = si.send_sizes[j]
            expected = schedules[j].recv_sizes[i]
            if sent != expected:
                raise DispatchConsistencyError(
                    f"rank {i} sends {sent} tokens to rank {j}, "
                    f"rank {j} expects {expected}"
                )
    received = [
        [
            [schedules[i].send_counts[e][j] for i in range(n_ranks)]
            for e in range(n_experts)
        ]
        for j in range(n_ranks)
    ]
    return received

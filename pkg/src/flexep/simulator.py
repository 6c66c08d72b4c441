"""Discrete-event simulation of elastic expert-parallel training.

Replays a load trace and an availability trace against one of three
strategies:

* ``adaptive``  - load-adaptive replica allocation, grouped placement and
  flexible dispatch; keeps training on all live nodes as long as the
  survivors jointly hold every expert.
* ``static``    - classic expert parallelism; uses the largest multiple of
  ``ep_size`` live nodes and restarts from the last checkpoint on any failure
  of a utilized node.
* ``static_ft`` - classic expert parallelism with reconfiguration: survives a
  failure without restarting when the surviving utilized nodes still cover
  every expert partition.

The step-time model is linear and configurable: absolute throughput numbers
are modeling artifacts, but structural comparisons (utilization, skew
sensitivity, restart cost) are meaningful.  Runs are fully deterministic;
there is no randomness anywhere in the loop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .allocation import allocate_replicas
from .core import (
    AvailabilityTrace,
    ClusterSpec,
    CostModel,
    EVENT_ADD,
    LoadTrace,
    parse_availability_trace,
    parse_load_trace,
    split_proportionally,
)
from .dispatch import ReplicaMatrix, full_dispatch_matrices
from .migration import greedy_node_mapping
from .placement import PlacementPlan, build_mro_plan

STRATEGIES = ("adaptive", "static", "static_ft")

CAT_COMPUTE = "compute"
CAT_LOST_STEP = "lost_step"
CAT_CHECKPOINT = "checkpoint"
CAT_RESTART = "restart"
CAT_RECONFIG = "reconfig"
CAT_REBALANCE = "rebalance"
CAT_IDLE = "idle"


@dataclass(frozen=True)
class SimConfig:
    cluster: ClusterSpec
    n_layers: int
    n_experts: int
    strategy: str
    batch_tokens_per_node: int
    load_trace: LoadTrace
    availability: AvailabilityTrace
    duration_s: float
    ep_size: int = 0
    adaptive_checkpointing: bool = True

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.n_layers < 1 or self.n_experts < 1:
            raise ValueError("n_layers and n_experts must be >= 1")
        if self.batch_tokens_per_node < 1:
            raise ValueError("batch_tokens_per_node must be >= 1")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.strategy != "adaptive":
            if self.ep_size < 1:
                raise ValueError("baselines need ep_size >= 1")
            if self.n_experts % self.ep_size != 0:
                raise ValueError("ep_size must divide the expert count")
            if self.n_experts // self.ep_size > self.cluster.slots_per_node:
                raise ValueError("experts per rank exceed slots_per_node")
        if not self.load_trace.records:
            raise ValueError("load trace is empty")
        if self.load_trace.n_experts != self.n_experts:
            raise ValueError("load trace expert count differs from config")
        for layer in range(self.n_layers):
            if not any(r.layer == layer for r in self.load_trace.records):
                raise ValueError(f"load trace has no records for layer {layer}")
        if not self.availability.events:
            raise ValueError("availability trace is empty")


def load_sim_config(path: str | Path) -> SimConfig:
    """Read a SimConfig from a JSON file; trace paths are resolved relative
    to the config file's directory."""
    path = Path(path)
    obj = json.loads(path.read_text())
    cm = CostModel(**obj.get("cost_model", {}))
    cl = obj["cluster"]
    cluster = ClusterSpec(
        n_nodes=cl["n_nodes"],
        slots_per_node=cl["slots_per_node"],
        fault_threshold=cl.get("fault_threshold", 2),
        cost_model=cm,
    )
    base = path.parent
    load_trace = parse_load_trace((base / obj["load_trace"]).read_text())
    avail = parse_availability_trace((base / obj["availability_trace"]).read_text())
    return SimConfig(
        cluster=cluster,
        n_layers=obj["n_layers"],
        n_experts=obj["n_experts"],
        strategy=obj["strategy"],
        batch_tokens_per_node=obj["batch_tokens_per_node"],
        load_trace=load_trace,
        availability=avail,
        duration_s=obj["duration_s"],
        ep_size=obj.get("ep_size", 0),
        adaptive_checkpointing=obj.get("adaptive_checkpointing", True),
    )


@dataclass(frozen=True)
class TimelinePoint:
    time_s: float
    live: int
    utilized: int
    throughput: float
    cum_samples: int
    event: str = ""


@dataclass(frozen=True)
class SimEvent:
    time_s: float
    kind: str
    detail: str = ""


@dataclass
class SimReport:
    timeline: list[TimelinePoint] = field(default_factory=list)
    events: list[SimEvent] = field(default_factory=list)
    totals: dict[str, float] = field(default_factory=dict)
    steps_completed: int = 0
    cum_samples: int = 0
    halted: str = ""

    def to_json(self) -> str:
        obj = {
            "timeline": [vars(p) for p in self.timeline],
            "events": [vars(e) for e in self.events],
            "totals": self.totals,
            "steps_completed": self.steps_completed,
            "cum_samples": self.cum_samples,
            "halted": self.halted,
        }
        return json.dumps(obj, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SimReport":
        obj = json.loads(text)
        return cls(
            timeline=[TimelinePoint(**p) for p in obj["timeline"]],
            events=[SimEvent(**e) for e in obj["events"]],
            totals=dict(obj["totals"]),
            steps_completed=obj["steps_completed"],
            cum_samples=obj["cum_samples"],
            halted=obj["halted"],
        )

    def to_csv(self) -> str:
        lines = ["time_s,live,utilized,throughput,cum_samples,event"]
        for p in self.timeline:
            lines.append(
                f"{p.time_s:.6f},{p.live},{p.utilized},"
                f"{p.throughput:.6f},{p.cum_samples},{p.event}"
            )
        return "\n".join(lines) + "\n"


def emit_report(report: SimReport, fmt: str) -> bytes:
    if fmt == "json":
        return report.to_json().encode()
    if fmt == "csv":
        return report.to_csv().encode()
    raise ValueError(f"unknown report format {fmt!r}")


def _scale_loads(weights: Sequence[int], total_tokens: int) -> list[int]:
    if sum(weights) == 0:
        weights = [1] * len(weights)
    return split_proportionally(total_tokens, list(weights))


def adaptive_layer_cost(
    plan: PlacementPlan, layer_tokens: Sequence[int], n_ranks: int
) -> tuple[int, int]:
    """(max per-node compute tokens, cross-node tokens) under flexible dispatch.

    Tokens originate uniformly across ranks; the dispatch schedule then moves
    overflow to ranks with spare replica capacity.
    """
    e = len(layer_tokens)
    t_matrix = [split_proportionally(layer_tokens[ee], [1] * n_ranks) for ee in range(e)]
    rmat = ReplicaMatrix.from_plan(plan)
    mats = full_dispatch_matrices(t_matrix, rmat)
    node_tokens = [0] * n_ranks
    cross = 0
    for i in range(n_ranks):
        for ee in range(e):
            row = mats[i][ee]
            for j in range(n_ranks):
                node_tokens[j] += row[j]
                if j != i:
                    cross += row[j]
    return max(node_tokens), cross


def ep_group_layer_cost(
    layer_tokens: Sequence[int], utilized: int, ep_size: int
) -> tuple[float, float]:
    """(max per-rank padded tokens, cross-node padded tokens) for classic EP.

    Every EP group handles an equal share of the batch; within a group each
    rank owns a contiguous expert partition and all-to-all buffers are padded
    to the partition's most-loaded expert, so skew directly inflates both
    compute and transfer volume.
    """
    e = len(layer_tokens)
    n_groups = utilized // ep_size
    if n_groups == 0:
        return 0.0, 0.0
    per_rank = e // ep_size
    max_rank = 0.0
    comm = 0.0
    for p in range(ep_size):
        part = layer_tokens[p * per_rank : (p + 1) * per_rank]
        part_max = max(part) / n_groups
        rank_tokens = part_max * per_rank
        max_rank = max(max_rank, rank_tokens)
        comm += rank_tokens * (ep_size - 1) / ep_size * n_groups
    return max_rank, comm


def step_time_model(
    strategy: str,
    plans: dict[int, PlacementPlan] | None,
    layer_loads: dict[int, Sequence[int]],
    cost_model: CostModel,
    utilized: int,
    ep_size: int = 0,
) -> float:
    """Wall time of one training step under the linear cost model."""
    alpha = cost_model.per_token_compute_s
    beta = cost_model.per_token_comm_s
    total = cost_model.step_overhead_s
    for layer, tokens in sorted(layer_loads.items()):
        if strategy == "adaptive":
            max_node, cross = adaptive_layer_cost(plans[layer], tokens, utilized)
        else:
            max_node, cross = ep_group_layer_cost(tokens, utilized, ep_size)
        total += alpha * max_node + beta * cross
    return total


class _Run:
    """Mutable state for one simulation; see run_simulation."""

    def __init__(self, config: SimConfig):
        self.cfg = config
        self.cm = config.cluster.cost_model
        self.now = 0.0
        self.step = 0
        self.last_ckpt_step = 0
        self.max_credited_step = 0
        self.cum_samples = 0
        self.live: set[int] = set()
        self.report = SimReport()
        self.events = list(config.availability.events)
        self.ev_idx = 0
        self.join_deadline: float | None = None
        self.records_by_layer = {
            layer: config.load_trace.records_for_layer(layer)
            for layer in range(config.n_layers)
        }
        # adaptive state
        self.plans: dict[int, PlacementPlan] | None = None
        self.node_order: list[int] = []
        self.state_intact = True
        self.load_window: list[dict[int, tuple[int, ...]]] = []
        self.steps_since_rebalance = 0
        # baseline state
        self.utilized_ids: list[int] = []
        self._step_cache: dict = {}
        self.plan_version = 0

    # -- reporting helpers -------------------------------------------------

    def mark(self, kind: str, detail: str = "") -> None:
        # dead nodes never count as utilized, even before plans are rebuilt
        utilized = min(self.utilized_count(), len(self.live))
        self.report.events.append(SimEvent(round(self.now, 9), kind, detail))
        self.report.timeline.append(
            TimelinePoint(
                round(self.now, 9),
                len(self.live),
                utilized,
                0.0,
                self.cum_samples,
                kind,
            )
        )

    def spend(self, seconds: float, category: str) -> None:
        seconds = min(seconds, self.cfg.duration_s - self.now)
        if seconds > 0:
            self.now += seconds
            tot = self.report.totals
            tot[category] = tot.get(category, 0.0) + seconds

    # -- membership --------------------------------------------------------

    def utilized_count(self) -> int:
        if self.cfg.strategy == "adaptive":
            return len(self.node_order) if self.plans else 0
        return len(self.utilized_ids)

    def feasible(self) -> bool:
        return len(self.live) * self.cfg.cluster.slots_per_node >= self.cfg.n_experts

    def live_spec(self) -> ClusterSpec:
        n = len(self.live)
        return replace(
            self.cfg.cluster,
            n_nodes=n,
            fault_threshold=min(self.cfg.cluster.fault_threshold, n),
        )

    def window_loads(self, layer: int) -> tuple[int, ...]:
        """Mean of the trailing load window, defaulting to the first record."""
        if not self.load_window:
            return self.records_by_layer[layer][0].counts
        e = self.cfg.n_experts
        acc = [0] * e
        for snapshot in self.load_window:
            for i, v in enumerate(snapshot[layer]):
                acc[i] += v
        return tuple(v // len(self.load_window) for v in acc)

    def old_holdings(self) -> dict[int, set]:
        held: dict[int, set] = {n: set() for n in self.live}
        if self.plans:
            for layer, plan in self.plans.items():
                for col, node in enumerate(self.node_order):
                    if node in held:
                        for ex in plan.col_sets[col]:
                            held[node].add((layer, ex))
        return held

    def rebuild_adaptive_plans(self) -> None:
        """Allocate and place for the current live set, keeping node mapping
        stable where possible."""
        live_sorted = sorted(self.live)
        spec = self.live_spec()
        new_plans = {}
        new_cols: list[set] = [set() for _ in live_sorted]
        for layer in range(self.cfg.n_layers):
            alloc = allocate_replicas(self.window_loads(layer), spec)
            plan = build_mro_plan(alloc, spec, layer=layer)
            new_plans[layer] = plan
            for col in range(len(live_sorted)):
                for ex in plan.col_sets[col]:
                    new_cols[col].add((layer, ex))
        mapping = greedy_node_mapping(self.old_holdings(), new_cols, live_sorted)
        order = [0] * len(live_sorted)
        for node, col in mapping.assignment:
            order[col] = node
        self.plans = new_plans
        self.node_order = order
        self.plan_version += 1
        self._step_cache.clear()

    def surviving_cover_all(self) -> bool:
        """Do the live nodes still hold every expert of every layer?"""
        if not self.plans:
            return True
        for layer, plan in self.plans.items():
            covered: set[int] = set()
            for col, node in enumerate(self.node_order):
                if node in self.live:
                    covered |= plan.col_sets[col]
            if len(covered) < self.cfg.n_experts:
                return False
        return True

    def recompute_utilized(self) -> None:
        usable = self.cfg.ep_size * (len(self.live) // self.cfg.ep_size)
        self.utilized_ids = sorted(self.live)[:usable]
        self._step_cache.clear()

    def partitions_covered(self) -> bool:
        """static_ft: does every expert partition survive among the
        previously utilized nodes?"""
        ep = self.cfg.ep_size
        holders: dict[int, int] = {}
        for idx, node in enumerate(self.utilized_ids):
            if node in self.live:
                holders[idx % ep] = holders.get(idx % ep, 0) + 1
        return all(holders.get(p, 0) >= 1 for p in range(ep))


def _loads_for_step(run: _Run, step_index: int, utilized: int) -> dict[int, list[int]]:
    total_tokens = run.cfg.batch_tokens_per_node * utilized
    out = {}
    for layer in range(run.cfg.n_layers):
        recs = run.records_by_layer[layer]
        rec = recs[(step_index - 1) % len(recs)]
        out[layer] = _scale_loads(rec.counts, total_tokens)
    return out


def _raw_counts_for_step(run: _Run, step_index: int) -> dict[int, tuple[int, ...]]:
    out = {}
    for layer in range(run.cfg.n_layers):
        recs = run.records_by_layer[layer]
        out[layer] = recs[(step_index - 1) % len(recs)].counts
    return out


def _handle_remove(run: _Run, nodes: tuple[int, ...]) -> None:
    cfg = run.cfg
    run.live.difference_update(nodes)
    if not run.live:
        run.plans = None
        run.node_order = []
        run.utilized_ids = []
        run.mark("failure", f"nodes={list(nodes)}")
        run.report.halted = "no_live_nodes"
        return
    if cfg.strategy == "adaptive":
        run.mark("failure", f"nodes={list(nodes)}")
        touched = run.plans is not None and any(n in run.node_order for n in nodes)
        if not touched:
            return
        run.state_intact = run.surviving_cover_all()
        if run.state_intact:
            if run.feasible():
                run.spend(run.cm.reconfig_s, CAT_RECONFIG)
                run.rebuild_adaptive_plans()
                run.mark("reconfig", "recovered without restart")
            else:
                run.plans = None
                run.node_order = []
                run.mark("infeasible", "waiting for nodes")
        else:
            if not cfg.adaptive_checkpointing:
                run.report.halted = "unrecoverable"
                run.mark("error", "unrecoverable and checkpointing disabled")
                return
            run.spend(run.cm.restart_s, CAT_RESTART)
            run.step = run.last_ckpt_step
            run.state_intact = True
            if run.feasible():
                run.rebuild_adaptive_plans()
                run.mark("restart", f"resumed from step {run.last_ckpt_step}")
            else:
                run.plans = None
                run.node_order = []
                run.mark("restart", "restarted; waiting for nodes")
    elif cfg.strategy == "static":
        lost_utilized = any(n in run.utilized_ids for n in nodes)
        run.recompute_utilized()
        run.mark("failure", f"nodes={list(nodes)}")
        if lost_utilized:
            run.spend(run.cm.restart_s, CAT_RESTART)
            run.step = run.last_ckpt_step
            run.mark("restart", f"resumed from step {run.last_ckpt_step}")
    else:  # static_ft
        lost_utilized = any(n in run.utilized_ids for n in nodes)
        covered = run.partitions_covered()
        run.recompute_utilized()
        run.mark("failure", f"nodes={list(nodes)}")
        if lost_utilized:
            if covered:
                run.spend(run.cm.reconfig_s, CAT_RECONFIG)
                run.mark("reconfig", "EP groups reassigned")
            else:
                run.spend(run.cm.restart_s, CAT_RESTART)
                run.step = run.last_ckpt_step
                run.mark("restart", f"resumed from step {run.last_ckpt_step}")


def _handle_scale_up(run: _Run) -> None:
    cfg = run.cfg
    run.join_deadline = None
    was_training = run.utilized_count() > 0
    if cfg.strategy == "adaptive":
        if run.feasible():
            if was_training:
                run.spend(run.cm.reconfig_s, CAT_RECONFIG)
            run.rebuild_adaptive_plans()
            run.mark("scale_up", f"now using {len(run.node_order)} nodes")
    else:
        if was_training:
            if cfg.strategy == "static":
                run.spend(run.cm.checkpoint_save_s, CAT_CHECKPOINT)
                run.last_ckpt_step = run.step
                run.spend(run.cm.restart_s, CAT_RESTART)
            else:
                run.spend(run.cm.reconfig_s, CAT_RECONFIG)
        run.recompute_utilized()
        run.mark("scale_up", f"now using {len(run.utilized_ids)} nodes")


def _apply_due_events(run: _Run) -> None:
    while True:
        if run.ev_idx < len(run.events) and run.events[run.ev_idx].time_s <= run.now:
            ev = run.events[run.ev_idx]
            run.ev_idx += 1
            if ev.kind == EVENT_ADD:
                run.live.update(ev.nodes)
                run.mark("join", f"nodes={list(ev.nodes)}")
                if run.now == 0.0 and run.step == 0 and run.utilized_count() == 0:
                    # initial cluster formation happens immediately
                    continue
                if run.join_deadline is None:
                    run.join_deadline = ev.time_s + run.cm.join_accumulation_s
            else:
                _handle_remove(run, ev.nodes)
                if run.report.halted:
                    return
            continue
        if run.join_deadline is not None and run.join_deadline <= run.now:
            _handle_scale_up(run)
            continue
        break


def _next_failure_time(run: _Run) -> float | None:
    for idx in range(run.ev_idx, len(run.events)):
        if run.events[idx].kind != EVENT_ADD:
            return run.events[idx].time_s
    return None


def _next_wakeup(run: _Run) -> float | None:
    """Earliest future moment that can change trainability."""
    times = []
    if run.ev_idx < len(run.events):
        times.append(run.events[run.ev_idx].time_s)
    if run.join_deadline is not None:
        times.append(run.join_deadline)
    return min(times) if times else None


def run_simulation(config: SimConfig) -> SimReport:
    """Drive the event loop until ``duration_s`` or an unrecoverable halt.

    A failure event aborts the step in flight (its work is lost); join events
    are buffered for ``join_accumulation_s`` before a scale-up.  Completed
    steps are credited once per step index, so work replayed after a restart
    does not double-count.
    """
    run = _Run(config)
    cfg = config
    cm = run.cm
    uses_ckpt = cfg.strategy != "adaptive" or cfg.adaptive_checkpointing

    while run.now < cfg.duration_s and not run.report.halted:
        _apply_due_events(run)
        if run.report.halted:
            break

        # (re)establish plans or EP groups when trainable
        if cfg.strategy == "adaptive":
            if run.plans is None and run.feasible():
                run.rebuild_adaptive_plans()
                run.mark("bootstrap", f"training on {len(run.node_order)} nodes")
        else:
            if not run.utilized_ids and run.live:
                run.recompute_utilized()
                if run.utilized_ids:
                    run.mark("bootstrap", f"training on {len(run.utilized_ids)} nodes")

        utilized = run.utilized_count()
        if utilized == 0:
            nxt = _next_wakeup(run)
            if nxt is None or nxt >= cfg.duration_s:
                run.spend(cfg.duration_s - run.now, CAT_IDLE)
                break
            run.spend(nxt - run.now, CAT_IDLE)
            continue

        step_index = run.step + 1
        loads = _loads_for_step(run, step_index, utilized)
        cache_key = (
            run.plan_version,
            utilized,
            tuple((layer, tuple(v)) for layer, v in sorted(loads.items())),
        )
        if cache_key in run._step_cache:
            dt = run._step_cache[cache_key]
        else:
            dt = step_time_model(
                cfg.strategy,
                run.plans,
                loads,
                cm,
                utilized,
                ep_size=cfg.ep_size,
            )
            run._step_cache[cache_key] = dt

        interrupt = _next_failure_time(run)
        if interrupt is not None and run.now + dt > interrupt:
            run.spend(interrupt - run.now, CAT_LOST_STEP)
            continue
        if run.now + dt > cfg.duration_s:
            run.spend(cfg.duration_s - run.now, CAT_COMPUTE)
            break

        run.spend(dt, CAT_COMPUTE)
        run.step = step_index
        tokens = cfg.batch_tokens_per_node * utilized
        if step_index > run.max_credited_step:
            run.cum_samples += tokens
            run.max_credited_step = step_index
        run.report.steps_completed += 1
        run.report.timeline.append(
            TimelinePoint(
                round(run.now, 9),
                len(run.live),
                utilized,
                tokens / dt,
                run.cum_samples,
                "",
            )
        )
        run.load_window.append(_raw_counts_for_step(run, step_index))
        if len(run.load_window) > cm.rebalance_interval_steps:
            run.load_window.pop(0)

        if uses_ckpt and run.step % cm.checkpoint_interval_steps == 0:
            run.spend(cm.checkpoint_save_s, CAT_CHECKPOINT)
            run.last_ckpt_step = run.step
            run.mark("checkpoint", f"step {run.step}")

        if cfg.strategy == "adaptive":
            run.steps_since_rebalance += 1
            if run.steps_since_rebalance >= cm.rebalance_interval_steps:
                run.steps_since_rebalance = 0
                old_plans = run.plans
                old_order = run.node_order
                run.rebuild_adaptive_plans()
                if run.plans == old_plans and run.node_order == old_order:
                    run.mark("rebalance", "allocation unchanged")
                else:
                    run.spend(cm.reconfig_s, CAT_REBALANCE)
                    run.mark("rebalance", "allocation updated")

    run.report.cum_samples = run.cum_samples
    return run.report

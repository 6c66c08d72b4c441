"""Cluster controller: membership, failure detection, planning and plan push.

The controller owns a single event loop; every mutation of the cluster view
happens on it, so no locks are needed.  Liveness is a pure function of
heartbeat timestamps (plus explicit deregistration): a dropped TCP connection
alone does not mark a node dead, the missing heartbeats do.

On membership change (or on demand) the controller recomputes, per layer, a
replica allocation and a grouped placement for the live nodes, maps physical
nodes onto plan columns to minimise state movement, schedules transfers from
surviving owners, and pushes per-node instructions.  Agents confirm
application through their heartbeats; when an expert has no surviving owner
the controller emits a ``checkpoint_fallback`` event instead of pushing an
impossible plan.
"""

from __future__ import annotations

import asyncio
import time
from dataclasses import dataclass, field, replace

from ..allocation import allocate_replicas
from ..core import ClusterSpec
from ..migration import (
    NoSurvivingOwnerError,
    greedy_node_mapping,
    plan_state_transfers,
)
from ..placement import PlacementPlan, build_mro_plan
from .messages import (
    CONTROLLER_SENDER,
    ConnectionClosed,
    KIND_HEARTBEAT,
    KIND_LOAD_REPORT,
    KIND_PLAN_PUSH,
    KIND_REGISTER,
    KIND_SHUTDOWN,
    Message,
    MessageError,
    read_message,
    send_message,
)

STATUS_LIVE = "live"
STATUS_SUSPECT = "suspect"
STATUS_DEAD = "dead"


@dataclass
class NodeState:
    node_id: int
    fetch_host: str
    fetch_port: int
    last_heartbeat: float
    status: str = STATUS_LIVE
    applied_version: int = 0
    held: dict = field(default_factory=dict)  # layer -> tuple(expert ids)
    fetch_failures: int = 0
    checksum_failures: int = 0
    last_apply: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ClusterView:
    """Immutable snapshot used by the pure failure detector.

    Plans for all layers are pushed atomically, so every layer shares one
    version; ``plan_versions`` still reports them individually."""

    nodes: dict
    plan_version: int
    plan_versions: dict = field(default_factory=dict)  # layer -> version
    pending_joins: tuple = ()  # (node_id, arrival time) pairs


def detect_failures(view: ClusterView, now: float, timeout_s: float) -> frozenset[int]:
    """Nodes whose heartbeat age exceeds ``timeout_s`` (pure function)."""
    return frozenset(
        node_id
        for node_id, st in view.nodes.items()
        if st.status != STATUS_DEAD and now - st.last_heartbeat > timeout_s
    )


def classify_status(age: float, period: float, timeout_s: float) -> str:
    if age > timeout_s:
        return STATUS_DEAD
    if age > 1.5 * period:
        return STATUS_SUSPECT
    return STATUS_LIVE


@dataclass(frozen=True)
class ControllerEvent:
    time_s: float
    kind: str
    detail: dict


class Controller:
    def __init__(
        self,
        *,
        n_layers: int,
        n_experts: int,
        slots_per_node: int,
        fault_threshold: int = 2,
        host: str = "127.0.0.1",
        port: int = 0,
        heartbeat_period: float = 1.0,
        timeout_multiplier: float = 2.5,
        expect_nodes: int | None = None,
        blob_size: int = 4096,
        rebalance_interval_s: float | None = None,
        join_accumulation_s: float = 0.0,
    ):
        self.n_layers = n_layers
        self.n_experts = n_experts
        self.slots_per_node = slots_per_node
        self.fault_threshold = fault_threshold
        self.host = host
        self._requested_port = port
        self.heartbeat_period = heartbeat_period
        self.timeout_s = heartbeat_period * timeout_multiplier
        self.expect_nodes = expect_nodes
        self.blob_size = blob_size
        self.rebalance_interval_s = rebalance_interval_s
        self.join_accumulation_s = join_accumulation_s

        self._nodes: dict[int, NodeState] = {}
        self._writers: dict[int, asyncio.StreamWriter] = {}
        self._plans: dict[int, PlacementPlan] = {}
        self._node_order: list[int] = []
        self._plan_version = 0
        self._loads: dict[int, dict[int, tuple[int, ...]]] = {}
        self._events: list[ControllerEvent] = []
        self._event_signal: asyncio.Condition | None = None
        self._pending_joins: list[tuple[int, float]] = []
        self._fallback = False

    # -- lifecycle ----------------------------------------------------------

    async def start(self) -> None:
        self._event_signal = asyncio.Condition()
        self._server = await asyncio.start_server(
            self._handle_conn, self.host, self._requested_port
        )
        self.port = self._server.sockets[0].getsockname()[1]
        self._monitor_task = asyncio.create_task(self._monitor_loop())
        self._last_rebalance = time.monotonic()

    async def stop(self) -> None:
        self._monitor_task.cancel()
        for writer in self._writers.values():
            try:
                await send_message(
                    writer, Message(KIND_SHUTDOWN, CONTROLLER_SENDER, {})
                )
            except (ConnectionError, OSError):
                pass
            writer.close()
        self._server.close()
        await self._server.wait_closed()

    # -- introspection -------------------------------------------------------

    @property
    def plan_version(self) -> int:
        return self._plan_version

    @property
    def plans(self) -> dict[int, PlacementPlan]:
        return dict(self._plans)

    @property
    def node_order(self) -> list[int]:
        return list(self._node_order)

    @property
    def events(self) -> list[ControllerEvent]:
        return list(self._events)

    def view(self) -> ClusterView:
        return ClusterView(
            nodes=dict(self._nodes),
            plan_version=self._plan_version,
            plan_versions={layer: self._plan_version for layer in self._plans},
            pending_joins=tuple(self._pending_joins),
        )

    def live_nodes(self) -> list[int]:
        return sorted(
            nid for nid, st in self._nodes.items() if st.status != STATUS_DEAD
        )

    def column_of(self, node_id: int) -> dict[int, tuple[int, ...]]:
        """Expert ids the current plans assign to ``node_id``, per layer."""
        if node_id not in self._node_order:
            return {}
        col = self._node_order.index(node_id)
        return {
            layer: tuple(sorted(plan.col_sets[col]))
            for layer, plan in self._plans.items()
        }

    async def wait_for_event(self, kind: str, timeout: float, since: int = 0) -> int:
        """Block until an event of ``kind`` exists at index >= since; returns
        the index after the match (for chaining)."""
        deadline = time.monotonic() + timeout
        async with self._event_signal:
            while True:
                for idx in range(since, len(self._events)):
                    if self._events[idx].kind == kind:
                        return idx + 1
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise asyncio.TimeoutError(
                        f"no {kind!r} event within {timeout}s"
                    )
                try:
                    await asyncio.wait_for(
                        self._event_signal.wait(), timeout=remaining
                    )
                except asyncio.TimeoutError:
                    pass

    async def _emit(self, kind: str, detail: dict) -> None:
        self._events.append(ControllerEvent(time.monotonic(), kind, detail))
        async with self._event_signal:
            self._event_signal.notify_all()

    # -- connection handling --------------------------------------------------

    async def _handle_conn(self, reader, writer) -> None:
        node_id = None
        try:
            msg = await read_message(reader)
        except (ConnectionClosed, MessageError):
            writer.close()
            return
        if msg.kind != KIND_REGISTER:
            writer.close()
            return
        node_id = msg.sender
        now = time.monotonic()
        self._nodes[node_id] = NodeState(
            node_id=node_id,
            fetch_host=msg.payload.get("fetch_host", "127.0.0.1"),
            fetch_port=int(msg.payload.get("fetch_port", 0)),
            last_heartbeat=now,
        )
        self._writers[node_id] = writer
        await self._emit("registered", {"node": node_id})
        if self._plan_version > 0:
            self._pending_join_since = (
                now if self._pending_join_since is None else self._pending_join_since
            )
        try:
            while True:
                msg = await read_message(reader)
                st = self._nodes.get(msg.sender)
                if st is None:
                    continue
                if msg.kind == KIND_HEARTBEAT:
                    st.last_heartbeat = time.monotonic()
                    if st.status != STATUS_DEAD:
                        st.status = STATUS_LIVE
                    st.applied_version = int(msg.payload.get("applied_version", 0))
                    held = msg.payload.get("held", {})
                    st.held = {
                        int(layer): tuple(experts) for layer, experts in held.items()
                    }
                    st.fetch_failures = int(msg.payload.get("fetch_failures", 0))
                    st.checksum_failures = int(
                        msg.payload.get("checksum_failures", 0)
                    )
                    st.last_apply = dict(msg.payload.get("last_apply", {}))
                elif msg.kind == KIND_LOAD_REPORT:
                    per_layer = {
                        int(layer): tuple(counts)
                        for layer, counts in msg.payload.get("layers", {}).items()
                    }
                    self._loads[msg.sender] = per_layer
                elif msg.kind == KIND_SHUTDOWN:
                    st.status = STATUS_DEAD
                    await self._emit("deregistered", {"node": msg.sender})
                    return
        except (ConnectionClosed, MessageError):
            pass
        finally:
            writer.close()
            self._writers.pop(node_id, None)

    # -- monitoring -----------------------------------------------------------

    async def _monitor_loop(self) -> None:
        while True:
            await asyncio.sleep(self.heartbeat_period / 2)
            now = time.monotonic()
            view = self.view()
            dead = detect_failures(view, now, self.timeout_s)
            for node_id in dead:
                self._nodes[node_id].status = STATUS_DEAD
            for node_id, st in self._nodes.items():
                if st.status != STATUS_DEAD:
                    st.status = classify_status(
                        now - st.last_heartbeat, self.heartbeat_period, self.timeout_s
                    )
            if dead:
                await self._emit("failure_detected", {"nodes": sorted(dead)})
                await self.reconfigure("failure")
                continue
            if self._plan_version == 0:
                if self.expect_nodes is not None and (
                    len(self.live_nodes()) >= self.expect_nodes
                ):
                    await self.reconfigure("bootstrap")
                continue
            if (
                self._pending_join_since is not None
                and now - self._pending_join_since >= self.join_accumulation_s
            ):
                self._pending_join_since = None
                await self.reconfigure("scale_up")
                continue
            if (
                self.rebalance_interval_s is not None
                and now - self._last_rebalance >= self.rebalance_interval_s
            ):
                self._last_rebalance = now
                await self.reconfigure("rebalance")
                continue
            if self._plan_version > 0 and self._all_applied():
                if not any(
                    e.kind == "plans_applied"
                    and e.detail.get("version") == self._plan_version
                    for e in self._events
                ):
                    await self._emit(
                        "plans_applied", self._apply_report()
                    )

    def _all_applied(self) -> bool:
        live = self.live_nodes()
        return bool(live) and all(
            self._nodes[nid].applied_version == self._plan_version for nid in live
        )

    def _apply_report(self) -> dict:
        live = self.live_nodes()
        return {
            "version": self._plan_version,
            "nodes": {
                nid: {
                    "fetched": self._nodes[nid].last_apply.get("fetched", 0),
                    "created": self._nodes[nid].last_apply.get("created", 0),
                    "bytes_fetched": self._nodes[nid].last_apply.get(
                        "bytes_fetched", 0
                    ),
                    "seconds": self._nodes[nid].last_apply.get("seconds", 0.0),
                    "fetch_failures": self._nodes[nid].fetch_failures,
                    "checksum_failures": self._nodes[nid].checksum_failures,
                }
                for nid in live
            },
        }

    # -- planning ---------------------------------------------------------------

    def _layer_loads(self, layer: int) -> list[int]:
        totals = [0] * self.n_experts
        seen = False
        for per_layer in self._loads.values():
            counts = per_layer.get(layer)
            if counts and len(counts) == self.n_experts:
                seen = True
                for e, v in enumerate(counts):
                    totals[e] += v
        if not seen:
            return [1] * self.n_experts
        return totals

    def _surviving_owners(self) -> dict[tuple[int, int], list[int]]:
        owners: dict[tuple[int, int], list[int]] = {}
        for nid in self.live_nodes():
            for layer, experts in self._nodes[nid].held.items():
                for expert in experts:
                    owners.setdefault((layer, expert), []).append(nid)
        return owners

    async def reconfigure(self, reason: str) -> bool:
        """Recompute plans for the live nodes and push them; returns False and
        emits ``checkpoint_fallback`` when an expert has no surviving owner."""
        live = self.live_nodes()
        if not live:
            await self._emit("checkpoint_fallback", {"reason": "no live nodes"})
            self._fallback = True
            return False
        if len(live) * self.slots_per_node < self.n_experts:
            await self._emit(
                "checkpoint_fallback",
                {"reason": f"{len(live)} nodes cannot host {self.n_experts} experts"},
            )
            self._fallback = True
            return False
        bootstrap = self._plan_version == 0
        spec = ClusterSpec(
            n_nodes=len(live),
            slots_per_node=self.slots_per_node,
            fault_threshold=min(self.fault_threshold, len(live)),
        )
        new_plans: dict[int, PlacementPlan] = {}
        new_cols: list[set] = [set() for _ in live]
        for layer in range(self.n_layers):
            alloc = allocate_replicas(self._layer_loads(layer), spec)
            plan = build_mro_plan(alloc, spec, layer=layer)
            new_plans[layer] = plan
            for col in range(len(live)):
                for expert in plan.col_sets[col]:
                    new_cols[col].add((layer, expert))
        holdings = {
            nid: {
                (layer, expert)
                for layer, experts in self._nodes[nid].held.items()
                for expert in experts
            }
            for nid in live
        }
        mapping = greedy_node_mapping(holdings, new_cols, live)
        owners = self._surviving_owners()
        if not bootstrap:
            try:
                schedule = plan_state_transfers(
                    mapping, owners, state_size=self.blob_size
                )
            except NoSurvivingOwnerError as exc:
                await self._emit("checkpoint_fallback", {"reason": str(exc)})
                self._fallback = True
                return False
        else:
            schedule = None

        self._plan_version += 1
        version = self._plan_version
        self._plans = new_plans
        order = [0] * len(live)
        for node, col in mapping.assignment:
            order[col] = node
        self._node_order = order

        by_dest: dict[int, list] = {nid: [] for nid in live}
        if schedule is not None:
            for t in schedule.transfers:
                layer, expert = t.item
                src = self._nodes[t.source]
                by_dest[t.dest].append(
                    {
                        "layer": layer,
                        "expert": expert,
                        "version": version,
                        "size": self.blob_size,
                        "sources": [
                            {
                                "node": o,
                                "host": self._nodes[o].fetch_host,
                                "port": self._nodes[o].fetch_port,
                            }
                            for o in sorted(
                                owners.get((layer, expert), ()),
                                key=lambda o: (o != t.source, o),
                            )
                        ],
                    }
                )
        for node, col in mapping.assignment:
            payload = {
                "version": version,
                "columns": {
                    str(layer): sorted(plan.col_sets[col])
                    for layer, plan in new_plans.items()
                },
                "fetch": by_dest[node] if not bootstrap else [],
                "create": (
                    [
                        {
                            "layer": layer,
                            "expert": expert,
                            "version": version,
                            "size": self.blob_size,
                        }
                        for layer, plan in new_plans.items()
                        for expert in sorted(plan.col_sets[col])
                    ]
                    if bootstrap
                    else []
                ),
            }
            writer = self._writers.get(node)
            if writer is not None:
                try:
                    await send_message(
                        writer, Message(KIND_PLAN_PUSH, CONTROLLER_SENDER, payload)
                    )
                except (ConnectionError, OSError):
                    pass
        await self._emit(
            "plans_pushed",
            {"version": version, "reason": reason, "nodes": live},
        )
        return True

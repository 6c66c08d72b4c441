import asyncio
import base64

import pytest

from flexep.control_plane.agent import Agent, ApplyStats
from flexep.control_plane.controller import (
    ClusterView,
    Controller,
    NodeState,
    classify_status,
    detect_failures,
)
from flexep.control_plane.messages import (
    KIND_FETCH_REPLY,
    KIND_FETCH_REQUEST,
    Message,
    MessageError,
    blob_checksum,
    decode_frame,
    encode_message,
    make_blob,
    read_message,
    send_message,
)


def test_message_round_trip():
    msg = Message("heartbeat", 3, {"applied_version": 2, "held": {"0": [1, 2]}})
    frame = encode_message(msg)
    assert decode_frame(frame[4:]) == msg


def test_message_rejects_garbage():
    with pytest.raises(MessageError):
        decode_frame(b"not json")
    with pytest.raises(MessageError):
        decode_frame(b'{"v": 9, "kind": "heartbeat", "sender": 1, "payload": {}}')
    with pytest.raises(MessageError):
        decode_frame(b'{"v": 1, "kind": "dance", "sender": 1, "payload": {}}')
    with pytest.raises(MessageError):
        encode_message(Message("dance", 0, {}))


def test_blob_determinism_and_verify():
    a = make_blob(1, 4, 7, 512)
    b = make_blob(1, 4, 7, 512)
    assert a == b
    assert a.verify()
    assert len(a.data) == 512
    tampered = make_blob(1, 4, 7, 512)
    assert blob_checksum(b"x" + tampered.data[1:]) != tampered.checksum


def _view(hb_ages, now=100.0):
    nodes = {
        nid: NodeState(
            node_id=nid, fetch_host="h", fetch_port=1, last_heartbeat=now - age
        )
        for nid, age in hb_ages.items()
    }
    return ClusterView(nodes=nodes, plan_version=1), now


def test_detect_failures_fresh_heartbeats():
    view, now = _view({0: 0.1, 1: 0.2})
    assert detect_failures(view, now, timeout_s=2.5) == frozenset()


def test_detect_failures_silent_node():
    view, now = _view({0: 0.1, 1: 3.0})
    assert detect_failures(view, now, timeout_s=2.5) == frozenset({1})


def test_detect_failures_empty_view():
    view = ClusterView(nodes={}, plan_version=0)
    assert detect_failures(view, 5.0, 2.5) == frozenset()


def test_classify_status():
    assert classify_status(0.1, period=1.0, timeout_s=2.5) == "live"
    assert classify_status(1.8, period=1.0, timeout_s=2.5) == "suspect"
    assert classify_status(3.0, period=1.0, timeout_s=2.5) == "dead"


# -- integration helpers ------------------------------------------------------


async def _spawn_cluster(n_agents, *, n_layers=2, n_experts=4, slots=2, f=2,
                         period=0.1, blob_size=1024):
    controller = Controller(
        n_layers=n_layers,
        n_experts=n_experts,
        slots_per_node=slots,
        fault_threshold=f,
        heartbeat_period=period,
        timeout_multiplier=2.5,
        expect_nodes=n_agents,
        blob_size=blob_size,
    )
    await controller.start()
    agents = []
    for i in range(n_agents):
        agent = Agent(
            node_id=i,
            controller_host="127.0.0.1",
            controller_port=controller.port,
            heartbeat_period=period,
            blob_size=blob_size,
        )
        await agent.start()
        agents.append(agent)
    return controller, agents


async def _stop_all(controller, agents):
    for a in agents:
        try:
            await a.stop()
        except Exception:
            pass
    await controller.stop()


def test_bootstrap_and_apply():
    async def scenario():
        controller, agents = await _spawn_cluster(3)
        try:
            await controller.wait_for_event("plans_applied", timeout=10.0)
            assert controller.plan_version == 1
            for agent in agents:
                cols = controller.column_of(agent.node_id)
                assert cols  # every node got a column
                held = agent.held()
                assert {
                    layer: tuple(v) for layer, v in held.items()
                } == cols
                for layer, experts in cols.items():
                    for e in experts:
                        blob = agent.blob(layer, e)
                        assert blob is not None and blob.verify()
        finally:
            await _stop_all(controller, agents)

    asyncio.run(scenario())


def test_failure_recovery_and_transfers():
    async def scenario():
        controller, agents = await _spawn_cluster(5)
        try:
            idx = await controller.wait_for_event("plans_applied", timeout=10.0)
            victim = agents[2]
            await victim.stop()
            await controller.wait_for_event("failure_detected", timeout=10.0)
            idx = await controller.wait_for_event("plans_applied", timeout=10.0, since=idx)
            assert controller.plan_version == 2
            assert 2 not in controller.live_nodes()
            report = next(
                e for e in controller.events
                if e.kind == "plans_applied" and e.detail["version"] == 2
            )
            for nid, stats in report.detail["nodes"].items():
                assert stats["fetch_failures"] == 0
                assert stats["checksum_failures"] == 0
            for agent in agents:
                if agent is victim:
                    continue
                cols = controller.column_of(agent.node_id)
                held = {layer: tuple(v) for layer, v in agent.held().items()}
                assert held == cols
        finally:
            await _stop_all(controller, agents)

    asyncio.run(scenario())


def test_orphaned_expert_triggers_fallback():
    async def scenario():
        controller, agents = await _spawn_cluster(5)
        try:
            await controller.wait_for_event("plans_applied", timeout=10.0)
            # find an expert with a minimal owner set and kill every owner
            owners = {}
            for agent in agents:
                for layer, experts in agent.held().items():
                    for e in experts:
                        owners.setdefault((layer, e), set()).add(agent.node_id)
            victim_item = min(owners, key=lambda k: len(owners[k]))
            doomed = owners[victim_item]
            assert len(doomed) < len(agents)
            for agent in agents:
                if agent.node_id in doomed:
                    await agent.stop()
            await controller.wait_for_event("checkpoint_fallback", timeout=10.0)
        finally:
            await _stop_all(controller, agents)

    asyncio.run(scenario())


class _FetchServer:
    """Standalone blob server; optionally corrupts the first N replies."""

    def __init__(self, blob, corrupt_first=0):
        self.blob = blob
        self.corrupt_left = corrupt_first
        self.requests = 0

    async def start(self):
        self.server = await asyncio.start_server(self._serve, "127.0.0.1", 0)
        self.port = self.server.sockets[0].getsockname()[1]

    async def stop(self):
        self.server.close()
        await self.server.wait_closed()

    async def _serve(self, reader, writer):
        try:
            msg = await read_message(reader)
            if msg.kind != KIND_FETCH_REQUEST:
                return
            self.requests += 1
            data = self.blob.data
            if self.corrupt_left > 0:
                self.corrupt_left -= 1
                data = b"\x00" * len(data)
            payload = {
                "layer": self.blob.layer,
                "expert": self.blob.expert,
                "version": self.blob.version,
                "checksum": self.blob.checksum,
                "data": base64.b64encode(data).decode(),
            }
            await send_message(writer, Message(KIND_FETCH_REPLY, 99, payload))
        finally:
            writer.close()


def _bare_agent():
    agent = Agent(node_id=7, controller_host="", controller_port=0)
    agent._apply_lock = asyncio.Lock()
    return agent


def test_fetch_retries_against_second_owner():
    async def scenario():
        blob = make_blob(0, 3, 1, 256)
        good = _FetchServer(blob)
        await good.start()
        # a dead source first in the list: connection refused, then retry
        dead_port = good.port
        await good.stop()
        good2 = _FetchServer(blob)
        await good2.start()
        agent = _bare_agent()
        stats = ApplyStats()
        await agent._fetch_item(
            {
                "layer": 0,
                "expert": 3,
                "sources": [
                    {"node": 1, "host": "127.0.0.1", "port": dead_port},
                    {"node": 2, "host": "127.0.0.1", "port": good2.port},
                ],
            },
            stats,
        )
        await good2.stop()
        assert stats.fetched == 1
        assert stats.fetch_failures == 0
        assert agent.blob(0, 3) == blob

    asyncio.run(scenario())


def test_corrupt_transfer_retried_never_applied():
    async def scenario():
        blob = make_blob(1, 2, 5, 128)
        server = _FetchServer(blob, corrupt_first=1)
        await server.start()
        agent = _bare_agent()
        stats = ApplyStats()
        await agent._fetch_item(
            {
                "layer": 1,
                "expert": 2,
                "sources": [{"node": 1, "host": "127.0.0.1", "port": server.port}],
            },
            stats,
        )
        await server.stop()
        assert stats.checksum_failures == 1
        assert stats.fetched == 1
        got = agent.blob(1, 2)
        assert got is not None and got.verify() and got.data == blob.data

    asyncio.run(scenario())


def test_version_monotone_on_agent():
    async def scenario():
        agent = _bare_agent()
        newer = make_blob(0, 0, 5, 64)
        older = make_blob(0, 0, 3, 64)
        agent._put((0, 0), newer)
        agent._put((0, 0), older)
        assert agent.blob(0, 0).version == 5

    asyncio.run(scenario())

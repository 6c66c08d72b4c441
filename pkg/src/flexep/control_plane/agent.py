"""Node agent: heartbeats, plan application and peer-to-peer state serving.

An agent registers with the controller, heartbeats on a fixed period, and
applies pushed plans by creating or fetching the expert-state blobs its
column requires.  It also runs a small TCP server so peers can fetch blobs it
owns.  All state lives on the event loop; blob inserts are whole-object
replacements, so a concurrent fetch never sees a partially written state.
"""

from __future__ import annotations

import asyncio
import base64
import time
from dataclasses import dataclass, field

from .messages import (
    CONTROLLER_SENDER,
    ConnectionClosed,
    ExpertStateBlob,
    KIND_FETCH_REPLY,
    KIND_FETCH_REQUEST,
    KIND_HEARTBEAT,
    KIND_PLAN_PUSH,
    KIND_REGISTER,
    KIND_SHUTDOWN,
    Message,
    MessageError,
    blob_checksum,
    make_blob,
    read_message,
    send_message,
)

FETCH_ROUNDS = 2


@dataclass
class ApplyStats:
    version: int = 0
    fetched: int = 0
    created: int = 0
    bytes_fetched: int = 0
    seconds: float = 0.0
    checksum_failures: int = 0
    fetch_failures: int = 0


@dataclass
class Agent:
    node_id: int
    controller_host: str
    controller_port: int
    heartbeat_period: float = 1.0
    blob_size: int = 4096
    listen_host: str = "127.0.0.1"
    listen_port: int = 0

    _store: dict = field(default_factory=dict)  # (layer, expert) -> ExpertStateBlob
    _columns: dict = field(default_factory=dict)  # layer -> tuple(expert ids)
    _applied_version: int = 0
    _stats: ApplyStats = field(default_factory=ApplyStats)

    async def start(self) -> None:
        self._stopped = asyncio.Event()
        self._apply_lock = asyncio.Lock()
        self._server = await asyncio.start_server(
            self._serve_fetch, self.listen_host, self.listen_port
        )
        self.fetch_port = self._server.sockets[0].getsockname()[1]
        self._reader, self._writer = await asyncio.open_connection(
            self.controller_host, self.controller_port
        )
        await send_message(
            self._writer,
            Message(
                KIND_REGISTER,
                self.node_id,
                {"fetch_host": self.listen_host, "fetch_port": self.fetch_port},
            ),
        )
        self._tasks = [
            asyncio.create_task(self._heartbeat_loop()),
            asyncio.create_task(self._control_loop()),
        ]

    async def stop(self) -> None:
        self._stopped.set()
        for t in getattr(self, "_tasks", []):
            t.cancel()
        self._server.close()
        await self._server.wait_closed()
        self._writer.close()

    async def run_until_stopped(self) -> None:
        await self._stopped.wait()
        await self.stop()

    @property
    def applied_version(self) -> int:
        return self._applied_version

    def held(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for (layer, expert) in sorted(self._store):
            out.setdefault(layer, []).append(expert)
        return out

    def blob(self, layer: int, expert: int) -> ExpertStateBlob | None:
        return self._store.get((layer, expert))

    # -- controller-facing -------------------------------------------------

    async def _heartbeat_loop(self) -> None:
        while not self._stopped.is_set():
            payload = {
                "applied_version": self._applied_version,
                "held": {str(layer): experts for layer, experts in self.held().items()},
                "fetch_failures": self._stats.fetch_failures,
                "checksum_failures": self._stats.checksum_failures,
                "last_apply": {
                    "version": self._stats.version,
                    "fetched": self._stats.fetched,
                    "created": self._stats.created,
                    "bytes_fetched": self._stats.bytes_fetched,
                    "seconds": self._stats.seconds,
                },
            }
            try:
                await send_message(
                    self._writer, Message(KIND_HEARTBEAT, self.node_id, payload)
                )
            except (ConnectionError, OSError):
                self._stopped.set()
                return
            await asyncio.sleep(self.heartbeat_period)

    async def _control_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                msg = await read_message(self._reader)
            except (ConnectionClosed, MessageError):
                self._stopped.set()
                return
            if msg.kind == KIND_PLAN_PUSH:
                asyncio.create_task(self._apply_plan(msg.payload))
            elif msg.kind == KIND_SHUTDOWN:
                self._stopped.set()
                return

    async def _apply_plan(self, payload: dict) -> None:
        async with self._apply_lock:
            version = int(payload["version"])
            if version <= self._applied_version:
                return  # never apply an older plan
            began = time.monotonic()
            stats = ApplyStats(version=version)
            columns = {
                int(layer): tuple(experts)
                for layer, experts in payload["columns"].items()
            }
            for item in payload.get("create", ()):
                key = (item["layer"], item["expert"])
                blob = make_blob(
                    item["layer"], item["expert"], item["version"], item["size"]
                )
                self._put(key, blob)
                stats.created += 1
            fetches = [
                self._fetch_item(item, stats) for item in payload.get("fetch", ())
            ]
            if fetches:
                await asyncio.gather(*fetches)
            keep = {
                (layer, expert)
                for layer, experts in columns.items()
                for expert in experts
            }
            for key in list(self._store):
                if key not in keep:
                    del self._store[key]
            self._columns = columns
            stats.seconds = time.monotonic() - began
            carry = self._stats
            stats.fetch_failures += carry.fetch_failures
            stats.checksum_failures += carry.checksum_failures
            self._stats = stats
            self._applied_version = version

    def _put(self, key: tuple[int, int], blob: ExpertStateBlob) -> None:
        old = self._store.get(key)
        if old is not None and old.version > blob.version:
            return  # version is monotone per (layer, expert)
        self._store[key] = blob

    async def _fetch_item(self, item: dict, stats: ApplyStats) -> None:
        """Fetch one blob, trying every listed source up to FETCH_ROUNDS times.

        A checksum mismatch counts as a failed attempt and is never applied."""
        key = (item["layer"], item["expert"])
        sources = item.get("sources", ())
        for _ in range(FETCH_ROUNDS):
            for src in sources:
                try:
                    blob = await self._fetch_from(src, *key)
                except (ConnectionError, MessageError, OSError, asyncio.TimeoutError):
                    continue
                if blob is None:
                    continue
                if not blob.verify():
                    stats.checksum_failures += 1
                    continue
                self._put(key, blob)
                stats.fetched += 1
                stats.bytes_fetched += len(blob.data)
                return
        stats.fetch_failures += 1

    async def _fetch_from(self, src: dict, layer: int, expert: int):
        reader, writer = await asyncio.wait_for(
            asyncio.open_connection(src["host"], src["port"]), timeout=5.0
        )
        try:
            await send_message(
                writer,
                Message(
                    KIND_FETCH_REQUEST,
                    self.node_id,
                    {"layer": layer, "expert": expert},
                ),
            )
            reply = await asyncio.wait_for(read_message(reader), timeout=5.0)
        finally:
            writer.close()
        if reply.kind != KIND_FETCH_REPLY or "error" in reply.payload:
            return None
        p = reply.payload
        return ExpertStateBlob(
            layer=p["layer"],
            expert=p["expert"],
            version=p["version"],
            data=base64.b64decode(p["data"]),
            checksum=p["checksum"],
        )

    # -- peer-facing --------------------------------------------------------

    async def _serve_fetch(self, reader, writer) -> None:
        try:
            while True:
                try:
                    msg = await read_message(reader)
                except (ConnectionClosed, MessageError):
                    return
                if msg.kind != KIND_FETCH_REQUEST:
                    continue
                key = (msg.payload.get("layer"), msg.payload.get("expert"))
                blob = self._store.get(key)
                if blob is None:
                    payload = {"error": "not_held", "layer": key[0], "expert": key[1]}
                else:
                    payload = {
                        "layer": blob.layer,
                        "expert": blob.expert,
                        "version": blob.version,
                        "checksum": blob.checksum,
                        "data": base64.b64encode(blob.data).decode(),
                    }
                await send_message(
                    writer, Message(KIND_FETCH_REPLY, self.node_id, payload)
                )
        finally:
            writer.close()

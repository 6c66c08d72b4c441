"""Wire protocol and expert-state blobs for the controller/agent plane.

Frames are a 4-byte big-endian length followed by a JSON object:
``{"v": 1, "kind": ..., "sender": ..., "payload": {...}}``.  The sender is a
node id; the controller uses -1.  Messages are FIFO per connection; handlers
must tolerate arbitrary interleaving across connections.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import random
import struct
from dataclasses import dataclass

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 64 * 1024 * 1024
CONTROLLER_SENDER = -1

KIND_REGISTER = "register"
KIND_HEARTBEAT = "heartbeat"
KIND_PLAN_PUSH = "plan_push"
KIND_LOAD_REPORT = "load_report"
KIND_FETCH_REQUEST = "fetch_request"
KIND_FETCH_REPLY = "fetch_reply"
KIND_SHUTDOWN = "shutdown"

KINDS = frozenset(
    {
        KIND_REGISTER,
        KIND_HEARTBEAT,
        KIND_PLAN_PUSH,
        KIND_LOAD_REPORT,
        KIND_FETCH_REQUEST,
        KIND_FETCH_REPLY,
        KIND_SHUTDOWN,
    }
)


class MessageError(ValueError):
    """Malformed or protocol-violating frame."""


class ConnectionClosed(ConnectionError):
    """Peer closed the stream mid-frame or between frames."""


@dataclass(frozen=True)
class Message:
    kind: str
    sender: int
    payload: dict


def encode_message(msg: Message) -> bytes:
    if msg.kind not in KINDS:
        raise MessageError(f"unknown message kind {msg.kind!r}")
    body = json.dumps(
        {
            "v": PROTOCOL_VERSION,
            "kind": msg.kind,
            "sender": msg.sender,
            "payload": msg.payload,
        },
        separators=(",", ":"),
        sort_keys=True,
    ).encode()
    if len(body) > MAX_FRAME_BYTES:
        raise MessageError(f"frame of {len(body)} bytes exceeds limit")
    return struct.pack(">I", len(body)) + body


def decode_frame(body: bytes) -> Message:
    try:
        obj = json.loads(body)
    except json.JSONDecodeError as exc:
        raise MessageError(f"invalid JSON frame: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise MessageError("frame must be a JSON object")
    if obj.get("v") != PROTOCOL_VERSION:
        raise MessageError(f"unsupported protocol version {obj.get('v')!r}")
    kind = obj.get("kind")
    if kind not in KINDS:
        raise MessageError(f"unknown message kind {kind!r}")
    sender = obj.get("sender")
    if not isinstance(sender, int):
        raise MessageError("sender must be an integer node id")
    payload = obj.get("payload")
    if not isinstance(payload, dict):
        raise MessageError("payload must be an object")
    return Message(kind, sender, payload)


async def read_message(reader: asyncio.StreamReader) -> Message:
    try:
        header = await reader.readexactly(4)
    except (asyncio.IncompleteReadError, ConnectionResetError) as exc:
        raise ConnectionClosed("connection closed") from exc
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise MessageError(f"frame of {length} bytes exceeds limit")
    try:
        body = await reader.readexactly(length)
    except (asyncio.IncompleteReadError, ConnectionResetError) as exc:
        raise ConnectionClosed("connection closed mid-frame") from exc
    return decode_frame(body)


async def send_message(writer: asyncio.StreamWriter, msg: Message) -> None:
    writer.write(encode_message(msg))
    await writer.drain()


def blob_checksum(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class ExpertStateBlob:
    """Opaque stand-in for an expert's weights and optimizer state."""

    layer: int
    expert: int
    version: int
    data: bytes
    checksum: str

    def verify(self) -> bool:
        return blob_checksum(self.data) == self.checksum


def make_blob(layer: int, expert: int, version: int, size: int) -> ExpertStateBlob:
    """Deterministic synthetic state: every creator of the same (layer, expert,
    version, size) produces identical bytes, mirroring replicas holding the
    same trained parameters."""
    tag = f"{layer}/{expert}/{version}/{size}".encode()
    seed = int.from_bytes(hashlib.sha256(tag).digest()[:8], "big")
    data = random.Random(seed).randbytes(size)
    return ExpertStateBlob(layer, expert, version, data, blob_checksum(data))

"""Bit-exact event wire format, tag header codec, and guard registration.

Envelope layout (big-endian): guard_id (16 bytes), body_length (u32),
function_type (u16), event_type (u16), then body_length body bytes.  The
runtime-to-guard variant omits the guard_id.  Event type registry:

    1 REGISTER       2 REGISTER_ACK   3 FLOW_EVENT     4 DECISION_REQ
    5 DECISION_RESP  6 STOP           7 RESUME         8 HEARTBEAT
    9 HEARTBEAT_ACK  10 POLICY_PUSH
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Protocol

from .model import FlowguardError, Tag

GUARD_ID_LEN = 16
HEADER = struct.Struct("!16sIHH")
HEADER_LEN = HEADER.size  # 24
SHORT_HEADER = struct.Struct("!IHH")
SHORT_HEADER_LEN = SHORT_HEADER.size  # 8

TAG_HEADER_NAME = "x-seclambda-tag"
CONTROLLER_ENV_VAR = "SECLAMBDA_CONTROLLER"


class ProtocolError(FlowguardError):
    """Base class for wire-format errors."""


class Truncated(ProtocolError):
    """Fewer bytes than the header or declared body require."""


class LengthMismatch(ProtocolError):
    """body_length disagrees with the actual body size."""


class BadTagFormat(ProtocolError):
    """A tag header value does not have the three expected fields."""


class ControllerUnreachable(ProtocolError):
    """No controller answered on the configured address."""


class FanOutExceeded(FlowguardError):
    """Registration would exceed the function's live-instance limit."""


class FunctionType(IntEnum):
    CONTROL = 0
    FLOW_TRACKING = 1
    CREDENTIAL = 2
    RATE_LIMIT = 3


class EventType(IntEnum):
    REGISTER = 1
    REGISTER_ACK = 2
    FLOW_EVENT = 3
    DECISION_REQ = 4
    DECISION_RESP = 5
    STOP = 6
    RESUME = 7
    HEARTBEAT = 8
    HEARTBEAT_ACK = 9
    POLICY_PUSH = 10


@dataclass(frozen=True)
class EventEnvelope:
    guard_id: bytes
    function_type: int
    event_type: int
    body: bytes = b""

    def __post_init__(self) -> None:
        if len(self.guard_id) != GUARD_ID_LEN:
            raise ValueError("guard_id must be exactly 16 bytes")
        if not 0 <= self.function_type <= 0xFFFF:
            raise ValueError("function_type out of u16 range")
        if not 0 <= self.event_type <= 0xFFFF:
            raise ValueError("event_type out of u16 range")

    @property
    def body_length(self) -> int:
        return len(self.body)

    def json_body(self) -> dict:
        return json.loads(self.body.decode("utf-8")) if self.body else {}


def envelope_from_json(
    guard_id: bytes,
    function_type: int,
    event_type: int,
    payload: dict | None = None,
) -> EventEnvelope:
    body = b"" if payload is None else json.dumps(payload, sort_keys=True).encode()
    return EventEnvelope(guard_id, function_type, event_type, body)


def encode_envelope(env: EventEnvelope) -> bytes:
    header = HEADER.pack(
        env.guard_id, len(env.body), env.function_type, env.event_type
    )
    return header + env.body


def decode_envelope(data: bytes) -> EventEnvelope:
    if len(data) < HEADER_LEN:
        raise Truncated(f"need {HEADER_LEN} header bytes, got {len(data)}")
    guard_id, body_length, function_type, event_type = HEADER.unpack_from(data)
    body = data[HEADER_LEN:]
    if len(body) != body_length:
        raise LengthMismatch(
            f"declared body of {body_length} bytes, found {len(body)}"
        )
    return EventEnvelope(guard_id, function_type, event_type, bytes(body))


def encode_short_envelope(env: EventEnvelope) -> bytes:
    """Runtime-to-guard variant: same layout minus the guard_id."""
    return SHORT_HEADER.pack(len(env.body), env.function_type, env.event_type) + env.body


def decode_short_envelope(data: bytes, guard_id: bytes = b"\x00" * 16) -> EventEnvelope:
    if len(data) < SHORT_HEADER_LEN:
        raise Truncated(f"need {SHORT_HEADER_LEN} header bytes, got {len(data)}")
    body_length, function_type, event_type = SHORT_HEADER.unpack_from(data)
    body = data[SHORT_HEADER_LEN:]
    if len(body) != body_length:
        raise LengthMismatch(
            f"declared body of {body_length} bytes, found {len(body)}"
        )
    return EventEnvelope(guard_id, function_type, event_type, bytes(body))


def derive_guard_id(instance_id: str, function_name: str) -> bytes:
    """Deterministic 16-byte guard id: truncated SHA-256 of
    instance_id || 0x00 || function_name."""
    if not instance_id or not function_name:
        raise ValueError("instance_id and function_name must be non-empty")
    digest = hashlib.sha256(
        instance_id.encode("utf-8") + b"\x00" + function_name.encode("utf-8")
    ).digest()
    return digest[:GUARD_ID_LEN]


# ---------------------------------------------------------------------------
# Tag header codec

_TAG_VALUE_RE = re.compile(r"^([^;]+);([0-9a-f]{32});([0-9a-f]{32})$")


def encode_tag(tag: Tag) -> str:
    return f"{tag.function};{tag.guard_id.hex()};{tag.request_id.hex()}"


def decode_tag(value: str) -> Tag:
    match = _TAG_VALUE_RE.match(value)
    if not match:
        raise BadTagFormat(f"not a <function>;<32 hex>;<32 hex> value: {value!r}")
    function, guard_hex, request_hex = match.groups()
    return Tag(function, bytes.fromhex(guard_hex), bytes.fromhex(request_hex))


def insert_tag(message: bytes, tag: Tag) -> bytes:
    """Add the tag header to an HTTP/1.1 message, leaving every other byte
    untouched."""
    sep = message.find(b"\r\n\r\n")
    line = f"{TAG_HEADER_NAME}: {encode_tag(tag)}\r\n".encode("ascii")
    if sep < 0:
        # Headers-only message without a blank line: append the header line.
        if message.endswith(b"\r\n"):
            return message + line
        return message + b"\r\n" + line
    return message[: sep + 2] + line + message[sep + 2 :]


_TAG_LINE_RE = re.compile(
    rb"^" + TAG_HEADER_NAME.encode("ascii") + rb":[ \t]*([^\r\n]*)\r\n",
    re.IGNORECASE | re.MULTILINE,
)


def strip_tag(message: bytes) -> tuple[bytes, Tag | None]:
    """Remove the tag header if present; the remainder is byte-identical to
    the message as it looked before insertion."""
    head_end = message.find(b"\r\n\r\n")
    search_space = message if head_end < 0 else message[: head_end + 4]
    match = _TAG_LINE_RE.search(search_space)
    if not match:
        return message, None
    tag = decode_tag(match.group(1).decode("ascii", errors="replace"))
    return message[: match.start()] + message[match.end() :], tag


# ---------------------------------------------------------------------------
# Registration


@dataclass(frozen=True)
class RegistrationRecord:
    guard_id: bytes
    instance_id: str
    function: str
    application: str


class Channel(Protocol):
    """Synchronous request-reply transport carrying encoded envelopes."""

    def request(self, payload: bytes) -> bytes: ...


def register(channel: Channel, instance_id: str, function_name: str) -> RegistrationRecord:
    """Handshake with the controller: send instance id + function name, get
    back the guard id this instance must carry in every future envelope."""
    req = envelope_from_json(
        b"\x00" * GUARD_ID_LEN,
        FunctionType.CONTROL,
        EventType.REGISTER,
        {"instance": instance_id, "function": function_name},
    )
    try:
        raw = channel.request(encode_envelope(req))
    except (ConnectionError, OSError, TimeoutError) as exc:
        raise ControllerUnreachable(str(exc)) from exc
    resp = decode_envelope(raw)
    if resp.event_type != EventType.REGISTER_ACK:
        raise ProtocolError(f"unexpected reply event type {resp.event_type}")
    payload = resp.json_body()
    if payload.get("error") == "fan_out_exceeded":
        raise FanOutExceeded(payload.get("detail", function_name))
    if "error" in payload:
        raise ProtocolError(str(payload["error"]))
    return RegistrationRecord(
        guard_id=bytes.fromhex(payload["guard_id"]),
        instance_id=instance_id,
        function=function_name,
        application=payload.get("application", ""),
    )

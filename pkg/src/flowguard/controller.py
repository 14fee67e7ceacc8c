"""Central controller: guard registry with heartbeat liveness, global
flow-graph enforcement with tag handoff and positional pairing of concurrent
executions, sliding-window rate limiting with STOP/RESUME, policy
distribution, and event logging.

State is partitioned per application; mutations to one application's ledger
are serialized under a single lock, and the decision path never waits on log
processing.
"""

from __future__ import annotations

import json
import secrets
import socket
import socketserver
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .enforce import Mode, Reason
from .graphbuild import Topology
from .model import (
    Direction,
    FlowEvent,
    FlowguardError,
    GlobalFlowGraph,
    HttpOp,
    Tag,
)
from .protocol import (
    EventEnvelope,
    EventType,
    FanOutExceeded,
    FunctionType,
    GUARD_ID_LEN,
    HEADER_LEN,
    decode_envelope,
    derive_guard_id,
    encode_envelope,
    envelope_from_json,
)

HEARTBEAT_PERIOD_S = 1.0
HEARTBEAT_MISS_LIMIT = 3
RATE_WINDOW_S = 1.0
DEFAULT_FAN_OUT = 1000


class UnknownFunction(FlowguardError):
    """Registration for a function absent from the tenant config."""


class UnknownGuard(FlowguardError):
    """An event or push referenced a guard that is not live."""


@dataclass(frozen=True)
class RateLimitEntry:
    function: str
    pattern: str
    op: HttpOp
    rate: int

    def key(self) -> tuple[str, str, str]:
        return (self.function, self.pattern, self.op.value)

    def matches(self, function: str, flow_url: str, op: HttpOp) -> bool:
        if function != self.function or op is not self.op:
            return False
        if self.pattern.endswith("*"):
            return flow_url.startswith(self.pattern[:-1])
        return flow_url == self.pattern

    def to_dict(self) -> dict:
        return {
            "function": self.function,
            "url": self.pattern,
            "op": self.op.value,
            "rate": self.rate,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RateLimitEntry":
        return cls(
            function=str(data["function"]),
            pattern=str(data["url"]),
            op=HttpOp(data["op"]),
            rate=int(data["rate"]),
        )


@dataclass
class AppConfig:
    name: str
    functions: tuple[str, ...]
    entry_functions: tuple[str, ...] = ()
    fan_out: dict[str, int] = field(default_factory=dict)
    default_fan_out: int = DEFAULT_FAN_OUT
    rate_limits: tuple[RateLimitEntry, ...] = ()
    global_graph: GlobalFlowGraph | None = None
    topology: Topology = field(default_factory=Topology)
    fail_mode: Mode = Mode.FAIL_CLOSED

    def fan_out_limit(self, function: str) -> int:
        return self.fan_out.get(function, self.default_fan_out)


@dataclass
class TenantConfig:
    applications: dict[str, AppConfig] = field(default_factory=dict)

    def app_for_function(self, function: str) -> AppConfig | None:
        for app in self.applications.values():
            if function in app.functions:
                return app
        return None

    @classmethod
    def from_dict(cls, data: Mapping) -> "TenantConfig":
        apps: dict[str, AppConfig] = {}
        for name, raw in data.get("applications", {}).items():
            graph = None
            if raw.get("global_graph"):
                graph = GlobalFlowGraph.from_dict(raw["global_graph"])
            topo = Topology(
                services=dict(raw.get("services", {})),
                triggers={
                    k: tuple(v) for k, v in raw.get("triggers", {}).items()
                },
                entry_urls=dict(raw.get("entry_urls", {})),
            )
            apps[name] = AppConfig(
                name=name,
                functions=tuple(raw.get("functions", ())),
                entry_functions=tuple(raw.get("entry_functions", ())),
                fan_out={k: int(v) for k, v in raw.get("fan_out", {}).items()},
                default_fan_out=int(raw.get("default_fan_out", DEFAULT_FAN_OUT)),
                rate_limits=tuple(
                    RateLimitEntry.from_dict(e) for e in raw.get("rate_limits", ())
                ),
                global_graph=graph,
                topology=topo,
                fail_mode=Mode(raw.get("fail_mode", "closed")),
            )
        return cls(applications=apps)

    @classmethod
    def from_json_file(cls, path) -> "TenantConfig":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))


@dataclass
class ExecutionRecord:
    """One function execution as seen by the controller's ledger."""

    guard_id: bytes
    function: str
    node: str
    request_id: bytes
    start_ts: int = 0
    sends: list[str] = field(default_factory=list)
    completed: bool = False

    def tag(self) -> Tag:
        return Tag(self.function, self.guard_id, self.request_id)


@dataclass
class GuardRecord:
    guard_id: bytes
    instance_id: str
    function: str
    application: str
    notify: Callable[[EventEnvelope], bool] | None = None
    missed_heartbeats: int = 0
    alive: bool = True
    current: ExecutionRecord | None = None


@dataclass
class Alarm:
    application: str
    function: str
    reason: str
    detail: str = ""
    ts: int = 0


@dataclass
class _AppState:
    config: AppConfig
    node_lists: dict[str, list[ExecutionRecord]] = field(default_factory=dict)
    pointers: dict[str, str] = field(default_factory=dict)
    max_occurrence: dict[str, int] = field(default_factory=dict)

    def occurrences(self, function: str) -> list[str]:
        graph = self.config.global_graph
        names: list[str] = []
        if graph is not None:
            for name, kind in graph.nodes.items():
                if kind != "function":
                    continue
                base = name.split("#", 1)[0]
                if base == function:
                    names.append(name)
        if not names:
            names = [function]
        names.sort(key=lambda n: (len(n), n))
        return names


class Controller:
    """In-process controller core.  The TCP front end and the simulator both
    drive this object; a monotonic ``now`` in seconds is supplied by the
    caller so behavior stays deterministic."""

    def __init__(
        self,
        config: TenantConfig,
        request_id_source: Callable[[], bytes] | None = None,
    ):
        self.config = config
        self._new_request_id = request_id_source or (lambda: secrets.token_bytes(16))
        self.guards: dict[bytes, GuardRecord] = {}
        self.live_counts: dict[str, int] = {}
        self.apps: dict[str, _AppState] = {
            name: _AppState(config=app) for name, app in config.applications.items()
        }
        self.event_log: list[dict] = []
        self.alarms: list[Alarm] = []
        self.stop_state: dict[tuple, dict] = {}
        self.rate_events: dict[tuple, deque] = {}
        self.broadcasts: list[dict] = []
        self._lock = threading.Lock()
        self._now = 0.0

    # -- time ---------------------------------------------------------------

    def tick(self, now_s: float) -> list[bytes]:
        """Advance the controller clock: run the heartbeat sweep and re-check
        stopped rate-limit entries.  Returns guard ids expired this tick."""
        with self._lock:
            self._now = now_s
            expired = self._heartbeat_sweep()
            self._rate_resume_check()
            return expired

    # -- registration -------------------------------------------------------

    def handle_register(
        self,
        instance_id: str,
        function_name: str,
        notify: Callable[[EventEnvelope], bool] | None = None,
    ) -> bytes:
        with self._lock:
            app = self.config.app_for_function(function_name)
            if app is None:
                raise UnknownFunction(function_name)
            guard_id = derive_guard_id(instance_id, function_name)
            existing = self.guards.get(guard_id)
            if existing is not None and existing.alive:
                existing.notify = notify or existing.notify
                return guard_id
            count = self.live_counts.get(function_name, 0)
            if count + 1 > app.fan_out_limit(function_name):
                raise FanOutExceeded(
                    f"{function_name}: {count} live instances at limit "
                    f"{app.fan_out_limit(function_name)}"
                )
            self.guards[guard_id] = GuardRecord(
                guard_id=guard_id,
                instance_id=instance_id,
                function=function_name,
                application=app.name,
                notify=notify,
            )
            self.live_counts[function_name] = count + 1
            return guard_id

    def _expire(self, guard: GuardRecord) -> None:
        if not guard.alive:
            return
        guard.alive = False
        self.live_counts[guard.function] = max(
            0, self.live_counts.get(guard.function, 0) - 1
        )

    def _heartbeat_sweep(self) -> list[bytes]:
        expired: list[bytes] = []
        beat = envelope_from_json(
            b"\x00" * GUARD_ID_LEN, FunctionType.RATE_LIMIT, EventType.HEARTBEAT
        )
        for guard in list(self.guards.values()):
            if not guard.alive:
                continue
            acked = False
            if guard.notify is not None:
                acked = bool(guard.notify(beat))
            if acked:
                guard.missed_heartbeats = 0
            else:
                guard.missed_heartbeats += 1
            if guard.missed_heartbeats >= HEARTBEAT_MISS_LIMIT:
                self._expire(guard)
                expired.append(guard.guard_id)
        return expired

    def heartbeat_sweep(self) -> list[bytes]:
        with self._lock:
            return self._heartbeat_sweep()

    # -- ledger and pairing ---------------------------------------------------

    def _app_state(self, guard: GuardRecord) -> _AppState:
        return self.apps[guard.application]

    def _require_guard(self, guard_id: bytes) -> GuardRecord:
        guard = self.guards.get(guard_id)
        if guard is None or not guard.alive:
            raise UnknownGuard(guard_id.hex())
        return guard

    def begin_entry_execution(self, guard_id: bytes, ts: int = 0) -> Tag:
        """Start of an entry-function execution: mint a fresh request id and
        seat the execution in the ledger."""
        with self._lock:
            guard = self._require_guard(guard_id)
            request_id = self._new_request_id()
            return self._seat_execution(guard, request_id, ts)

    def begin_tagged_execution(self, guard_id: bytes, tag: Tag, ts: int = 0) -> Tag:
        """Start of an execution whose inbound request carried a valid tag:
        the request id propagates unchanged."""
        with self._lock:
            guard = self._require_guard(guard_id)
            return self._seat_execution(guard, tag.request_id, ts)

    def _seat_execution(self, guard: GuardRecord, request_id: bytes, ts: int) -> Tag:
        state = self._app_state(guard)
        node = self._assign_node(state, guard.function, request_id)
        record = ExecutionRecord(
            guard_id=guard.guard_id,
            function=guard.function,
            node=node,
            request_id=request_id,
            start_ts=ts,
        )
        state.node_lists.setdefault(node, []).append(record)
        guard.current = record
        self._advance_pointer(state, request_id, node, guard.function, ts)
        return record.tag()

    def _assign_node(self, state: _AppState, function: str, request_id: bytes) -> str:
        seen = state.max_occurrence.get(request_id.hex() + function, 0) + 1
        state.max_occurrence[request_id.hex() + function] = seen
        names = state.occurrences(function)
        index = min(seen, len(names)) - 1
        return names[index]

    def _advance_pointer(
        self, state: _AppState, request_id: bytes, node: str, function: str, ts: int
    ) -> None:
        key = request_id.hex()
        graph = state.config.global_graph
        previous = state.pointers.get(key)
        if graph is not None and previous is not None:
            allowed = {
                e.dst for e in graph.edges if e.src == previous
            }
            if node not in allowed and function not in state.config.entry_functions:
                self.alarms.append(
                    Alarm(
                        application=state.config.name,
                        function=function,
                        reason="pointer_violation",
                        detail=f"{previous} -> {node} not in global graph",
                        ts=ts,
                    )
                )
        state.pointers[key] = node

    def check_predecessor(
        self, guard_id: bytes, service: str | None, ts: int = 0
    ) -> tuple[bool, Tag | None]:
        """Global check for an untagged inbound request from a service.

        The new execution pairs positionally with the same-index execution of
        a predecessor function in the global graph; the predecessor must have
        sent to the mediating service.  On success the new execution is
        seated and the predecessor's tag is returned so its request id can be
        reused.  Failure raises an alarm and denies."""
        with self._lock:
            guard = self._require_guard(guard_id)
            state = self._app_state(guard)
            graph = state.config.global_graph
            if graph is None:
                self._alarm_no_predecessor(state, guard, service, ts, "no global graph")
                return False, None
            for node in state.occurrences(guard.function):
                position = len(state.node_lists.get(node, []))
                for edge in graph.function_predecessors(node):
                    if service is not None and edge.via is not None and edge.via != service:
                        continue
                    pred_list = state.node_lists.get(edge.src, [])
                    if position >= len(pred_list):
                        continue
                    predecessor = pred_list[position]
                    # The edge's own mediating service carries the condition;
                    # an orchestrated edge (no service) pairs positionally.
                    if edge.via is not None and not self._sent_to_service(
                        state, predecessor, edge.via
                    ):
                        continue
                    tag = predecessor.tag()
                    record = ExecutionRecord(
                        guard_id=guard.guard_id,
                        function=guard.function,
                        node=node,
                        request_id=tag.request_id,
                        start_ts=ts,
                    )
                    state.node_lists.setdefault(node, []).append(record)
                    guard.current = record
                    key = tag.request_id.hex()
                    state.max_occurrence[key + guard.function] = (
                        state.max_occurrence.get(key + guard.function, 0) + 1
                    )
                    state.pointers[key] = node
                    return True, tag
            self._alarm_no_predecessor(
                state, guard, service, ts, "no predecessor execution available"
            )
            return False, None

    def _sent_to_service(
        self, state: _AppState, record: ExecutionRecord, service: str | None
    ) -> bool:
        if service is None:
            return True
        topo = state.config.topology
        return any(topo.service_for_url(url) == service for url in record.sends)

    def _alarm_no_predecessor(
        self,
        state: _AppState,
        guard: GuardRecord,
        service: str | None,
        ts: int,
        detail: str,
    ) -> None:
        self.alarms.append(
            Alarm(
                application=state.config.name,
                function=guard.function,
                reason="no_predecessor_available",
                detail=f"via {service or '?'}: {detail}",
                ts=ts,
            )
        )

    # -- event logging --------------------------------------------------------

    def record_event(
        self,
        guard_id: bytes,
        event: FlowEvent,
        decision: str = "allow",
        reason: str = Reason.OK.value,
    ) -> None:
        """Append a guard's event to the application log and keep the ledger
        current.  Events from expired guards raise UnknownGuard."""
        with self._lock:
            guard = self._require_guard(guard_id)
            record = json.loads(event.to_json())
            record["decision"] = decision
            record["reason"] = reason
            record["app"] = guard.application
            if guard.current is not None:
                record["request_id"] = guard.current.request_id.hex()
            self.event_log.append(record)
            if guard.current is None:
                return
            if event.direction is Direction.SEND and decision == "allow":
                guard.current.sends.append(event.url)
            elif event.direction is Direction.OUT:
                guard.current.completed = True

    # -- rate limiting ---------------------------------------------------------

    def _entries_for(self, function: str) -> Iterable[RateLimitEntry]:
        app = self.config.app_for_function(function)
        if app is None:
            return ()
        return app.rate_limits

    def allow_send(self, guard_id: bytes, url: str, op: HttpOp, now_s: float) -> bool:
        """Account one outbound flow against the rate-limit policy.

        Returns False and broadcasts STOP when the flow would push a window
        past its rate; the triggering flow itself is dropped, so at most
        ``rate`` matching flows pass per window."""
        with self._lock:
            guard = self._require_guard(guard_id)
            self._now = max(self._now, now_s)
            verdict = True
            for entry in self._entries_for(guard.function):
                if not entry.matches(guard.function, url, op):
                    continue
                key = entry.key()
                window = self.rate_events.setdefault(key, deque())
                while window and window[0] <= now_s - RATE_WINDOW_S:
                    window.popleft()
                if key in self.stop_state:
                    verdict = False
                    continue
                if len(window) + 1 > entry.rate:
                    self.stop_state[key] = {"entry": entry, "stopped_at": now_s}
                    self._broadcast(entry, EventType.STOP)
                    verdict = False
                else:
                    window.append(now_s)
            return verdict

    def _broadcast(self, entry: RateLimitEntry, event_type: EventType) -> None:
        envelope = envelope_from_json(
            b"\x00" * GUARD_ID_LEN,
            FunctionType.RATE_LIMIT,
            event_type,
            entry.to_dict(),
        )
        self.broadcasts.append(
            {"type": EventType(event_type).name, "entry": entry.to_dict()}
        )
        for guard in self.guards.values():
            if guard.alive and guard.function == entry.function and guard.notify:
                guard.notify(envelope)

    def _rate_resume_check(self) -> None:
        for key, info in list(self.stop_state.items()):
            entry: RateLimitEntry = info["entry"]
            window = self.rate_events.get(key, deque())
            while window and window[0] <= self._now - RATE_WINDOW_S:
                window.popleft()
            quiet_since = self._now - info["stopped_at"] >= RATE_WINDOW_S
            if quiet_since and len(window) < entry.rate:
                del self.stop_state[key]
                self._broadcast(entry, EventType.RESUME)

    # -- policy push -------------------------------------------------------------

    def push_policy(self, guard_id: bytes, payload: dict) -> bool:
        """Deliver a policy update on the guard's async channel.  Returns the
        guard's ack; a NACK means the guard kept its previous policy."""
        with self._lock:
            guard = self._require_guard(guard_id)
            if guard.notify is None:
                raise UnknownGuard(guard_id.hex())
            envelope = envelope_from_json(
                b"\x00" * GUARD_ID_LEN,
                FunctionType.FLOW_TRACKING,
                EventType.POLICY_PUSH,
                payload,
            )
            return bool(guard.notify(envelope))

    # -- envelope dispatch (wire front end) ---------------------------------------

    def handle_envelope(self, raw: bytes) -> bytes:
        """Decode one request envelope and produce the reply envelope.  Used
        by the TCP front end; every request gets exactly one reply."""
        env = decode_envelope(raw)
        event_type = env.event_type
        if event_type == EventType.REGISTER:
            payload = env.json_body()
            try:
                guard_id = self.handle_register(
                    payload["instance"], payload["function"]
                )
                app = self.config.app_for_function(payload["function"])
                reply = {
                    "guard_id": guard_id.hex(),
                    "application": app.name if app else "",
                }
            except FanOutExceeded as exc:
                reply = {"error": "fan_out_exceeded", "detail": str(exc)}
            except UnknownFunction as exc:
                reply = {"error": "unknown_function", "detail": str(exc)}
            return encode_envelope(
                envelope_from_json(
                    env.guard_id, FunctionType.CONTROL, EventType.REGISTER_ACK, reply
                )
            )
        if event_type == EventType.FLOW_EVENT:
            payload = env.json_body()
            try:
                event = FlowEvent.from_json(json.dumps(payload["event"]))
                self.record_event(
                    env.guard_id,
                    event,
                    decision=payload.get("decision", "allow"),
                    reason=payload.get("reason", Reason.OK.value),
                )
                reply = {"ok": True}
            except UnknownGuard:
                reply = {"error": "unknown_guard"}
            return encode_envelope(
                envelope_from_json(
                    env.guard_id, env.function_type, EventType.DECISION_RESP, reply
                )
            )
        if event_type == EventType.DECISION_REQ:
            payload = env.json_body()
            kind = payload.get("kind", "predecessor")
            try:
                if kind == "entry":
                    tag = self.begin_entry_execution(
                        env.guard_id, int(payload.get("ts", 0))
                    )
                    reply = {"verdict": "allow", "tag": _tag_dict(tag)}
                elif kind == "tagged":
                    tag = Tag(
                        payload["tag"]["function"],
                        bytes.fromhex(payload["tag"]["guard_id"]),
                        bytes.fromhex(payload["tag"]["request_id"]),
                    )
                    minted = self.begin_tagged_execution(
                        env.guard_id, tag, int(payload.get("ts", 0))
                    )
                    reply = {"verdict": "allow", "tag": _tag_dict(minted)}
                else:
                    ok, tag = self.check_predecessor(
                        env.guard_id,
                        payload.get("service"),
                        int(payload.get("ts", 0)),
                    )
                    reply = {
                        "verdict": "allow" if ok else "deny",
                        "tag": _tag_dict(tag) if tag else None,
                    }
            except UnknownGuard:
                reply = {"verdict": "deny", "error": "unknown_guard"}
            return encode_envelope(
                envelope_from_json(
                    env.guard_id, env.function_type, EventType.DECISION_RESP, reply
                )
            )
        if event_type == EventType.HEARTBEAT_ACK:
            with self._lock:
                guard = self.guards.get(env.guard_id)
                if guard is not None:
                    guard.missed_heartbeats = 0
            return encode_envelope(
                envelope_from_json(
                    env.guard_id, env.function_type, EventType.HEARTBEAT_ACK, {"ok": True}
                )
            )
        return encode_envelope(
            envelope_from_json(
                env.guard_id,
                env.function_type,
                EventType.DECISION_RESP,
                {"error": f"unsupported event type {event_type}"},
            )
        )

    # -- log output ----------------------------------------------------------------

    def write_event_log(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            for record in self.event_log:
                handle.write(json.dumps(record, sort_keys=True))
                handle.write("\n")


def _tag_dict(tag: Tag) -> dict:
    return {
        "function": tag.function,
        "guard_id": tag.guard_id.hex(),
        "request_id": tag.request_id.hex(),
    }


# ---------------------------------------------------------------------------
# TCP front end


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:  # pragma: no cover - exercised via TCP tests
        controller: Controller = self.server.controller  # type: ignore[attr-defined]
        sock: socket.socket = self.request
        while True:
            raw = _read_envelope(sock)
            if raw is None:
                return
            try:
                reply = controller.handle_envelope(raw)
            except FlowguardError as exc:
                reply = encode_envelope(
                    envelope_from_json(
                        b"\x00" * GUARD_ID_LEN,
                        FunctionType.CONTROL,
                        EventType.DECISION_RESP,
                        {"error": str(exc)},
                    )
                )
            sock.sendall(reply)


def _read_exact(sock: socket.socket, count: int) -> bytes | None:
    chunks = b""
    while len(chunks) < count:
        block = sock.recv(count - len(chunks))
        if not block:
            return None
        chunks += block
    return chunks


def _read_envelope(sock: socket.socket) -> bytes | None:
    header = _read_exact(sock, HEADER_LEN)
    if header is None:
        return None
    body_length = int.from_bytes(header[GUARD_ID_LEN : GUARD_ID_LEN + 4], "big")
    body = _read_exact(sock, body_length) if body_length else b""
    if body is None:
        return None
    return header + body


class ControllerServer:
    """Threaded TCP server speaking the envelope framing."""

    def __init__(self, controller: Controller, host: str = "127.0.0.1", port: int = 0):
        self.controller = controller
        self._server = socketserver.ThreadingTCPServer(
            (host, port), _Handler, bind_and_activate=True
        )
        self._server.daemon_threads = True
        self._server.controller = controller  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address  # type: ignore[return-value]

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._server.serve_forever, daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


class TcpChannel:
    """Client side of the synchronous request-reply channel."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)

    def request(self, payload: bytes) -> bytes:
        self._sock.sendall(payload)
        raw = _read_envelope(self._sock)
        if raw is None:
            raise ConnectionError("controller closed the connection")
        return raw

    def close(self) -> None:
        self._sock.close()

"""Domain types, trace representation, and the on-disk trace log format.

Everything downstream (graph building, enforcement, the controller, the
simulator) shares these types.  Values are immutable after construction and
safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterable, Mapping, Sequence
from urllib.parse import urlsplit

UNKNOWN_SOURCE = "?"


class FlowguardError(Exception):
    """Base class for all errors raised by this package."""


class MalformedUrl(FlowguardError):
    """Raised when a URL cannot be parsed as scheme://host[/path]."""


class ParseError(FlowguardError):
    """Raised for a malformed trace log line; carries the 1-based line number."""

    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class Direction(str, Enum):
    """Which way a message moved relative to the observed function."""

    SEND = "send"
    RECV = "recv"
    IN = "in"
    OUT = "out"


class HttpOp(str, Enum):
    GET = "GET"
    POST = "POST"
    PUT = "PUT"
    DELETE = "DELETE"
    OTHER = "OTHER"

    @classmethod
    def parse(cls, value: str) -> "HttpOp":
        try:
            return cls(value.upper())
        except ValueError:
            return cls.OTHER


def normalize_url(raw: str) -> str:
    """Canonicalize a URL: lowercase scheme+host, strip query/fragment,
    drop the trailing slash.  Path case and percent-encoding are preserved.
    """
    parts = urlsplit(raw)
    if not parts.scheme or not parts.netloc:
        raise MalformedUrl(f"not a scheme://host URL: {raw!r}")
    path = parts.path.rstrip("/")
    return f"{parts.scheme.lower()}://{parts.netloc.lower()}{path}"


@dataclass(frozen=True)
class FlowEvent:
    """One observed operation of a function instance.

    ``ts`` is monotonic nanoseconds since run start, never wall clock, so
    simulator output is reproducible.  For IN events ``url`` carries the
    declared name of the sender (a function or service) rather than a URL;
    unknown senders use ``"?"``.
    """

    ts: int
    fn: str
    inst: str
    direction: Direction
    url: str
    op: HttpOp
    sess: str = ""
    digest: str | None = None

    def to_json(self) -> str:
        record: dict[str, object] = {
            "ts": self.ts,
            "fn": self.fn,
            "inst": self.inst,
            "dir": self.direction.value,
            "url": self.url,
            "op": self.op.value,
            "sess": self.sess,
        }
        if self.digest is not None:
            record["digest"] = self.digest
        return json.dumps(record, separators=(", ", ": "))

    @classmethod
    def from_json(cls, text: str) -> "FlowEvent":
        record = json.loads(text)
        if not isinstance(record, dict):
            raise ValueError("event line is not a JSON object")
        return cls(
            ts=int(record["ts"]),
            fn=str(record["fn"]),
            inst=str(record["inst"]),
            direction=Direction(record["dir"]),
            url=str(record["url"]),
            op=HttpOp(record["op"]),
            sess=str(record.get("sess", "")),
            digest=record.get("digest"),
        )


@dataclass(frozen=True, order=True)
class Flow:
    """A single outbound request step: where it went and how."""

    url: str
    op: HttpOp

    def key(self) -> tuple[str, str]:
        return (self.url, self.op.value)


@dataclass(frozen=True)
class Trace:
    """The ordered flows of one function execution.

    ``source`` is the declared sender of the inbound request (the entry
    marker); executions whose sender is unknown carry ``"?"``.  ``completed``
    records whether the exit marker (the outbound response) was observed.
    """

    function: str
    execution_id: str
    source: str
    steps: tuple[Flow, ...]
    completed: bool = True


@dataclass(frozen=True)
class AppTrace:
    """Function start order for one application execution."""

    execution_id: str
    function_sequence: tuple[tuple[str, int], ...]


class NodeKind(str, Enum):
    ENTRY = "entry"
    EXIT = "exit"
    FLOW = "flow"
    GROUP = "group"


@dataclass(frozen=True)
class FlowNode:
    """One state of a local flow graph.

    ``pattern`` is either an exact normalized URL or a prefix flagged with a
    trailing ``*``.  ``counter`` bounds consecutive repetitions; it is
    serialized only when greater than one.  GROUP nodes carry an
    order-sensitive ``group_body`` describing one repetition.
    """

    node_id: str
    kind: NodeKind
    pattern: str = ""
    op: HttpOp = HttpOp.OTHER
    counter: int = 1
    group_body: tuple[Flow, ...] = ()

    def __post_init__(self) -> None:
        if self.counter < 1:
            raise ValueError("counter must be >= 1")
        if self.kind is NodeKind.GROUP and not self.group_body:
            raise ValueError("group node requires a non-empty body")

    @cached_property
    def unit(self) -> tuple[Flow, ...]:
        """The flow sequence one repetition of this node consumes."""
        if self.kind is NodeKind.GROUP:
            return self.group_body
        if self.kind is NodeKind.FLOW:
            return (Flow(self.pattern, self.op),)
        return ()


def pattern_matches(pattern: str, op: HttpOp, flow: Flow) -> bool:
    """Exact patterns compare as normalized strings; generalized patterns
    (trailing ``*``) match any URL sharing the prefix."""
    if op is not flow.op:
        return False
    if pattern.endswith("*"):
        return flow.url.startswith(pattern[:-1])
    return flow.url == pattern


ENTRY_ID = "entry"
EXIT_ID = "exit"


@dataclass(frozen=True)
class LocalFlowGraph:
    """Acyclic NFA over flow nodes modeling one function's legal request
    sequences.  The entry node's pattern names the expected sender of the
    inbound request; the exit node marks the outbound response."""

    function: str
    nodes: Mapping[str, FlowNode]
    edges: frozenset[tuple[str, str]]
    entry: str = ENTRY_ID
    exit: str = EXIT_ID

    @cached_property
    def successor_map(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {n: [] for n in self.nodes}
        for src, dst in sorted(self.edges):
            out[src].append(dst)
        return {n: tuple(dsts) for n, dsts in out.items()}

    @cached_property
    def predecessor_map(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {n: [] for n in self.nodes}
        for src, dst in sorted(self.edges):
            out[dst].append(src)
        return {n: tuple(srcs) for n, srcs in out.items()}

    def successors(self, node_id: str) -> tuple[str, ...]:
        return self.successor_map[node_id]

    def predecessors(self, node_id: str) -> tuple[str, ...]:
        return self.predecessor_map[node_id]

    @property
    def entry_source(self) -> str:
        return self.nodes[self.entry].pattern

    def validate(self) -> None:
        """Check the structural invariants: DAG, single entry/exit, and every
        node on some entry-to-exit path."""
        if self.entry not in self.nodes or self.exit not in self.nodes:
            raise ValueError("entry/exit node missing")
        for src, dst in self.edges:
            if src not in self.nodes or dst not in self.nodes:
                raise ValueError(f"edge endpoint not declared: {src}->{dst}")
        if self.predecessors(self.entry):
            raise ValueError("entry must have in-degree 0")
        if self.successors(self.exit):
            raise ValueError("exit must have out-degree 0")
        topo_sort(set(self.nodes), self.edges)
        reach_fwd = _reachable(self.entry, self.successors)
        reach_bwd = _reachable(self.exit, self.predecessors)
        for node_id in self.nodes:
            if node_id not in reach_fwd or node_id not in reach_bwd:
                raise ValueError(f"node off every entry-exit path: {node_id}")

    def to_dict(self) -> dict[str, object]:
        nodes = []
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            record: dict[str, object] = {
                "id": node.node_id,
                "kind": node.kind.value,
                "pattern": node.pattern,
                "op": node.op.value,
            }
            if node.counter > 1:
                record["counter"] = node.counter
            if node.group_body:
                record["group_body"] = [[f.url, f.op.value] for f in node.group_body]
            nodes.append(record)
        return {
            "function": self.function,
            "nodes": nodes,
            "edges": [{"from": s, "to": d} for s, d in sorted(self.edges)],
            "entry": self.entry,
            "exit": self.exit,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "LocalFlowGraph":
        nodes: dict[str, FlowNode] = {}
        for record in data["nodes"]:  # type: ignore[index]
            body = tuple(
                Flow(url, HttpOp(op)) for url, op in record.get("group_body", [])
            )
            node = FlowNode(
                node_id=record["id"],
                kind=NodeKind(record["kind"]),
                pattern=record.get("pattern", ""),
                op=HttpOp(record.get("op", "OTHER")),
                counter=int(record.get("counter", 1)),
                group_body=body,
            )
            nodes[node.node_id] = node
        edges = frozenset(
            (e["from"], e["to"]) for e in data["edges"]  # type: ignore[index]
        )
        graph = cls(
            function=str(data["function"]),
            nodes=nodes,
            edges=edges,
            entry=str(data.get("entry", ENTRY_ID)),
            exit=str(data.get("exit", EXIT_ID)),
        )
        graph.validate()
        return graph

    @classmethod
    def from_json(cls, text: str) -> "LocalFlowGraph":
        return cls.from_dict(json.loads(text))


class EdgeLabel(str, Enum):
    EXPLICIT = "explicit"
    IMPLICIT = "implicit"


@dataclass(frozen=True)
class GlobalEdge:
    src: str
    dst: str
    label: EdgeLabel
    via: str | None = None


@dataclass(frozen=True)
class GlobalFlowGraph:
    """Function-level execution-order graph.  Implicit edges capture
    dependencies mediated by services (or invisible orchestration); repeated
    function occurrences are duplicated as ``name#k`` nodes to stay acyclic."""

    nodes: Mapping[str, str]  # name -> "function" | "service"
    edges: tuple[GlobalEdge, ...]

    def validate(self) -> None:
        for edge in self.edges:
            if edge.src not in self.nodes or edge.dst not in self.nodes:
                raise ValueError(f"edge endpoint not declared: {edge}")
        pairs = frozenset((e.src, e.dst) for e in self.edges)
        topo_sort(set(self.nodes), pairs)

    def predecessors(self, name: str) -> tuple[GlobalEdge, ...]:
        return tuple(e for e in self.edges if e.dst == name)

    def function_predecessors(self, name: str) -> tuple[GlobalEdge, ...]:
        return tuple(
            e
            for e in self.edges
            if e.dst == name and self.nodes.get(e.src) == "function"
        )

    def to_dict(self) -> dict[str, object]:
        edges = []
        for e in sorted(self.edges, key=lambda e: (e.src, e.dst, e.label.value)):
            record: dict[str, object] = {
                "from": e.src,
                "to": e.dst,
                "label": e.label.value,
            }
            if e.via is not None:
                record["via"] = e.via
            edges.append(record)
        return {
            "nodes": [
                {"name": name, "kind": kind}
                for name, kind in sorted(self.nodes.items())
            ],
            "edges": edges,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "GlobalFlowGraph":
        nodes = {n["name"]: n["kind"] for n in data["nodes"]}  # type: ignore[index]
        edges = tuple(
            GlobalEdge(e["from"], e["to"], EdgeLabel(e["label"]), e.get("via"))
            for e in data["edges"]  # type: ignore[index]
        )
        graph = cls(nodes=nodes, edges=edges)
        graph.validate()
        return graph


@dataclass(frozen=True)
class Tag:
    """Identity token carried in message headers: who sent the request, which
    guard vouches for it, and which application request it belongs to."""

    function: str
    guard_id: bytes
    request_id: bytes

    def __post_init__(self) -> None:
        if len(self.guard_id) != 16:
            raise ValueError("guard_id must be exactly 16 bytes")
        if len(self.request_id) != 16:
            raise ValueError("request_id must be exactly 16 bytes")


def topo_sort(
    nodes: set[str], edges: Iterable[tuple[str, str]]
) -> list[str]:
    """Deterministic topological order; raises ValueError on cycles."""
    outgoing: dict[str, list[str]] = {n: [] for n in nodes}
    indegree: dict[str, int] = {n: 0 for n in nodes}
    for src, dst in edges:
        outgoing[src].append(dst)
        indegree[dst] += 1
    ready = sorted(n for n, deg in indegree.items() if deg == 0)
    order: list[str] = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        for succ in sorted(outgoing[node]):
            indegree[succ] -= 1
            if indegree[succ] == 0:
                ready.append(succ)
        ready.sort()
    if len(order) != len(nodes):
        raise ValueError("graph contains a cycle")
    return order


def _reachable(start: str, step: "callable") -> set[str]:
    seen = {start}
    frontier = [start]
    while frontier:
        node = frontier.pop()
        for nxt in step(node):
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return seen


def read_trace_log(path) -> list[FlowEvent]:
    """Read a newline-delimited JSON trace log; malformed lines raise
    ParseError with their 1-based line number."""
    events: list[FlowEvent] = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                events.append(FlowEvent.from_json(stripped))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(lineno, str(exc)) from exc
    return events


def write_trace_log(path, events: Iterable[FlowEvent]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for event in events:
            handle.write(event.to_json())
            handle.write("\n")


def extract_traces(events: Sequence[FlowEvent]) -> list[Trace]:
    """Split an event stream into per-execution traces.

    Executions are keyed by (function, instance); an IN event opens a new
    execution and an OUT event completes it.  Steps are the SEND events in
    timestamp order.  Deterministic and order-preserving.
    """
    by_instance: dict[tuple[str, str], list[FlowEvent]] = {}
    order: list[tuple[str, str]] = []
    for event in events:
        key = (event.fn, event.inst)
        if key not in by_instance:
            by_instance[key] = []
            order.append(key)
        stream = by_instance[key]
        if stream and event.ts < stream[-1].ts:
            raise ValueError(
                f"timestamps decrease within instance {event.inst!r}"
            )
        stream.append(event)

    traces: list[Trace] = []
    for fn, inst in order:
        stream = by_instance[(fn, inst)]
        run = 0
        source = UNKNOWN_SOURCE
        steps: list[Flow] = []
        completed = False
        started = False

        def flush() -> None:
            nonlocal steps, completed, source, started
            if not started:
                return
            execution_id = inst if run <= 1 else f"{inst}/{run}"
            traces.append(
                Trace(
                    function=fn,
                    execution_id=execution_id,
                    source=source,
                    steps=tuple(steps),
                    completed=completed,
                )
            )

        for event in stream:
            if event.direction is Direction.IN:
                flush()
                run += 1
                source = event.url or UNKNOWN_SOURCE
                steps = []
                completed = False
                started = True
            elif event.direction is Direction.SEND:
                if not started:
                    run += 1
                    source = UNKNOWN_SOURCE
                    started = True
                steps.append(Flow(event.url, event.op))
            elif event.direction is Direction.OUT:
                if not started:
                    run += 1
                    source = UNKNOWN_SOURCE
                    started = True
                completed = True
        flush()
    return traces


def extract_app_trace(
    events: Sequence[FlowEvent], execution_id: str
) -> AppTrace:
    """Build the function start order of one application execution from its
    IN events."""
    starts = [
        (event.fn, event.ts)
        for event in sorted(events, key=lambda e: e.ts)
        if event.direction is Direction.IN
    ]
    return AppTrace(execution_id=execution_id, function_sequence=tuple(starts))


def extract_sends(events: Sequence[FlowEvent]) -> dict[str, list[str]]:
    """Collect the URLs each function sent to, in order, for one application
    execution."""
    sends: dict[str, list[str]] = {}
    for event in sorted(events, key=lambda e: e.ts):
        if event.direction is Direction.SEND:
            sends.setdefault(event.fn, []).append(event.url)
    return sends

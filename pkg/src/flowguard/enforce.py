"""Per-execution policy engine: simultaneous NFA simulation of a local flow
graph, emitting ALLOW/DENY decisions per flow.

The graph is nondeterministic (merged chains can share ambiguous prefixes),
so the engine tracks a frontier of candidate positions rather than the single
pointer sufficient for linear graphs.  On linear graphs the frontier stays a
single element, keeping per-check cost constant.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .model import (
    Flow,
    FlowguardError,
    FlowNode,
    HttpOp,
    LocalFlowGraph,
    NodeKind,
    UNKNOWN_SOURCE,
    pattern_matches,
)


class SourceMismatch(FlowguardError):
    """The inbound request's declared sender does not match the entry marker.

    Signals escalation to the controller's global check, not necessarily a
    final denial.
    """


class Verdict(str, Enum):
    ALLOW = "allow"
    DENY = "deny"


class Reason(str, Enum):
    OK = "ok"
    NO_MATCHING_SUCCESSOR = "no_matching_successor"
    LOOP_COUNTER_EXCEEDED = "loop_counter_exceeded"
    INCOMPLETE_PATH = "incomplete_path"
    SOURCE_MISMATCH = "source_mismatch"
    NO_POLICY = "no_policy"
    RATE_LIMITED = "rate_limited"
    PREDECESSOR_MISSING = "predecessor_missing"
    FAIL_OPEN_VIOLATION = "fail_open_violation"


@dataclass(frozen=True)
class Decision:
    verdict: Verdict
    reason: Reason = Reason.OK
    detail: str = ""
    rewrite: bytes | None = None

    @property
    def allowed(self) -> bool:
        return self.verdict is Verdict.ALLOW


ALLOW = Decision(Verdict.ALLOW)


class Mode(str, Enum):
    FAIL_CLOSED = "closed"
    FAIL_OPEN = "open"


# A candidate is (node id, completed repetitions, offset into the current
# repetition's body).  offset == 0 means the last repetition is complete.
Candidate = tuple[str, int, int]


@dataclass
class EnforcementState:
    graph: LocalFlowGraph
    mode: Mode = Mode.FAIL_CLOSED
    needs_controller_check: bool = False
    frontier: set[Candidate] = field(default_factory=set)
    violations: list[tuple[int, Reason]] = field(default_factory=list)
    steps_seen: int = 0

    def live(self) -> bool:
        return bool(self.frontier)


def begin_execution(
    graph: LocalFlowGraph, in_source: str, mode: Mode = Mode.FAIL_CLOSED
) -> EnforcementState:
    """Start enforcement for one execution.  The entry marker must match the
    declared sender; an unknown marker admits any sender but flags the state
    for a controller-side check."""
    state = EnforcementState(graph=graph, mode=mode)
    state.frontier = {(graph.entry, 1, 0)}
    marker = graph.entry_source
    if marker == UNKNOWN_SOURCE:
        state.needs_controller_check = True
        return state
    if in_source != marker:
        raise SourceMismatch(
            f"{graph.function}: inbound request from {in_source!r}, expected {marker!r}"
        )
    return state


def _advance(
    graph: LocalFlowGraph, frontier: Iterable[Candidate], flow: Flow
) -> tuple[set[Candidate], bool]:
    """One NFA step.  Returns the new frontier plus whether any match failed
    purely because a loop counter was exhausted."""
    nodes = graph.nodes
    successor_map = graph.successor_map
    moved: set[Candidate] = set()
    counter_hit = False
    for node_id, reps, offset in frontier:
        node = nodes[node_id]
        body = node.unit
        if offset > 0:
            step = body[offset]
            if pattern_matches(step.url, step.op, flow):
                nxt = offset + 1
                if nxt == len(body):
                    moved.add((node_id, reps + 1, 0))
                else:
                    moved.add((node_id, reps, nxt))
            continue
        # Repetition complete: either repeat this node or enter a successor.
        if body:
            first = body[0]
            if pattern_matches(first.url, first.op, flow):
                if reps < node.counter:
                    if len(body) == 1:
                        moved.add((node_id, reps + 1, 0))
                    else:
                        moved.add((node_id, reps, 1))
                else:
                    counter_hit = True
        for succ_id in successor_map[node_id]:
            succ = nodes[succ_id]
            succ_body = succ.unit
            if not succ_body:
                continue
            first = succ_body[0]
            if pattern_matches(first.url, first.op, flow):
                if len(succ_body) == 1:
                    moved.add((succ_id, 1, 0))
                else:
                    moved.add((succ_id, 0, 1))
    return moved, counter_hit


def step(state: EnforcementState, flow: Flow) -> Decision:
    """Check one outbound flow against the graph.

    A denied flow is dropped but does not kill the execution: the frontier is
    left in place so later conforming flows can still proceed.  Fail-open
    downgrades the denial to an allow plus a recorded violation.
    """
    index = state.steps_seen
    state.steps_seen += 1
    moved, counter_hit = _advance(state.graph, state.frontier, flow)
    if moved:
        state.frontier = moved
        return ALLOW
    reason = (
        Reason.LOOP_COUNTER_EXCEEDED if counter_hit else Reason.NO_MATCHING_SUCCESSOR
    )
    state.violations.append((index, reason))
    if state.mode is Mode.FAIL_OPEN:
        return Decision(Verdict.ALLOW, Reason.FAIL_OPEN_VIOLATION, detail=reason.value)
    detail = f"{flow.op.value} {flow.url}"
    return Decision(Verdict.DENY, reason, detail=detail)


def _can_finish(graph: LocalFlowGraph, candidate: Candidate) -> bool:
    node_id, reps, offset = candidate
    if offset != 0:
        return False
    if node_id == graph.exit:
        return True
    return graph.exit in graph.successors(node_id)


def end_execution(state: EnforcementState) -> Decision:
    """Check that the execution completed a full entry-to-exit path."""
    for candidate in state.frontier:
        if _can_finish(state.graph, candidate):
            return ALLOW
    state.violations.append((state.steps_seen, Reason.INCOMPLETE_PATH))
    if state.mode is Mode.FAIL_OPEN:
        return Decision(
            Verdict.ALLOW, Reason.FAIL_OPEN_VIOLATION, detail=Reason.INCOMPLETE_PATH.value
        )
    return Decision(Verdict.DENY, Reason.INCOMPLETE_PATH)


def accepts(graph: LocalFlowGraph, steps: Sequence[Flow]) -> bool:
    """Whether a full flow sequence is a legal entry-to-exit path."""
    state = EnforcementState(graph=graph)
    state.frontier = {(graph.entry, 1, 0)}
    for flow in steps:
        if not step(state, flow).allowed:
            return False
    return end_execution(state).allowed


def linear_chain_graph(n_nodes: int) -> LocalFlowGraph:
    """A straight-line graph of ``n_nodes`` flow nodes, for benchmarking."""
    if n_nodes < 1:
        raise ValueError("need at least one node")
    nodes = {
        "entry": FlowNode(node_id="entry", kind=NodeKind.ENTRY, pattern="bench"),
        "exit": FlowNode(node_id="exit", kind=NodeKind.EXIT),
    }
    edges = set()
    previous = "entry"
    for i in range(1, n_nodes + 1):
        node_id = f"n{i}"
        nodes[node_id] = FlowNode(
            node_id=node_id,
            kind=NodeKind.FLOW,
            pattern=f"https://bench.local/step/{i}",
            op=HttpOp.GET,
        )
        edges.add((previous, node_id))
        previous = node_id
    edges.add((previous, "exit"))
    return LocalFlowGraph(function="bench", nodes=nodes, edges=frozenset(edges))


def bench_check(n_nodes: int, iterations: int) -> float:
    """Run ``iterations`` policy checks walking a linear chain of ``n_nodes``
    and return the elapsed wall time in seconds."""
    graph = linear_chain_graph(n_nodes)
    flows = [
        Flow(f"https://bench.local/step/{(i % n_nodes) + 1}", HttpOp.GET)
        for i in range(iterations)
    ]
    state = EnforcementState(graph=graph)
    state.frontier = {(graph.entry, 1, 0)}
    started = time.perf_counter()
    for i, flow in enumerate(flows):
        step(state, flow)
        if (i + 1) % n_nodes == 0:
            state.frontier = {(graph.entry, 1, 0)}
    return time.perf_counter() - started

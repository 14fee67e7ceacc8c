"""Policy bundle: everything a guard fleet and controller need to enforce
one application, built from recorded trace rounds and serialized as a single
JSON document."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .controller import RateLimitEntry
from .credential import CredentialPolicy
from .enforce import Mode
from .graphbuild import (
    DEFAULT_T_LCP,
    Topology,
    build_function_graph,
    build_global_graph,
)
from .model import (
    FlowEvent,
    GlobalFlowGraph,
    LocalFlowGraph,
    extract_app_trace,
    extract_sends,
    extract_traces,
)


@dataclass
class PolicyBundle:
    t_lcp: int = DEFAULT_T_LCP
    functions: dict[str, LocalFlowGraph] = field(default_factory=dict)
    global_graph: GlobalFlowGraph | None = None
    fail_mode: Mode = Mode.FAIL_CLOSED
    credential: CredentialPolicy | None = None
    rate_limits: tuple[RateLimitEntry, ...] = ()

    def to_dict(self) -> dict:
        record: dict = {
            "t_lcp": self.t_lcp,
            "fail_mode": self.fail_mode.value,
            "functions": {
                name: self.functions[name].to_dict()
                for name in sorted(self.functions)
            },
        }
        if self.global_graph is not None:
            record["global"] = self.global_graph.to_dict()
        if self.credential is not None:
            record["credential"] = self.credential.to_dict()
        if self.rate_limits:
            record["rate_limits"] = [e.to_dict() for e in self.rate_limits]
        return record

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping) -> "PolicyBundle":
        return cls(
            t_lcp=int(data.get("t_lcp", DEFAULT_T_LCP)),
            functions={
                name: LocalFlowGraph.from_dict(raw)
                for name, raw in data.get("functions", {}).items()
            },
            global_graph=(
                GlobalFlowGraph.from_dict(data["global"]) if "global" in data else None
            ),
            fail_mode=Mode(data.get("fail_mode", "closed")),
            credential=(
                CredentialPolicy.from_dict(data["credential"])
                if "credential" in data
                else None
            ),
            rate_limits=tuple(
                RateLimitEntry.from_dict(e) for e in data.get("rate_limits", ())
            ),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(self.to_json())

    @classmethod
    def load(cls, path) -> "PolicyBundle":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))


def build_policies(
    execution_logs: Sequence[tuple[str, Sequence[FlowEvent]]],
    topology: Topology | None = None,
    t_lcp: int = DEFAULT_T_LCP,
    fail_mode: Mode = Mode.FAIL_CLOSED,
) -> PolicyBundle:
    """Build local graphs per function plus the global graph from recorded
    application executions (one event list per execution)."""
    traces_by_function: dict[str, list] = {}
    app_traces = []
    sends_by_execution: dict[str, dict] = {}
    for execution_id, events in execution_logs:
        for trace in extract_traces(events):
            traces_by_function.setdefault(trace.function, []).append(trace)
        app_traces.append(extract_app_trace(events, execution_id))
        sends_by_execution[execution_id] = extract_sends(events)
    functions = {
        name: build_function_graph(traces, t_lcp)
        for name, traces in traces_by_function.items()
    }
    global_graph = (
        build_global_graph(app_traces, topology, sends_by_execution)
        if app_traces
        else None
    )
    return PolicyBundle(
        t_lcp=t_lcp,
        functions=functions,
        global_graph=global_graph,
        fail_mode=fail_mode,
    )

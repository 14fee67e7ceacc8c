"""Declarative application specifications for the simulator.

An application is a set of scripted functions plus scripted services.
Services answer requests from canned response rules and may trigger other
functions; scripts are small directive lists whose repeat counts and URL
lists can depend on the (seeded) per-round input.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from ..graphbuild import Topology
from ..model import FlowguardError, HttpOp


class ScriptError(FlowguardError):
    """A behavior script referenced something the input does not provide."""


@dataclass(frozen=True)
class SendDirective:
    """One outbound request, repeated ``repeat`` times.

    ``repeat`` may be an int or ``$key`` naming an input field.  ``body`` and
    ``url`` are templates; ``{n}`` is the 1-based repetition index and other
    ``{name}`` slots resolve from captured variables and the input.
    ``capture`` stores a regex group from the response body into a variable.
    """

    url: str
    op: HttpOp
    repeat: int | str = 1
    body: str | None = None
    capture: tuple[str, str] | None = None
    delay_ns: int = 0

    def to_dict(self) -> dict:
        record: dict = {"type": "send", "url": self.url, "op": self.op.value}
        if self.repeat != 1:
            record["repeat"] = self.repeat
        if self.body is not None:
            record["body"] = self.body
        if self.capture is not None:
            record["capture"] = {"var": self.capture[0], "regex": self.capture[1]}
        if self.delay_ns:
            record["delay_ns"] = self.delay_ns
        return record


@dataclass(frozen=True)
class SendEachDirective:
    """One request per URL in an input-supplied list (``$key``)."""

    urls_key: str
    op: HttpOp
    body: str | None = None
    delay_ns: int = 0

    def to_dict(self) -> dict:
        record: dict = {
            "type": "send_each",
            "urls": self.urls_key,
            "op": self.op.value,
        }
        if self.body is not None:
            record["body"] = self.body
        if self.delay_ns:
            record["delay_ns"] = self.delay_ns
        return record


@dataclass(frozen=True)
class ReturnDirective:
    def to_dict(self) -> dict:
        return {"type": "return"}


Directive = SendDirective | SendEachDirective | ReturnDirective


def directive_from_dict(data: Mapping) -> Directive:
    kind = data.get("type")
    if kind == "send":
        capture = None
        if "capture" in data:
            capture = (data["capture"]["var"], data["capture"]["regex"])
        return SendDirective(
            url=str(data["url"]),
            op=HttpOp(data["op"]),
            repeat=data.get("repeat", 1),
            body=data.get("body"),
            capture=capture,
            delay_ns=int(data.get("delay_ns", 0)),
        )
    if kind == "send_each":
        return SendEachDirective(
            urls_key=str(data["urls"]),
            op=HttpOp(data["op"]),
            body=data.get("body"),
            delay_ns=int(data.get("delay_ns", 0)),
        )
    if kind == "return":
        return ReturnDirective()
    raise ScriptError(f"unknown directive type {kind!r}")


@dataclass(frozen=True)
class FunctionSpec:
    """A scripted function.  ``source`` names the expected sender of its
    inbound request ("user" for entry functions, else a service or function
    name).  ``entry_url`` makes the function directly invokable."""

    name: str
    source: str
    script: tuple[Directive, ...]
    entry_url: str | None = None

    def to_dict(self) -> dict:
        record: dict = {
            "name": self.name,
            "source": self.source,
            "script": [d.to_dict() for d in self.script],
        }
        if self.entry_url:
            record["entry_url"] = self.entry_url
        return record


@dataclass(frozen=True)
class ResponseRule:
    """Service response for requests matching (op, path prefix).  ``echo``
    copies a regex group from the request body into the ``{match}`` slot."""

    op: HttpOp
    path_prefix: str
    body: str = "ok"
    echo: str | None = None

    def to_dict(self) -> dict:
        record: dict = {
            "op": self.op.value,
            "path_prefix": self.path_prefix,
            "body": self.body,
        }
        if self.echo:
            record["echo"] = self.echo
        return record


@dataclass(frozen=True)
class TriggerRule:
    op: HttpOp
    path_prefix: str
    target: str

    def to_dict(self) -> dict:
        return {
            "op": self.op.value,
            "path_prefix": self.path_prefix,
            "target": self.target,
        }


@dataclass(frozen=True)
class ServiceSpec:
    name: str
    base_url: str
    responses: tuple[ResponseRule, ...] = ()
    triggers: tuple[TriggerRule, ...] = ()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "base_url": self.base_url,
            "responses": [r.to_dict() for r in self.responses],
            "triggers": [t.to_dict() for t in self.triggers],
        }


@dataclass(frozen=True)
class InputSpec:
    """Seeded input field sampler: ints, choices, constants, or a list of
    URLs drawn from a numbered pool."""

    kind: str
    params: Mapping[str, object] = field(default_factory=dict)

    def sample(self, rng: random.Random):
        if self.kind == "int":
            return rng.randint(int(self.params["min"]), int(self.params["max"]))
        if self.kind == "choice":
            return rng.choice(list(self.params["values"]))
        if self.kind == "const":
            return self.params["value"]
        if self.kind == "url_pool":
            base = str(self.params["base"])
            pool = int(self.params["pool"])
            pad = int(self.params.get("pad", 4))
            count = rng.randint(
                int(self.params.get("count_min", 1)),
                int(self.params.get("count_max", pool)),
            )
            ids = rng.sample(range(1, pool + 1), count)
            return [f"{base}{i:0{pad}d}" for i in ids]
        raise ScriptError(f"unknown input kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, data: Mapping) -> "InputSpec":
        params = {k: v for k, v in data.items() if k != "kind"}
        return cls(kind=str(data["kind"]), params=params)


@dataclass(frozen=True)
class AppSpec:
    name: str
    functions: tuple[FunctionSpec, ...]
    services: tuple[ServiceSpec, ...] = ()
    entry_functions: tuple[str, ...] = ()
    input_model: Mapping[str, InputSpec] = field(default_factory=dict)

    def __post_init__(self) -> None:
        names = {f.name for f in self.functions}
        if not self.entry_functions:
            raise ValueError("an application needs at least one entry function")
        for entry in self.entry_functions:
            if entry not in names:
                raise ValueError(f"entry function {entry!r} not defined")
        for service in self.services:
            for trigger in service.triggers:
                if trigger.target not in names:
                    raise ValueError(
                        f"trigger target {trigger.target!r} not defined"
                    )

    def function(self, name: str) -> FunctionSpec:
        for spec in self.functions:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def service_for_url(self, url: str) -> ServiceSpec | None:
        best: ServiceSpec | None = None
        for service in self.services:
            if url.startswith(service.base_url):
                if best is None or len(service.base_url) > len(best.base_url):
                    best = service
        return best

    def function_for_entry_url(self, url: str) -> FunctionSpec | None:
        for spec in self.functions:
            if spec.entry_url and url == spec.entry_url:
                return spec
        return None

    def topology(self) -> Topology:
        return Topology(
            services={s.name: s.base_url for s in self.services},
            triggers={
                s.name: tuple(t.target for t in s.triggers) for s in self.services
            },
            entry_urls={
                f.entry_url: f.name for f in self.functions if f.entry_url
            },
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "entry_functions": list(self.entry_functions),
            "functions": [f.to_dict() for f in self.functions],
            "services": [s.to_dict() for s in self.services],
            "input_model": {k: v.to_dict() for k, v in self.input_model.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "AppSpec":
        functions = tuple(
            FunctionSpec(
                name=str(f["name"]),
                source=str(f["source"]),
                script=tuple(directive_from_dict(d) for d in f["script"]),
                entry_url=f.get("entry_url"),
            )
            for f in data["functions"]
        )
        services = tuple(
            ServiceSpec(
                name=str(s["name"]),
                base_url=str(s["base_url"]),
                responses=tuple(
                    ResponseRule(
                        op=HttpOp(r["op"]),
                        path_prefix=str(r["path_prefix"]),
                        body=str(r.get("body", "ok")),
                        echo=r.get("echo"),
                    )
                    for r in s.get("responses", ())
                ),
                triggers=tuple(
                    TriggerRule(
                        op=HttpOp(t["op"]),
                        path_prefix=str(t["path_prefix"]),
                        target=str(t["target"]),
                    )
                    for t in s.get("triggers", ())
                ),
            )
            for s in data.get("services", ())
        )
        return cls(
            name=str(data["name"]),
            functions=functions,
            services=services,
            entry_functions=tuple(data.get("entry_functions", ())),
            input_model={
                k: InputSpec.from_dict(v)
                for k, v in data.get("input_model", {}).items()
            },
        )

    @classmethod
    def from_json_file(cls, path) -> "AppSpec":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))

    def to_json_file(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            json.dump(self.to_dict(), handle, indent=2)
            handle.write("\n")


def sample_inputs(app: AppSpec, rng: random.Random) -> dict:
    return {key: spec.sample(rng) for key, spec in sorted(app.input_model.items())}

"""Credential management: keep real secrets out of function code.

Outbound authentication requests are rebuilt from a template so the wire
carries the real credentials while the function only ever held dummies;
tokens in auth responses are swapped for random same-length stand-ins, and
the stand-ins are swapped back on later API calls.  Messages that match
nothing pass through byte-identical.
"""

from __future__ import annotations

import json
import random
import re
import string
from dataclasses import dataclass, field
from typing import Mapping, Sequence
from urllib.parse import parse_qsl, urlencode

from .enforce import ALLOW, Decision, Verdict
from .model import FlowguardError, HttpOp, normalize_url


class TemplateError(FlowguardError):
    """A template slot could not be filled."""


class TokenNotFound(FlowguardError):
    """The token extractor matched nothing in an awaited auth response."""


class UnknownOperation(FlowguardError):
    """The API description has no such operation."""


class UnsupportedSchema(FlowguardError):
    """The operation's request body cannot be templated."""


_ALPHANUMERIC = string.ascii_letters + string.digits


@dataclass(frozen=True)
class MessageTemplate:
    """Body skeleton: which fields carry credentials and which pass through
    from the original message.  ``format`` is "json", "form", or "header"
    (the last rebuilds only the Authorization header value)."""

    format: str
    fields: tuple[tuple[str, str], ...] = ()  # (name, "credential" | "original")
    header_value: str = ""

    def to_dict(self) -> dict:
        if self.format == "header":
            return {"format": "header", "value": self.header_value}
        return {
            "format": self.format,
            "fields": [{"name": n, "source": s} for n, s in self.fields],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MessageTemplate":
        fmt = str(data["format"])
        if fmt == "header":
            return cls(format=fmt, header_value=str(data["value"]))
        if fmt not in ("json", "form"):
            raise UnsupportedSchema(f"unknown template format {fmt!r}")
        fields = tuple(
            (str(f["name"]), str(f["source"])) for f in data.get("fields", ())
        )
        return cls(format=fmt, fields=fields)


@dataclass(frozen=True)
class CredentialPolicy:
    auth_url: str
    auth_op: HttpOp
    credentials: Mapping[str, str]
    template: MessageTemplate
    token_extractor: str
    other_reqs: tuple[tuple[str, HttpOp], ...] = ()
    header_mode: bool = False

    def __post_init__(self) -> None:
        re.compile(self.token_extractor)
        if self.template.format != "header":
            for name, source in self.template.fields:
                if source == "credential" and name not in self.credentials:
                    raise TemplateError(f"template credential {name!r} not configured")

    def matches_other(self, url: str, op: HttpOp) -> bool:
        for pattern, pattern_op in self.other_reqs:
            if op is not pattern_op:
                continue
            if pattern.endswith("*"):
                if url.startswith(pattern[:-1]):
                    return True
            elif url == pattern:
                return True
        return False

    def to_dict(self) -> dict:
        return {
            "auth_url": self.auth_url,
            "auth_op": self.auth_op.value,
            "credentials": dict(self.credentials),
            "template": self.template.to_dict(),
            "token_extractor": self.token_extractor,
            "other_reqs": [[u, o.value] for u, o in self.other_reqs],
            "header_mode": self.header_mode,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CredentialPolicy":
        return cls(
            auth_url=normalize_url(data["auth_url"]),
            auth_op=HttpOp(data["auth_op"]),
            credentials=dict(data["credentials"]),
            template=MessageTemplate.from_dict(data["template"]),
            token_extractor=str(data["token_extractor"]),
            other_reqs=tuple(
                (u, HttpOp(o)) for u, o in data.get("other_reqs", ())
            ),
            header_mode=bool(data.get("header_mode", False)),
        )

    @classmethod
    def from_json_file(cls, path) -> "CredentialPolicy":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))


@dataclass
class TokenVault:
    """Per-execution bijection between obfuscated and real tokens, plus the
    awaiting-response handshake state.  Discarded when the execution exits."""

    rng: random.Random = field(default_factory=random.Random)
    tokens: dict[str, str] = field(default_factory=dict)
    awaiting: bool = False
    auth_session: str = ""

    def obfuscate(self, real: str) -> str:
        for existing_obf, existing_real in self.tokens.items():
            if existing_real == real:
                return existing_obf
        while True:
            candidate = "".join(
                self.rng.choice(_ALPHANUMERIC) for _ in range(len(real))
            )
            if candidate not in self.tokens and candidate != real:
                self.tokens[candidate] = real
                return candidate

    def real_for(self, obfuscated: str) -> str | None:
        return self.tokens.get(obfuscated)


# ---------------------------------------------------------------------------
# Minimal HTTP/1.1 message handling (bytes in, bytes out)


@dataclass
class HttpMessage:
    start_line: bytes
    headers: list[tuple[bytes, bytes]]
    body: bytes

    @classmethod
    def parse(cls, message: bytes) -> "HttpMessage":
        head, sep, body = message.partition(b"\r\n\r\n")
        if not sep:
            raise ValueError("not an HTTP/1.1 message (no blank line)")
        lines = head.split(b"\r\n")
        headers: list[tuple[bytes, bytes]] = []
        for line in lines[1:]:
            name, _, value = line.partition(b":")
            headers.append((name, value.lstrip(b" \t")))
        return cls(start_line=lines[0], headers=headers, body=body)

    def header(self, name: str) -> bytes | None:
        wanted = name.lower().encode()
        for header_name, value in self.headers:
            if header_name.lower() == wanted:
                return value
        return None

    def with_body(self, body: bytes) -> "HttpMessage":
        headers = []
        replaced = False
        for name, value in self.headers:
            if name.lower() == b"content-length":
                headers.append((name, str(len(body)).encode()))
                replaced = True
            else:
                headers.append((name, value))
        if not replaced and body:
            headers.append((b"Content-Length", str(len(body)).encode()))
        return HttpMessage(start_line=self.start_line, headers=headers, body=body)

    def with_header(self, name: str, value: bytes) -> "HttpMessage":
        wanted = name.lower().encode()
        headers = [
            (n, value if n.lower() == wanted else v) for n, v in self.headers
        ]
        if all(n.lower() != wanted for n, _ in self.headers):
            headers.append((name.encode(), value))
        return HttpMessage(start_line=self.start_line, headers=headers, body=self.body)

    def encode(self) -> bytes:
        head = b"\r\n".join(
            [self.start_line] + [n + b": " + v for n, v in self.headers]
        )
        return head + b"\r\n\r\n" + self.body


def _render_body(
    template: MessageTemplate,
    credentials: Mapping[str, str],
    original_body: bytes,
) -> bytes:
    if template.format == "json":
        try:
            original = json.loads(original_body.decode("utf-8")) if original_body else {}
        except (ValueError, UnicodeDecodeError):
            original = {}
        rebuilt = {}
        for name, source in template.fields:
            if source == "credential":
                try:
                    rebuilt[name] = credentials[name]
                except KeyError as exc:
                    raise TemplateError(f"no credential for slot {name!r}") from exc
            else:
                if isinstance(original, dict) and name in original:
                    rebuilt[name] = original[name]
        return json.dumps(rebuilt, sort_keys=True).encode("utf-8")
    if template.format == "form":
        original_pairs = dict(
            parse_qsl(original_body.decode("utf-8"), keep_blank_values=True)
        )
        rebuilt_pairs = []
        for name, source in template.fields:
            if source == "credential":
                try:
                    rebuilt_pairs.append((name, credentials[name]))
                except KeyError as exc:
                    raise TemplateError(f"no credential for slot {name!r}") from exc
            elif name in original_pairs:
                rebuilt_pairs.append((name, original_pairs[name]))
        return urlencode(rebuilt_pairs).encode("utf-8")
    raise UnsupportedSchema(f"cannot render format {template.format!r}")


_HEADER_SLOT_RE = re.compile(r"\$\{([^}]+)\}")


def _render_header(template: MessageTemplate, credentials: Mapping[str, str]) -> str:
    def fill(match: re.Match) -> str:
        name = match.group(1)
        if name not in credentials:
            raise TemplateError(f"no credential for slot {name!r}")
        return credentials[name]

    return _HEADER_SLOT_RE.sub(fill, template.header_value)


def on_send(
    policy: CredentialPolicy,
    vault: TokenVault,
    message: bytes,
    url: str,
    op: HttpOp,
    session: str = "",
) -> Decision:
    """Process one outbound request.

    Auth requests are rebuilt with the real credentials; requests matching
    the policy's other_reqs have obfuscated tokens swapped back to real ones;
    everything else passes through untouched.
    """
    if url == policy.auth_url and op is policy.auth_op:
        parsed = HttpMessage.parse(message)
        if policy.header_mode:
            rebuilt = parsed.with_header(
                "Authorization", _render_header(policy.template, policy.credentials).encode()
            )
        else:
            body = _render_body(policy.template, policy.credentials, parsed.body)
            rebuilt = parsed.with_body(body)
        vault.awaiting = True
        vault.auth_session = session
        return Decision(Verdict.ALLOW, rewrite=rebuilt.encode())
    if policy.matches_other(url, op):
        rewritten = message
        for obfuscated, real in vault.tokens.items():
            rewritten = rewritten.replace(obfuscated.encode(), real.encode())
        if rewritten != message:
            return Decision(Verdict.ALLOW, rewrite=rewritten)
        return ALLOW
    return ALLOW


def on_recv(
    policy: CredentialPolicy,
    vault: TokenVault,
    message: bytes,
    url: str,
    op: HttpOp,
    session: str = "",
) -> Decision:
    """Process one inbound response.

    The awaited auth response has its token extracted, stored, and replaced
    with a fresh random stand-in of equal length; other matching responses
    have any real token swapped for its stand-in.
    """
    if vault.awaiting and session == vault.auth_session:
        vault.awaiting = False
        parsed = HttpMessage.parse(message)
        match = re.search(policy.token_extractor, parsed.body.decode("utf-8", "replace"))
        if not match or not match.groups():
            raise TokenNotFound(
                f"extractor {policy.token_extractor!r} found no token"
            )
        real = match.group(1)
        obfuscated = vault.obfuscate(real)
        rewritten = message.replace(real.encode(), obfuscated.encode())
        return Decision(Verdict.ALLOW, rewrite=rewritten)
    if policy.matches_other(url, op):
        rewritten = message
        for obfuscated, real in vault.tokens.items():
            rewritten = rewritten.replace(real.encode(), obfuscated.encode())
        if rewritten != message:
            return Decision(Verdict.ALLOW, rewrite=rewritten)
        return ALLOW
    return ALLOW


# ---------------------------------------------------------------------------
# Template generation from an API description


def template_from_api_spec(
    api_doc: Mapping,
    operation_id: str,
    credential_names: Sequence[str] = (),
) -> MessageTemplate:
    """Build a message template from a simplified API description.

    The document holds ``operations[]`` with ``id`` and ``request_body =
    {format?, fields: [{name, type, required}]}``.  Required string fields
    whose names appear in the credential map become placeholder slots; every
    other field passes through from the original message.
    """
    operation = None
    for candidate in api_doc.get("operations", ()):
        if candidate.get("id") == operation_id:
            operation = candidate
            break
    if operation is None:
        raise UnknownOperation(operation_id)
    request_body = operation.get("request_body")
    if not isinstance(request_body, Mapping) or "fields" not in request_body:
        raise UnsupportedSchema(f"operation {operation_id!r} has no request body schema")
    fmt = request_body.get("format", "json")
    if fmt not in ("json", "form"):
        raise UnsupportedSchema(f"unsupported body format {fmt!r}")
    wanted = set(credential_names)
    fields: list[tuple[str, str]] = []
    for raw in request_body["fields"]:
        name = str(raw["name"])
        is_credential = (
            raw.get("type") == "string"
            and bool(raw.get("required"))
            and name in wanted
        )
        fields.append((name, "credential" if is_credential else "original"))
    return MessageTemplate(format=fmt, fields=tuple(fields))

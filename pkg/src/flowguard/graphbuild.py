"""Turn execution traces into enforceable flow graphs.

The pipeline is: group URLs by longest common prefix to absorb user-input
variance, fold consecutive repeated subsequences into counted units, merge
traces that share a unit sequence, then construct an acyclic NFA whose paths
are exactly the merged traces (shared prefixes and suffixes collapse into
shared nodes).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .model import (
    ENTRY_ID,
    EXIT_ID,
    AppTrace,
    EdgeLabel,
    Flow,
    FlowguardError,
    FlowNode,
    GlobalEdge,
    GlobalFlowGraph,
    HttpOp,
    LocalFlowGraph,
    NodeKind,
    Trace,
    topo_sort,
)

DEFAULT_T_LCP = 1


class EmptyTraceSet(FlowguardError):
    """Raised when asked to build a graph from no traces."""


# ---------------------------------------------------------------------------
# LCP URL grouping


@dataclass(frozen=True)
class UrlGroup:
    """A cluster of related URLs and the prefix pattern that stands for it."""

    members: frozenset[str]
    lcp: str
    generalized: bool

    @property
    def pattern(self) -> str:
        if self.generalized:
            return self.lcp + "*"
        (only,) = self.members if len(self.members) == 1 else (self.lcp,)
        return only


def common_prefix(a: str, b: str) -> str:
    limit = min(len(a), len(b))
    i = 0
    while i < limit and a[i] == b[i]:
        i += 1
    return a[:i]


def _common_prefix_all(urls: Sequence[str]) -> str:
    prefix = urls[0]
    for url in urls[1:]:
        prefix = common_prefix(prefix, url)
        if not prefix:
            break
    return prefix


def _strip_scheme(url: str) -> str:
    marker = url.find("://")
    return url[marker + 3 :] if marker >= 0 else url


def lcp_group(urls: Iterable[str], t_lcp: int = DEFAULT_T_LCP) -> list[UrlGroup]:
    """Partition normalized URLs into longest-common-prefix groups.

    Two URLs join the same group when their shared prefix is at least as
    long as either one's shared prefix with every other URL in the set
    (all-pairs comparison, closed transitively).  The scheme is ignored when
    comparing, and a pair sharing nothing beyond the scheme never groups.
    Groups with more than ``t_lcp`` unique members are generalized to
    ``lcp*`` patterns.
    """
    unique = sorted(set(urls))
    if not unique:
        raise EmptyTraceSet("no URLs to group")
    if t_lcp < 1:
        raise ValueError("t_lcp must be >= 1")
    stripped = [_strip_scheme(u) for u in unique]
    n = len(unique)
    lcp_len = [
        [len(common_prefix(stripped[i], stripped[j])) for j in range(n)]
        for i in range(n)
    ]
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            shared = lcp_len[i][j]
            if shared == 0:
                continue
            others = (k for k in range(n) if k != i and k != j)
            if all(
                shared >= lcp_len[i][k] and shared >= lcp_len[j][k] for k in others
            ):
                parent[find(i)] = find(j)

    clusters: dict[int, list[str]] = {}
    for i, url in enumerate(unique):
        clusters.setdefault(find(i), []).append(url)
    groups: list[UrlGroup] = []
    for cluster in clusters.values():
        members = frozenset(cluster)
        lcp = _common_prefix_all(cluster)
        groups.append(
            UrlGroup(members=members, lcp=lcp, generalized=len(members) > t_lcp)
        )
    groups.sort(key=lambda g: min(g.members))
    return groups


def rewrite_map(groups: Iterable[UrlGroup]) -> dict[str, str]:
    """URL -> pattern mapping induced by the groups (identity when exact)."""
    mapping: dict[str, str] = {}
    for group in groups:
        for url in group.members:
            mapping[url] = group.pattern if group.generalized else url
    return mapping


# ---------------------------------------------------------------------------
# Repeated-subsequence compression


@dataclass(frozen=True)
class Unit:
    """A flow or an order-sensitive flow sequence, repeated ``counter`` times."""

    body: tuple[Flow, ...]
    counter: int

    def signature(self) -> tuple:
        return tuple(f.key() for f in self.body)


@dataclass(frozen=True)
class CompressedTrace:
    function: str
    source: str
    items: tuple[Unit, ...]

    def signature(self) -> tuple:
        """Unit sequence ignoring counters; the merge key."""
        return tuple(u.signature() for u in self.items)


def expand(trace: CompressedTrace) -> tuple[Flow, ...]:
    steps: list[Flow] = []
    for unit in trace.items:
        steps.extend(unit.body * unit.counter)
    return tuple(steps)


def compress_steps(steps: Sequence[Flow]) -> tuple[Unit, ...]:
    """Fold maximal runs of consecutive repeated subsequences into counted
    units, trying window lengths from floor(len/2) down to 1.

    Longer windows are folded first so a repetition like ABDABD survives as
    one grouped unit instead of being broken apart by shorter folds; at each
    window length the scan is greedy left to right over spans no earlier fold
    has claimed.
    """
    # Each item is either a raw Flow or an already-folded Unit.
    items: list[Flow | Unit] = list(steps)
    for window in range(len(steps) // 2, 0, -1):
        items = _fold_spans(items, window)
    out: list[Unit] = []
    for item in items:
        if isinstance(item, Unit):
            out.append(item)
        else:
            out.append(Unit(body=(item,), counter=1))
    return tuple(out)


def _fold_spans(items: list, window: int) -> list:
    result: list = []
    span: list[Flow] = []
    for item in items:
        if isinstance(item, Unit):
            result.extend(_fold_run(span, window))
            span = []
            result.append(item)
        else:
            span.append(item)
    result.extend(_fold_run(span, window))
    return result


def _fold_run(span: list[Flow], window: int) -> list:
    if len(span) < 2 * window:
        return list(span)
    out: list = []
    i = 0
    while i < len(span):
        reps = 1
        while span[i : i + window] == span[i + reps * window : i + (reps + 1) * window] and i + (
            reps + 1
        ) * window <= len(span):
            reps += 1
        if window <= len(span) - i and reps >= 2:
            out.append(Unit(body=tuple(span[i : i + window]), counter=reps))
            i += reps * window
        else:
            out.append(span[i])
            i += 1
    return out


def compress_trace(trace: Trace) -> CompressedTrace:
    return CompressedTrace(
        function=trace.function,
        source=trace.source,
        items=compress_steps(trace.steps),
    )


def merge_traces(compressed: Sequence[CompressedTrace]) -> list[CompressedTrace]:
    """Collapse traces with identical unit sequences; each unit keeps the
    maximum counter seen across the collapsed traces.  First-seen order."""
    merged: dict[tuple, CompressedTrace] = {}
    for trace in compressed:
        key = trace.signature()
        existing = merged.get(key)
        if existing is None:
            merged[key] = trace
            continue
        items = tuple(
            Unit(body=old.body, counter=max(old.counter, new.counter))
            for old, new in zip(existing.items, trace.items)
        )
        merged[key] = CompressedTrace(
            function=existing.function, source=existing.source, items=items
        )
    return list(merged.values())


# ---------------------------------------------------------------------------
# Local graph construction


def _unit_to_node(node_id: str, unit: Unit) -> FlowNode:
    if len(unit.body) == 1:
        flow = unit.body[0]
        return FlowNode(
            node_id=node_id,
            kind=NodeKind.FLOW,
            pattern=flow.url,
            op=flow.op,
            counter=unit.counter,
        )
    return FlowNode(
        node_id=node_id,
        kind=NodeKind.GROUP,
        pattern=unit.body[0].url,
        op=unit.body[0].op,
        counter=unit.counter,
        group_body=unit.body,
    )


def _node_signature(unit: Unit) -> tuple:
    return (unit.signature(), unit.counter)


@dataclass
class _Builder:
    nodes: dict[str, tuple[Unit | None, str]] = field(default_factory=dict)
    edges: set[tuple[str, str]] = field(default_factory=set)
    chains_of: dict[str, frozenset[int]] = field(default_factory=dict)
    counter: int = 0

    def new_node(self, unit: Unit | None, kind: str, chains: frozenset[int]) -> str:
        node_id = f"t{self.counter}"
        self.counter += 1
        self.nodes[node_id] = (unit, kind)
        self.chains_of[node_id] = chains
        return node_id


def _build_prefix_trie(
    builder: _Builder,
    parent: str,
    suffixes: list[tuple[int, tuple[Unit, ...]]],
    exit_id: str,
) -> None:
    finished = [idx for idx, units in suffixes if not units]
    if finished:
        builder.edges.add((parent, exit_id))
    remaining = [(idx, units) for idx, units in suffixes if units]
    groups: dict[tuple, list[tuple[int, tuple[Unit, ...]]]] = {}
    for idx, units in remaining:
        groups.setdefault(_node_signature(units[0]), []).append((idx, units))
    for signature in sorted(groups):
        bucket = groups[signature]
        chains = frozenset(idx for idx, _ in bucket)
        node_id = builder.new_node(bucket[0][1][0], "unit", chains)
        builder.edges.add((parent, node_id))
        _build_prefix_trie(
            builder,
            node_id,
            [(idx, units[1:]) for idx, units in bucket],
            exit_id,
        )


def _merge_suffixes(builder: _Builder, exit_id: str) -> None:
    """Merge same-signature predecessors that funnel into an already-merged
    node, provided each keeps a single path to the exit."""
    worklist = [exit_id]
    while worklist:
        target = worklist.pop(0)
        preds = [src for src, dst in builder.edges if dst == target]
        groups: dict[tuple, list[str]] = {}
        for pred in preds:
            unit, kind = builder.nodes[pred]
            if kind != "unit":
                continue
            out_edges = {dst for src, dst in builder.edges if src == pred}
            if out_edges != {target}:
                continue
            groups.setdefault(_node_signature(unit), []).append(pred)
        for signature in sorted(groups):
            bucket = sorted(groups[signature])
            if len(bucket) < 2:
                continue
            chain_sets = [builder.chains_of[p] for p in bucket]
            union: set[int] = set()
            disjoint = True
            for chains in chain_sets:
                if union & chains:
                    disjoint = False
                    break
                union |= chains
            if not disjoint:
                continue
            survivor = bucket[0]
            for other in bucket[1:]:
                for src, dst in list(builder.edges):
                    if dst == other:
                        builder.edges.discard((src, dst))
                        builder.edges.add((src, survivor))
                    elif src == other:
                        builder.edges.discard((src, dst))
                del builder.nodes[other]
                del builder.chains_of[other]
            builder.chains_of[survivor] = frozenset(union)
            worklist.append(survivor)


def build_local_graph(
    function: str,
    merged: Sequence[CompressedTrace],
    groups: Sequence[UrlGroup] | None = None,
) -> LocalFlowGraph:
    """Construct the acyclic NFA accepting every merged trace.

    Per-trace chains share one entry and one exit.  Nodes merge when they
    carry the same (pattern, op, counter, body) and the merge preserves a
    single path from the entry (shared prefixes) or to the exit (shared
    suffixes); ties resolve in signature order so rebuilding the same input
    yields a byte-identical graph.
    """
    if not merged:
        raise EmptyTraceSet(f"no traces for function {function!r}")
    mapping = rewrite_map(groups) if groups else {}

    def rewritten(unit: Unit) -> Unit:
        body = tuple(Flow(mapping.get(f.url, f.url), f.op) for f in unit.body)
        return Unit(body=body, counter=unit.counter)

    chains = [tuple(rewritten(u) for u in trace.items) for trace in merged]
    sources = {trace.source for trace in merged}
    entry_source = sources.pop() if len(sources) == 1 else "?"

    builder = _Builder()
    all_chain_ids = frozenset(range(len(chains)))
    entry = builder.new_node(None, "entry", all_chain_ids)
    exit_ = builder.new_node(None, "exit", all_chain_ids)
    _build_prefix_trie(
        builder, entry, [(i, chain) for i, chain in enumerate(chains)], exit_
    )
    _merge_suffixes(builder, exit_)

    # Relabel canonically: topological order with deterministic tie-breaks.
    order = topo_sort(set(builder.nodes), builder.edges)
    rename: dict[str, str] = {entry: ENTRY_ID, exit_: EXIT_ID}
    seq = 0
    for node_id in order:
        if node_id in (entry, exit_):
            continue
        seq += 1
        rename[node_id] = f"n{seq}"

    nodes: dict[str, FlowNode] = {
        ENTRY_ID: FlowNode(node_id=ENTRY_ID, kind=NodeKind.ENTRY, pattern=entry_source),
        EXIT_ID: FlowNode(node_id=EXIT_ID, kind=NodeKind.EXIT),
    }
    for node_id, (unit, kind) in builder.nodes.items():
        if kind != "unit":
            continue
        nodes[rename[node_id]] = _unit_to_node(rename[node_id], unit)
    edges = frozenset((rename[s], rename[d]) for s, d in builder.edges)
    graph = LocalFlowGraph(function=function, nodes=nodes, edges=edges)
    graph.validate()
    return graph


def build_function_graph(
    traces: Sequence[Trace], t_lcp: int = DEFAULT_T_LCP
) -> LocalFlowGraph:
    """Full pipeline for one function: LCP-group its URLs, rewrite, compress,
    merge, and build."""
    if not traces:
        raise EmptyTraceSet("no traces")
    function = traces[0].function
    urls = {flow.url for trace in traces for flow in trace.steps}
    groups = lcp_group(urls, t_lcp) if urls else []
    mapping = rewrite_map(groups)
    compressed = []
    for trace in traces:
        steps = tuple(Flow(mapping.get(f.url, f.url), f.op) for f in trace.steps)
        compressed.append(
            CompressedTrace(
                function=trace.function,
                source=trace.source,
                items=compress_steps(steps),
            )
        )
    return build_local_graph(function, merge_traces(compressed), groups)


# ---------------------------------------------------------------------------
# Global graph construction


@dataclass(frozen=True)
class Topology:
    """Declared service endpoints: base URLs, which functions each service can
    trigger, and direct-invocation URLs of functions."""

    services: Mapping[str, str] = field(default_factory=dict)
    triggers: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    entry_urls: Mapping[str, str] = field(default_factory=dict)

    def service_for_url(self, url: str) -> str | None:
        best: str | None = None
        best_len = -1
        for name, base in self.services.items():
            if url.startswith(base) and len(base) > best_len:
                best, best_len = name, len(base)
        return best

    def function_for_url(self, url: str) -> str | None:
        return self.entry_urls.get(url)


def build_global_graph(
    app_traces: Sequence[AppTrace],
    topology: Topology | None = None,
    sends_by_execution: Mapping[str, Mapping[str, Sequence[str]]] | None = None,
) -> GlobalFlowGraph:
    """Build the application execution-order graph.

    Consecutive functions in an application trace become edges: explicit when
    the earlier function demonstrably sent to the later one's entry URL,
    otherwise implicit, annotated with the mediating service when one of the
    earlier function's sends resolves to a service that triggers the later
    function.  Repeated occurrences of a function become fresh ``name#k``
    nodes so the graph stays acyclic.
    """
    if not app_traces:
        raise EmptyTraceSet("no application traces")
    topology = topology or Topology()
    sends_by_execution = sends_by_execution or {}

    nodes: dict[str, str] = {}
    edges: dict[tuple[str, str, EdgeLabel, str | None], GlobalEdge] = {}

    for app_trace in app_traces:
        sends = sends_by_execution.get(app_trace.execution_id, {})
        occurrence: dict[str, int] = {}
        previous: str | None = None
        previous_fn: str | None = None
        for fn, _ts in app_trace.function_sequence:
            occurrence[fn] = occurrence.get(fn, 0) + 1
            name = fn if occurrence[fn] == 1 else f"{fn}#{occurrence[fn]}"
            nodes.setdefault(name, "function")
            if previous is not None:
                edge = _classify_edge(
                    previous, previous_fn, name, fn, sends, topology
                )
                for extra in edge:
                    if extra.via is not None:
                        nodes.setdefault(extra.via, "service")
                    if (
                        extra.label is EdgeLabel.EXPLICIT
                        and extra.dst in topology.services
                    ):
                        nodes.setdefault(extra.dst, "service")
                    key = (extra.src, extra.dst, extra.label, extra.via)
                    edges.setdefault(key, extra)
            previous, previous_fn = name, fn
    graph = GlobalFlowGraph(nodes=nodes, edges=tuple(edges.values()))
    graph.validate()
    return graph


def _classify_edge(
    prev_node: str,
    prev_fn: str | None,
    node: str,
    fn: str,
    sends: Mapping[str, Sequence[str]],
    topology: Topology,
) -> list[GlobalEdge]:
    urls = sends.get(prev_fn or "", ())
    for url in urls:
        if topology.function_for_url(url) == fn:
            return [GlobalEdge(prev_node, node, EdgeLabel.EXPLICIT)]
    for url in urls:
        service = topology.service_for_url(url)
        if service and fn in topology.triggers.get(service, ()):
            return [
                GlobalEdge(prev_node, service, EdgeLabel.EXPLICIT),
                GlobalEdge(prev_node, node, EdgeLabel.IMPLICIT, via=service),
            ]
    return [GlobalEdge(prev_node, node, EdgeLabel.IMPLICIT)]


# ---------------------------------------------------------------------------
# Coverage measurement


def coverage_error(
    training_rounds: Sequence[Sequence[Trace]],
    heldout_rounds: Sequence[Sequence[Trace]],
    t_lcp: int = DEFAULT_T_LCP,
) -> int:
    """Count held-out rounds containing at least one flow the graphs built
    from the training rounds would reject.  An empty policy rejects
    everything (fail closed)."""
    from .enforce import accepts  # local import to avoid a cycle

    by_function: dict[str, list[Trace]] = {}
    for round_traces in training_rounds:
        for trace in round_traces:
            by_function.setdefault(trace.function, []).append(trace)
    graphs = {
        fn: build_function_graph(traces, t_lcp)
        for fn, traces in by_function.items()
    }
    errors = 0
    for round_traces in heldout_rounds:
        for trace in round_traces:
            graph = graphs.get(trace.function)
            if graph is None or not accepts(graph, trace.steps):
                errors += 1
                break
    return errors

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st

from flowguard.graphbuild import (
    CompressedTrace,
    EmptyTraceSet,
    Topology,
    Unit,
    build_function_graph,
    build_global_graph,
    build_local_graph,
    compress_steps,
    coverage_error,
    expand,
    lcp_group,
    merge_traces,
    rewrite_map,
)
from flowguard.enforce import accepts
from flowguard.model import AppTrace, Flow, HttpOp, topo_sort

from conftest import letter_steps, letter_trace


def _letters(units: tuple[Unit, ...]) -> list[tuple[str, int]]:
    def name(flow: Flow) -> str:
        return flow.url.split("//")[1][0].upper()

    return [("".join(name(f) for f in u.body), u.counter) for u in units]


class TestLcpGroup:
    def test_paper_example(self) -> None:
        groups = lcp_group({"a.com", "a.com/test/x", "a.com/test/y"}, t_lcp=1)
        patterns = {g.pattern for g in groups}
        assert patterns == {"a.com", "a.com/test/*"}

    def test_singleton(self) -> None:
        for t_lcp in (1, 2, 10):
            (group,) = lcp_group({"a.com"}, t_lcp)
            assert group.pattern == "a.com"
            assert not group.generalized

    def test_numbered_pool_collapses(self) -> None:
        urls = {f"s3/prefix000{i}" for i in range(1, 10)}
        (group,) = lcp_group(urls, t_lcp=1)
        assert group.generalized
        assert group.pattern == "s3/prefix000*"

    def test_unrelated_hosts_stay_apart(self) -> None:
        urls = {"https://a.local/x", "https://b.local/x", "https://c.local/x"}
        groups = lcp_group(urls, t_lcp=1)
        assert len(groups) == 3
        assert not any(g.generalized for g in groups)

    def test_threshold_gates_generalization(self) -> None:
        urls = {"https://s.local/api/a", "https://s.local/api/b"}
        groups = lcp_group(urls, t_lcp=2)
        (group,) = groups
        assert not group.generalized
        assert rewrite_map(groups) == {u: u for u in urls}

    def test_partition_invariant(self) -> None:
        rng = random.Random(7)
        pool = [f"https://svc.local/api/v1/item{i:03d}" for i in range(40)]
        pool += [f"https://db.local/t/{i}" for i in range(10)]
        for _ in range(50):
            urls = set(rng.sample(pool, rng.randint(1, 20)))
            groups = lcp_group(urls, t_lcp=1)
            seen: set[str] = set()
            for group in groups:
                assert not (group.members & seen)
                seen |= group.members
                for member in group.members:
                    assert member.startswith(group.lcp)
            assert seen == urls

    def test_lcp_separation(self) -> None:
        # In-group closeness is at least the group prefix; no outsider is
        # strictly closer to a member than the group prefix allows.
        urls = {
            "https://s.local/data/part0001",
            "https://s.local/data/part0002",
            "https://s.local/data/part0003",
            "https://s.local/meta",
            "https://other.local/x",
        }
        groups = lcp_group(urls, t_lcp=1)
        by_member = {m: g for g in groups for m in g.members}

        def lcp_len(a: str, b: str) -> int:
            n = 0
            while n < min(len(a), len(b)) and a[n] == b[n]:
                n += 1
            return n

        for group in groups:
            for member in group.members:
                for other in urls - group.members:
                    assert lcp_len(member, other) <= len(group.lcp)

    def test_empty_input_rejected(self) -> None:
        with pytest.raises(EmptyTraceSet):
            lcp_group(set(), 1)


class TestCompression:
    def test_interleaved_repeats(self) -> None:
        units = compress_steps(letter_steps("ABAAABDABDA"))
        assert _letters(units) == [("A", 1), ("B", 1), ("A", 2), ("ABD", 2), ("A", 1)]

    def test_simple_run(self) -> None:
        units = compress_steps(letter_steps("ABBBCD"))
        assert _letters(units) == [("A", 1), ("B", 3), ("C", 1), ("D", 1)]

    def test_no_repetition(self) -> None:
        units = compress_steps(letter_steps("AFD"))
        assert _letters(units) == [("A", 1), ("F", 1), ("D", 1)]

    def test_empty(self) -> None:
        assert compress_steps(()) == ()

    def _expand_units(self, units: tuple[Unit, ...]) -> tuple[Flow, ...]:
        trace = CompressedTrace(function="f", source="user", items=units)
        return expand(trace)

    def test_expansion_exhaustive_small(self) -> None:
        alphabet = "AB"
        for length in range(0, 11):
            for idx in range(len(alphabet) ** length):
                word = ""
                value = idx
                for _ in range(length):
                    word += alphabet[value % len(alphabet)]
                    value //= len(alphabet)
                steps = letter_steps(word)
                assert self._expand_units(compress_steps(steps)) == steps

    @settings(max_examples=500)
    @given(
        st.text(
            alphabet=st.sampled_from("ABCDEFGH"), min_size=0, max_size=16
        )
    )
    def test_expansion_randomized(self, word: str) -> None:
        steps = letter_steps(word)
        assert self._expand_units(compress_steps(steps)) == steps


class TestMerge:
    def _compressed(self, word: str, counters: dict[int, int] | None = None):
        units = list(compress_steps(letter_steps(word)))
        for index, counter in (counters or {}).items():
            units[index] = Unit(body=units[index].body, counter=counter)
        return CompressedTrace(function="f", source="user", items=tuple(units))

    def test_max_counter_rule(self) -> None:
        low = self._compressed("ABBBC")
        high = self._compressed("ABBBC", {1: 5})
        (merged,) = merge_traces([low, high])
        assert _letters(merged.items) == [("A", 1), ("B", 5), ("C", 1)]

    def test_identity(self) -> None:
        trace = self._compressed("ABC")
        assert merge_traces([trace]) == [trace]

    def test_different_orders_kept(self) -> None:
        merged = merge_traces([self._compressed("ABC"), self._compressed("ACB")])
        assert len(merged) == 2


class TestLocalGraph:
    def test_fig5_structure(self, fig5_traces) -> None:
        graph = build_function_graph(fig5_traces, t_lcp=1)
        graph.validate()
        # Entry fans out to the shared A node and trace 2's B node.
        entry_succ = graph.successors(graph.entry)
        assert len(entry_succ) == 2
        patterns = sorted(
            (graph.nodes[n].pattern, graph.nodes[n].counter) for n in entry_succ
        )
        assert patterns == [("https://a.local/x", 1), ("https://b.local/x", 1)]
        counters = sorted(n.counter for n in graph.nodes.values())
        assert counters.count(3) == 1  # the B-loop node

    def test_single_trace(self) -> None:
        graph = build_function_graph([letter_trace("A", "t1")])
        assert accepts(graph, letter_steps("A"))
        assert not accepts(graph, letter_steps("AA"))
        assert not accepts(graph, ())

    def test_idempotent_for_duplicates(self) -> None:
        one = build_function_graph([letter_trace("ABC", "t1")])
        two = build_function_graph(
            [letter_trace("ABC", "t1"), letter_trace("ABC", "t2")]
        )
        assert one.to_json() == two.to_json()

    def test_empty_rejected(self) -> None:
        with pytest.raises(EmptyTraceSet):
            build_local_graph("f", [], [])

    def test_deterministic_serialization(self, fig5_traces) -> None:
        first = build_function_graph(fig5_traces, t_lcp=1).to_json()
        second = build_function_graph(list(fig5_traces), t_lcp=1).to_json()
        assert first == second

    def test_dag_and_reachability(self, fig5_traces) -> None:
        graph = build_function_graph(fig5_traces, t_lcp=1)
        topo_sort(set(graph.nodes), graph.edges)

    def test_replay_acceptance_randomized(self) -> None:
        from flowguard.model import Trace

        rng = random.Random(99)
        pool = [f"https://svc.local/item{i:03d}" for i in range(1, 8)]
        pool += ["https://db.local/rows", "https://q.local/push"]
        for _ in range(100):
            traces = []
            for index in range(rng.randint(1, 4)):
                steps = tuple(
                    Flow(rng.choice(pool), rng.choice([HttpOp.GET, HttpOp.POST]))
                    for _ in range(rng.randint(0, 10))
                )
                traces.append(
                    Trace(
                        function="f",
                        execution_id=f"t{index}",
                        source="user",
                        steps=steps,
                    )
                )
            graph = build_function_graph(traces, t_lcp=1)
            for trace in traces:
                assert accepts(graph, trace.steps)


class TestGlobalGraph:
    def test_implicit_via_service(self) -> None:
        topology = Topology(
            services={"s3.local": "https://s3.local"},
            triggers={"s3.local": ("ProcessPhoto",)},
        )
        app_traces = [
            AppTrace("r0", (("UpdatePhoto", 1), ("ProcessPhoto", 2))),
        ]
        sends = {"r0": {"UpdatePhoto": ["https://s3.local/photos/img"]}}
        graph = build_global_graph(app_traces, topology, sends)
        implicit = [
            e for e in graph.edges if e.src == "UpdatePhoto" and e.dst == "ProcessPhoto"
        ]
        assert len(implicit) == 1
        assert implicit[0].via == "s3.local"
        assert graph.nodes["s3.local"] == "service"

    def test_single_function(self) -> None:
        graph = build_global_graph([AppTrace("r0", (("Only", 1),))])
        assert set(graph.nodes) == {"Only"}
        assert graph.edges == ()

    def test_branching_successors(self) -> None:
        graph = build_global_graph(
            [
                AppTrace("r0", (("A", 1), ("B", 2))),
                AppTrace("r1", (("A", 1), ("C", 2))),
            ]
        )
        out = {e.dst for e in graph.edges if e.src == "A"}
        assert out == {"B", "C"}
        assert all(e.label.value == "implicit" for e in graph.edges)

    def test_repeated_function_duplicated(self) -> None:
        graph = build_global_graph([AppTrace("r0", (("A", 1), ("B", 2), ("A", 3)))])
        assert "A#2" in graph.nodes
        graph.validate()

    def test_empty_rejected(self) -> None:
        with pytest.raises(EmptyTraceSet):
            build_global_graph([])


class TestCoverage:
    def _round(self, word: str, execution: str):
        return [letter_trace(word, execution)]

    def test_full_training_no_errors(self) -> None:
        rounds = [self._round("AB", "r0"), self._round("ABB", "r1")]
        assert coverage_error(rounds, rounds) == 0

    def test_empty_policy_fails_closed(self) -> None:
        rounds = [self._round("AB", "r0")]
        assert coverage_error([], rounds) == 1

    def test_partial_coverage(self) -> None:
        train = [self._round("AB", "r0")]
        held = [self._round("AB", "r1"), self._round("ABBB", "r2")]
        assert coverage_error(train, held) == 1

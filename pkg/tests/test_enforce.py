from __future__ import annotations

import itertools

import pytest

from flowguard.enforce import (
    Mode,
    Reason,
    SourceMismatch,
    Verdict,
    accepts,
    begin_execution,
    bench_check,
    end_execution,
    linear_chain_graph,
    step,
)
from flowguard.graphbuild import build_function_graph
from flowguard.model import Flow, HttpOp, Trace

from conftest import letter_steps, letter_trace, letter_url


def chain_graph(word: str):
    return build_function_graph([letter_trace(word, "t1")], t_lcp=1)


class TestBegin:
    def test_source_match(self) -> None:
        graph = chain_graph("AB")
        state = begin_execution(graph, "user")
        assert state.live()
        assert not state.needs_controller_check

    def test_source_mismatch(self) -> None:
        graph = chain_graph("AB")
        with pytest.raises(SourceMismatch):
            begin_execution(graph, "attacker")

    def test_unknown_marker_flags_controller_check(self) -> None:
        mixed = [
            Trace("f", "t1", "svc-a", letter_steps("A")),
            Trace("f", "t2", "svc-b", letter_steps("B")),
        ]
        graph = build_function_graph(mixed, t_lcp=1)
        assert graph.entry_source == "?"
        state = begin_execution(graph, "anything")
        assert state.live()
        assert state.needs_controller_check


class TestStep:
    def test_linear_allow(self) -> None:
        graph = chain_graph("AB")
        state = begin_execution(graph, "user")
        assert step(state, Flow(letter_url("A"), HttpOp.GET)).allowed
        assert step(state, Flow(letter_url("B"), HttpOp.GET)).allowed
        assert end_execution(state).allowed

    def test_unexpected_flow_denied(self) -> None:
        graph = chain_graph("AB")
        state = begin_execution(graph, "user")
        assert step(state, Flow(letter_url("A"), HttpOp.GET)).allowed
        denial = step(state, Flow(letter_url("C"), HttpOp.GET))
        assert denial.verdict is Verdict.DENY
        assert denial.reason is Reason.NO_MATCHING_SUCCESSOR

    def test_loop_counter_exceeded(self) -> None:
        graph = chain_graph("ABBB")
        state = begin_execution(graph, "user")
        flow_a = Flow(letter_url("A"), HttpOp.GET)
        flow_b = Flow(letter_url("B"), HttpOp.GET)
        assert step(state, flow_a).allowed
        for _ in range(3):
            assert step(state, flow_b).allowed
        denial = step(state, flow_b)
        assert denial.verdict is Verdict.DENY
        assert denial.reason is Reason.LOOP_COUNTER_EXCEEDED

    def test_op_must_match(self) -> None:
        graph = chain_graph("A")
        state = begin_execution(graph, "user")
        assert not step(state, Flow(letter_url("A"), HttpOp.POST)).allowed

    def test_generalized_prefix_match(self) -> None:
        pool = [f"https://s.local/data/part000{i}" for i in (1, 2, 3)]
        traces = [
            Trace("f", f"t{i}", "user", (Flow(url, HttpOp.GET),))
            for i, url in enumerate(pool)
        ]
        graph = build_function_graph(traces, t_lcp=1)
        state = begin_execution(graph, "user")
        fresh = Flow("https://s.local/data/part0009", HttpOp.GET)
        assert step(state, fresh).allowed
        state = begin_execution(graph, "user")
        outside = Flow("https://s.local/meta", HttpOp.GET)
        assert not step(state, outside).allowed

    def test_denied_flow_keeps_state_live(self) -> None:
        graph = chain_graph("AB")
        state = begin_execution(graph, "user")
        step(state, Flow(letter_url("A"), HttpOp.GET))
        assert not step(state, Flow(letter_url("Z"), HttpOp.GET)).allowed
        # The dropped flow does not advance or kill the frontier.
        assert step(state, Flow(letter_url("B"), HttpOp.GET)).allowed
        assert end_execution(state).allowed


class TestEnd:
    def test_incomplete_path_denied(self) -> None:
        graph = chain_graph("AB")
        state = begin_execution(graph, "user")
        step(state, Flow(letter_url("A"), HttpOp.GET))
        denial = end_execution(state)
        assert denial.verdict is Verdict.DENY
        assert denial.reason is Reason.INCOMPLETE_PATH

    def test_mid_group_denied(self) -> None:
        graph = chain_graph("ABAB")  # compresses to one {AB} group node
        group_nodes = [
            n for n in graph.nodes.values() if n.group_body
        ]
        assert group_nodes, "expected a grouped-flow node"
        state = begin_execution(graph, "user")
        assert step(state, Flow(letter_url("A"), HttpOp.GET)).allowed
        assert end_execution(state).verdict is Verdict.DENY

    def test_group_must_complete_in_order(self) -> None:
        graph = chain_graph("ABAB")
        state = begin_execution(graph, "user")
        assert step(state, Flow(letter_url("A"), HttpOp.GET)).allowed
        assert not step(state, Flow(letter_url("A"), HttpOp.GET)).allowed
        assert step(state, Flow(letter_url("B"), HttpOp.GET)).allowed
        assert end_execution(state).allowed


class TestFailOpen:
    def test_never_denies_and_logs_violations(self) -> None:
        graph = chain_graph("AB")
        closed = begin_execution(graph, "user")
        opened = begin_execution(graph, "user", mode=Mode.FAIL_OPEN)
        flows = [Flow(letter_url(c), HttpOp.GET) for c in "AZB"]
        closed_verdicts = [step(closed, f).verdict for f in flows]
        opened_verdicts = [step(opened, f).verdict for f in flows]
        assert closed_verdicts == [Verdict.ALLOW, Verdict.DENY, Verdict.ALLOW]
        assert opened_verdicts == [Verdict.ALLOW] * 3
        assert opened.violations == closed.violations
        assert end_execution(opened).allowed

    def test_open_end_logs_incomplete(self) -> None:
        graph = chain_graph("AB")
        state = begin_execution(graph, "user", mode=Mode.FAIL_OPEN)
        decision = end_execution(state)
        assert decision.allowed
        assert state.violations[-1][1] is Reason.INCOMPLETE_PATH


# ---------------------------------------------------------------------------
# Oracle equivalence: frontier simulation vs path enumeration


def enumerate_language(graph, max_len: int = 12) -> set[tuple]:
    """All accepted flow sequences, by enumerating entry-exit node paths and
    expanding every loop counter from 1 to its bound."""
    paths: list[list[str]] = []

    def walk(node_id: str, acc: list[str]) -> None:
        if node_id == graph.exit:
            paths.append(list(acc))
            return
        for succ in graph.successors(node_id):
            walk(succ, acc + [succ])

    walk(graph.entry, [])
    language: set[tuple] = set()
    for path in paths:
        unit_nodes = [graph.nodes[n] for n in path if n != graph.exit]
        choices = [range(1, node.counter + 1) for node in unit_nodes]
        for reps in itertools.product(*choices):
            word: list[tuple[str, str]] = []
            for node, count in zip(unit_nodes, reps):
                word.extend(f.key() for f in node.unit * count)
            if len(word) <= max_len:
                language.add(tuple(word))
    return language


def verdicts_match_oracle(graph, sequence: tuple[Flow, ...]) -> None:
    language = enumerate_language(graph, max_len=len(sequence) + 6)
    prefixes = {word[:i] for word in language for i in range(len(word) + 1)}
    state = begin_execution(graph, "user")
    consumed: list[tuple[str, str]] = []
    for flow in sequence:
        expected = tuple(consumed + [flow.key()]) in prefixes
        decision = step(state, flow)
        assert decision.allowed == expected, (
            f"divergence on {sequence} at {flow}: sim={decision.allowed} "
            f"oracle={expected}"
        )
        if not decision.allowed:
            return  # after a dropped flow the oracle's consumed-prefix model stops
        consumed.append(flow.key())
    assert end_execution(state).allowed == (tuple(consumed) in language)


def all_words(alphabet: str, max_len: int):
    for length in range(max_len + 1):
        for combo in itertools.product(alphabet, repeat=length):
            yield "".join(combo)


class TestOracleEquivalence:
    def test_single_trace_graphs(self) -> None:
        alphabet = "ABCD"
        for word in all_words(alphabet, 4):
            if not word:
                continue
            graph = chain_graph(word)
            if len(graph.nodes) > 6:
                continue
            for probe in all_words(alphabet, 4):
                verdicts_match_oracle(graph, letter_steps(probe))

    def test_two_trace_graphs(self) -> None:
        alphabet = "ABC"
        words = [w for w in all_words(alphabet, 3) if w]
        for first, second in itertools.combinations(words, 2):
            graph = build_function_graph(
                [letter_trace(first, "t1"), letter_trace(second, "t2")], t_lcp=1
            )
            if len(graph.nodes) > 6:
                continue
            for probe in all_words(alphabet, 4):
                verdicts_match_oracle(graph, letter_steps(probe))


class TestMonotonicity:
    def test_accepted_sequences_allowed_throughout(self, fig5_traces) -> None:
        graph = build_function_graph(fig5_traces, t_lcp=1)
        for word in ["ABCD", "ABBCD", "ABBBCD", "BABCD", "AFD"]:
            state = begin_execution(graph, "user")
            for flow in letter_steps(word):
                assert step(state, flow).allowed
            assert end_execution(state).allowed
            assert accepts(graph, letter_steps(word))


class TestBench:
    def test_completes_quickly(self) -> None:
        elapsed = bench_check(1000, 1000)
        assert elapsed < 0.010

    def test_zero_iterations(self) -> None:
        assert bench_check(1000, 0) < 0.001

    def test_single_node_not_slower(self) -> None:
        small = bench_check(1, 1000)
        large = bench_check(1000, 1000)
        assert small <= large * 3  # same order; chain length must not dominate

    def test_chain_shape(self) -> None:
        graph = linear_chain_graph(5)
        graph.validate()
        assert len(graph.nodes) == 7

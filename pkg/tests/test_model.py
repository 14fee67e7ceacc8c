from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from flowguard.model import (
    Direction,
    Flow,
    FlowEvent,
    HttpOp,
    MalformedUrl,
    ParseError,
    Tag,
    extract_app_trace,
    extract_sends,
    extract_traces,
    normalize_url,
    read_trace_log,
    write_trace_log,
)


class TestNormalizeUrl:
    @pytest.mark.parametrize(
        ("raw", "expected"),
        [
            ("https://A.com/Test?x=1", "https://a.com/Test"),
            ("https://a.com/", "https://a.com"),
            ("https://a.com/test/x", "https://a.com/test/x"),
            ("HTTPS://A.COM/Path/", "https://a.com/Path"),
            ("https://a.com/p%20q", "https://a.com/p%20q"),
            ("https://a.com/x?q=1#frag", "https://a.com/x"),
        ],
    )
    def test_rules(self, raw: str, expected: str) -> None:
        assert normalize_url(raw) == expected

    @pytest.mark.parametrize("raw", ["a.com/test", "not a url", "", "https://"])
    def test_malformed(self, raw: str) -> None:
        with pytest.raises(MalformedUrl):
            normalize_url(raw)

    def test_idempotent(self) -> None:
        url = normalize_url("https://S3.Local/Data/part0001?v=2")
        assert normalize_url(url) == url


def _event(ts: int, direction: Direction, url: str, **kw) -> FlowEvent:
    defaults = dict(fn="f", inst="i-1", op=HttpOp.GET, sess="")
    defaults.update(kw)
    return FlowEvent(ts=ts, direction=direction, url=url, **defaults)


class TestTraceLog:
    def test_empty_file(self, tmp_path) -> None:
        path = tmp_path / "t.jsonl"
        path.write_text("", encoding="utf-8")
        assert read_trace_log(path) == []

    def test_three_lines_in_order(self, tmp_path) -> None:
        events = [
            _event(1, Direction.IN, "user", op=HttpOp.OTHER),
            _event(2, Direction.SEND, "https://a.com/x", digest="ab" * 16),
            _event(3, Direction.OUT, "", op=HttpOp.OTHER),
        ]
        path = tmp_path / "t.jsonl"
        write_trace_log(path, events)
        assert read_trace_log(path) == events

    def test_malformed_line_reports_number(self, tmp_path) -> None:
        path = tmp_path / "t.jsonl"
        good = _event(1, Direction.SEND, "https://a.com/x").to_json()
        path.write_text(good + "\n{oops\n" + good + "\n", encoding="utf-8")
        with pytest.raises(ParseError) as err:
            read_trace_log(path)
        assert err.value.line == 2

    def test_round_trip_line_content(self, tmp_path) -> None:
        events = [
            _event(5, Direction.SEND, "https://a.com/x", sess="c1"),
            _event(7, Direction.RECV, "https://a.com/x", sess="c1"),
        ]
        first = tmp_path / "first.jsonl"
        second = tmp_path / "second.jsonl"
        write_trace_log(first, events)
        write_trace_log(second, read_trace_log(first))
        assert first.read_text() == second.read_text()

    @given(
        st.lists(
            st.builds(
                FlowEvent,
                ts=st.integers(min_value=0, max_value=10**15),
                fn=st.text(min_size=1, max_size=8),
                inst=st.text(min_size=1, max_size=8),
                direction=st.sampled_from(Direction),
                url=st.text(max_size=20),
                op=st.sampled_from(HttpOp),
                sess=st.text(max_size=6),
                digest=st.none() | st.just("0" * 32),
            ),
            max_size=10,
        )
    )
    def test_json_round_trip(self, events: list[FlowEvent]) -> None:
        for event in events:
            assert FlowEvent.from_json(event.to_json()) == event


class TestExtraction:
    def test_traces_split_per_execution(self) -> None:
        events = [
            _event(1, Direction.IN, "user", op=HttpOp.OTHER, inst="i-1"),
            _event(2, Direction.SEND, "https://a.com/x", inst="i-1"),
            _event(3, Direction.OUT, "", op=HttpOp.OTHER, inst="i-1"),
            _event(4, Direction.IN, "s3.local", op=HttpOp.OTHER, inst="i-2", fn="g"),
            _event(5, Direction.SEND, "https://b.com/y", inst="i-2", fn="g"),
        ]
        traces = extract_traces(events)
        assert len(traces) == 2
        first, second = traces
        assert first.function == "f"
        assert first.source == "user"
        assert first.completed
        assert first.steps == (Flow("https://a.com/x", HttpOp.GET),)
        assert second.source == "s3.local"
        assert not second.completed

    def test_order_preserving_and_deterministic(self) -> None:
        events = [
            _event(1, Direction.IN, "user", op=HttpOp.OTHER),
            _event(2, Direction.SEND, "https://a.com/1"),
            _event(3, Direction.SEND, "https://a.com/2"),
            _event(4, Direction.SEND, "https://a.com/3"),
        ]
        urls = [f.url for f in extract_traces(events)[0].steps]
        assert urls == ["https://a.com/1", "https://a.com/2", "https://a.com/3"]
        assert extract_traces(events) == extract_traces(events)

    def test_decreasing_timestamps_rejected(self) -> None:
        events = [
            _event(5, Direction.IN, "user", op=HttpOp.OTHER),
            _event(3, Direction.SEND, "https://a.com/x"),
        ]
        with pytest.raises(ValueError):
            extract_traces(events)

    def test_app_trace_orders_starts(self) -> None:
        events = [
            _event(3, Direction.IN, "s3.local", op=HttpOp.OTHER, fn="g", inst="i-2"),
            _event(1, Direction.IN, "user", op=HttpOp.OTHER, fn="f", inst="i-1"),
            _event(2, Direction.SEND, "https://a.com/x", fn="f", inst="i-1"),
        ]
        app_trace = extract_app_trace(events, "r0")
        assert app_trace.function_sequence == (("f", 1), ("g", 3))
        assert extract_sends(events) == {"f": ["https://a.com/x"]}


class TestTag:
    def test_field_lengths(self) -> None:
        Tag("f", b"\x01" * 16, b"\x02" * 16)
        with pytest.raises(ValueError):
            Tag("f", b"\x01" * 15, b"\x02" * 16)
        with pytest.raises(ValueError):
            Tag("f", b"\x01" * 16, b"\x02" * 17)

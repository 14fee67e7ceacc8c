from __future__ import annotations

import pytest

from flowguard.model import Flow, HttpOp, Trace


def letter_url(letter: str) -> str:
    return f"https://{letter.lower()}.local/x"


def letter_steps(word: str) -> tuple[Flow, ...]:
    return tuple(Flow(letter_url(c), HttpOp.GET) for c in word)


def letter_trace(word: str, execution_id: str, function: str = "fig5") -> Trace:
    return Trace(
        function=function,
        execution_id=execution_id,
        source="user",
        steps=letter_steps(word),
    )


@pytest.fixture
def fig5_traces() -> list[Trace]:
    return [
        letter_trace("ABBBCD", "t1"),
        letter_trace("BABCD", "t2"),
        letter_trace("AFD", "t3"),
    ]

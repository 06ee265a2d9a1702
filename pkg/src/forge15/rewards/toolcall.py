from __future__ import annotations

import json
import re
from decimal import Decimal
from typing import Any, Mapping, Sequence

_BLOCK = re.compile(r"<tool_call>(.*?)</tool_call>", re.DOTALL)


def extract_tool_calls(text: str) -> list[Any] | None:
    """Parsed ``<tool_call>`` JSON blocks in order; None if any block is malformed."""
    calls = []
    for body in _BLOCK.findall(text):
        try:
            calls.append(json.loads(body, parse_float=Decimal))
        except ValueError:
            return None
    return calls


def _num(x):
    return Decimal(str(x)) if isinstance(x, float) else Decimal(x)


def deep_equal(a: Any, b: Any) -> bool:
    """Key-exact, value-exact comparison. Numbers compare by exact value
    regardless of int/float spelling; booleans never equal numbers."""
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if isinstance(a, (int, float, Decimal)) and isinstance(b, (int, float, Decimal)):
        return _num(a) == _num(b)
    if isinstance(a, Mapping) and isinstance(b, Mapping):
        return a.keys() == b.keys() and all(deep_equal(a[k], b[k]) for k in a)
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(deep_equal(x, y) for x, y in zip(a, b))
    if type(a) is not type(b):
        return False
    return a == b


def score_toolcall(response: str, expected_calls: Sequence[Mapping]) -> float:
    if not expected_calls:
        raise ValueError("at least one expected call is required")
    calls = extract_tool_calls(response)
    if calls is None or len(calls) != len(expected_calls):
        return 0.0
    for got, want in zip(calls, expected_calls):
        if not isinstance(got, dict) or "name" not in got or not set(got) <= {"name", "arguments"}:
            return 0.0
        if got["name"] != want["name"] or not deep_equal(got.get("arguments", {}), dict(want.get("arguments", {}))):
            return 0.0
    return 1.0

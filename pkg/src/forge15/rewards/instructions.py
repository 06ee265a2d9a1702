"""Verifiable instruction constraints (length, content, format, structure)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Sequence

_NEEDS_INT = {"max_words", "min_words", "bullet_count", "paragraph_count"}
_NEEDS_STR = {"contains", "not_contains", "starts_with", "ends_with"}
_NO_VALUE = {"json_object", "uppercase_only"}
CONSTRAINT_TYPES = tuple(sorted(_NEEDS_INT | _NEEDS_STR | _NO_VALUE))


@dataclass(frozen=True)
class Constraint:
    type: str
    value: Any = None

    def __post_init__(self):
        if self.type not in CONSTRAINT_TYPES:
            raise ValueError(f"unknown constraint type {self.type!r}")
        if self.type in _NEEDS_INT and not isinstance(self.value, int):
            raise ValueError(f"{self.type} needs an integer value")
        if self.type in _NEEDS_STR and not isinstance(self.value, str):
            raise ValueError(f"{self.type} needs a string value")

    def to_json(self) -> dict:
        d = {"type": self.type}
        if self.value is not None:
            d["value"] = self.value
        return d


def words(text: str) -> list[str]:
    return text.split()


def bullets(text: str) -> int:
    return sum(1 for line in text.splitlines() if line.startswith("- "))


def paragraphs(text: str) -> list[str]:
    blocks, cur = [], []
    for line in text.splitlines():
        if line.strip():
            cur.append(line)
        elif cur:
            blocks.append("\n".join(cur))
            cur = []
    if cur:
        blocks.append("\n".join(cur))
    return blocks


def _is_json_object(text: str) -> bool:
    try:
        return isinstance(json.loads(text), dict)
    except ValueError:
        return False


def satisfied(response: str, c: Constraint) -> bool:
    t, v = c.type, c.value
    if t == "max_words":
        return len(words(response)) <= v
    if t == "min_words":
        return len(words(response)) >= v
    if t == "contains":
        return v in response
    if t == "not_contains":
        return v not in response
    if t == "starts_with":
        return response.strip().startswith(v)
    if t == "ends_with":
        return response.strip().endswith(v)
    if t == "bullet_count":
        return bullets(response) == v
    if t == "json_object":
        return _is_json_object(response)
    if t == "uppercase_only":
        return response.isupper()
    if t == "paragraph_count":
        return len(paragraphs(response)) == v
    raise AssertionError(t)


def score_instructions(response: str, constraints: Sequence[Constraint], strict: bool = False) -> float:
    """Fraction of constraints met; with ``strict`` it is all-or-nothing."""
    if not constraints:
        raise ValueError("at least one constraint is required")
    met = sum(satisfied(response, c) for c in constraints)
    if strict:
        return float(met == len(constraints))
    return met / len(constraints)

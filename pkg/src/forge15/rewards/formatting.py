from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class FormatSpec:
    open_tag: str = "<think>"
    close_tag: str = "</think>"

    def __post_init__(self):
        if not self.open_tag or not self.close_tag or self.open_tag == self.close_tag:
            raise ValueError("format tags must be nonempty and distinct")


@dataclass(frozen=True)
class FormatResult:
    valid: bool
    thinking: str = ""
    response: str = ""


def check_format(text: str, spec: FormatSpec = FormatSpec()) -> FormatResult:
    """Valid iff ``text`` opens with the open tag, has exactly one close tag,
    and a nonempty (non-whitespace) response follows it."""
    if not text.startswith(spec.open_tag) or text.count(spec.close_tag) != 1:
        return FormatResult(False)
    thinking, response = text[len(spec.open_tag):].split(spec.close_tag)
    if not response.strip():
        return FormatResult(False)
    return FormatResult(True, thinking, response)

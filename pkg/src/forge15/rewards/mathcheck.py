"""Final-answer extraction and exact rational comparison."""

from __future__ import annotations

import re
from fractions import Fraction

_NUMBER = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)")
_RATIO = re.compile(r"([+-]?\d+)\s*/\s*([+-]?\d+)")


def last_boxed(text: str) -> str | None:
    """Content of the last ``\\boxed{...}``, honouring nested braces."""
    start = text.rfind("\\boxed{")
    if start < 0:
        return None
    i = start + len("\\boxed{")
    depth = 1
    for j in range(i, len(text)):
        if text[j] == "{":
            depth += 1
        elif text[j] == "}":
            depth -= 1
            if depth == 0:
                return text[i:j]
    return None


def normalize(ans: str) -> str:
    s = ans.strip().replace("$", "").strip()
    while s.endswith("."):
        s = s[:-1].rstrip()
    return s


def as_rational(s: str) -> Fraction | None:
    if _NUMBER.fullmatch(s):
        return Fraction(s)
    m = _RATIO.fullmatch(s)
    if m and int(m.group(2)) != 0:
        return Fraction(int(m.group(1)), int(m.group(2)))
    return None


def extract_answer(response: str) -> str:
    boxed = last_boxed(response)
    return boxed if boxed is not None else response.strip()


def score_math(response: str, answer: str) -> float:
    cand, ref = normalize(extract_answer(response)), normalize(answer)
    a, b = as_rational(cand), as_rational(ref)
    if a is not None and b is not None:
        return float(a == b)
    squash = lambda s: " ".join(s.split()).casefold()  # noqa: E731
    return float(squash(cand) == squash(ref))

"""Synthetic desk-scale corpora: two-digit addition chat data and reward tasks."""

from __future__ import annotations

import numpy as np

from .data import ChatSample, CPTSample, Message
from .rewards import MathTask


def addition_pairs(n: int, seed: int = 0, lo: int = 10, hi: int = 99) -> list[tuple[int, int]]:
    rng = np.random.default_rng(seed)
    return [(int(a), int(b)) for a, b in rng.integers(lo, hi + 1, size=(n, 2))]


def addition_prompt(a: int, b: int) -> str:
    return f"{a}+{b}"


def addition_thinking(a: int, b: int) -> str:
    # ones column then tens column, e.g. "7+5=12 4+3+1=8" for 47+35
    ones = a % 10 + b % 10
    carry = ones // 10
    tens = a // 10 + b // 10 + carry
    return f"{a % 10}+{b % 10}={ones} {a // 10}+{b // 10}+{carry}={tens}"


def addition_chat(a: int, b: int, answer: int | None = None, domain_tag: str = "math") -> ChatSample:
    ans = a + b if answer is None else answer
    return ChatSample(
        [Message("user", addition_prompt(a, b)), Message("assistant", str(ans), addition_thinking(a, b))],
        domain_tag,
    )


def addition_sft(n: int, seed: int = 0) -> list[ChatSample]:
    return [addition_chat(a, b) for a, b in addition_pairs(n, seed)]


def addition_tasks(n: int, seed: int = 0) -> list[MathTask]:
    return [MathTask(addition_prompt(a, b), str(a + b)) for a, b in addition_pairs(n, seed)]


def addition_cpt(n: int, seed: int = 0) -> list[CPTSample]:
    out = []
    for i, (a, b) in enumerate(addition_pairs(n, seed)):
        kind = ("reasoning", "cot", "pretrain")[i % 3]
        if kind == "pretrain":
            out.append(CPTSample([f"{a} plus {b} is {a + b}."], kind))
        elif kind == "cot":
            out.append(CPTSample([addition_prompt(a, b), str(a + b)], kind))
        else:
            out.append(CPTSample([addition_prompt(a, b), addition_thinking(a, b), str(a + b)], kind))
    return out


def echo_chat(n: int, seed: int = 0) -> list[ChatSample]:
    """Short copy/reverse chat turns, a second toy domain for specialise-merge runs."""
    rng = np.random.default_rng(seed)
    letters = "abcdefgh"
    out = []
    for _ in range(n):
        word = "".join(letters[i] for i in rng.integers(0, len(letters), size=int(rng.integers(2, 5))))
        out.append(ChatSample([Message("user", f"rev {word}"), Message("assistant", word[::-1], word)], "chat"))
    return out

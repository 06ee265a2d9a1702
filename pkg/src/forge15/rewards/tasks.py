"""Reward task kinds and their JSON-lines representation.

Each row carries a ``"kind"`` discriminator: ``format``, ``math``,
``instruction``, ``code`` or ``tool``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Union

from .instructions import Constraint
from .minicalc import TestCase


@dataclass(frozen=True)
class FormatTask:
    prompt: str
    kind = "format"
    binary = True


@dataclass(frozen=True)
class MathTask:
    prompt: str
    answer: str
    kind = "math"
    binary = True


@dataclass(frozen=True)
class InstructionTask:
    prompt: str
    constraints: tuple[Constraint, ...]
    strict: bool = False
    kind = "instruction"
    binary = False

    def __post_init__(self):
        if not self.constraints:
            raise ValueError("instruction task needs at least one constraint")


@dataclass(frozen=True)
class CodeTask:
    prompt: str
    tests: tuple[TestCase, ...]
    kind = "code"
    binary = False

    def __post_init__(self):
        if not self.tests:
            raise ValueError("code task needs at least one test")


@dataclass(frozen=True)
class ToolTask:
    prompt: str
    expected_calls: tuple[Mapping[str, Any], ...]
    tools: tuple[Mapping[str, Any], ...] = field(default=())
    kind = "tool"
    binary = True

    def __post_init__(self):
        if not self.expected_calls:
            raise ValueError("tool task needs at least one expected call")


RewardTask = Union[FormatTask, MathTask, InstructionTask, CodeTask, ToolTask]


def task_from_json(row: Mapping) -> RewardTask:
    kind = row.get("kind")
    if kind == "format":
        return FormatTask(row["prompt"])
    if kind == "math":
        return MathTask(row["prompt"], str(row["answer"]))
    if kind == "instruction":
        cs = tuple(Constraint(c["type"], c.get("value")) for c in row["constraints"])
        return InstructionTask(row["prompt"], cs, bool(row.get("strict", False)))
    if kind == "code":
        return CodeTask(row["prompt"], tuple(TestCase.from_json(t) for t in row["tests"]))
    if kind == "tool":
        return ToolTask(row["prompt"], tuple(row["expected_calls"]), tuple(row.get("tools", ())))
    raise ValueError(f"unknown task kind {kind!r}")


def task_to_json(task: RewardTask) -> dict:
    row: dict[str, Any] = {"kind": task.kind, "prompt": task.prompt}
    if isinstance(task, MathTask):
        row["answer"] = task.answer
    elif isinstance(task, InstructionTask):
        row["constraints"] = [c.to_json() for c in task.constraints]
        if task.strict:
            row["strict"] = True
    elif isinstance(task, CodeTask):
        row["tests"] = [t.to_json() for t in task.tests]
    elif isinstance(task, ToolTask):
        row["expected_calls"] = [dict(c) for c in task.expected_calls]
        row["tools"] = [dict(t) for t in task.tools]
    return row


def load_tasks(path) -> list[RewardTask]:
    with open(path, encoding="utf-8") as f:
        return [task_from_json(json.loads(line)) for line in f if line.strip()]


def save_tasks(path, tasks) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in tasks:
            f.write(json.dumps(task_to_json(t), sort_keys=True) + "\n")

from __future__ import annotations

from .formatting import FormatSpec, check_format
from .instructions import score_instructions
from .mathcheck import score_math
from .minicalc import score_code
from .tasks import CodeTask, FormatTask, InstructionTask, MathTask, RewardTask, ToolTask
from .toolcall import score_toolcall


def task_score(response: str, task: RewardTask) -> float:
    """Kind-specific score of an already format-checked response segment."""
    if isinstance(task, FormatTask):
        return 1.0
    if isinstance(task, MathTask):
        return score_math(response, task.answer)
    if isinstance(task, InstructionTask):
        return score_instructions(response, task.constraints, strict=task.strict)
    if isinstance(task, CodeTask):
        return score_code(response, task.tests)
    if isinstance(task, ToolTask):
        return score_toolcall(response, task.expected_calls)
    raise TypeError(f"unsupported task {type(task).__name__}")


def composite_reward(model_text: str, task: RewardTask, spec: FormatSpec = FormatSpec()) -> float:
    """Format-gated reward: 0 unless the tag structure is valid."""
    fmt = check_format(model_text, spec)
    if not fmt.valid:
        return 0.0
    return task_score(fmt.response, task)

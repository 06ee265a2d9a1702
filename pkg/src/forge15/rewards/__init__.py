"""Rule-based verifiable rewards."""

from .composite import composite_reward, task_score
from .formatting import FormatResult, FormatSpec, check_format
from .instructions import Constraint, score_instructions
from .mathcheck import score_math
from .minicalc import RunResult, TestCase, run_minicalc, score_code
from .tasks import (
    CodeTask,
    FormatTask,
    InstructionTask,
    MathTask,
    RewardTask,
    ToolTask,
    load_tasks,
    save_tasks,
    task_from_json,
    task_to_json,
)
from .toolcall import score_toolcall

__all__ = [
    "CodeTask", "Constraint", "FormatResult", "FormatSpec", "FormatTask", "InstructionTask",
    "MathTask", "RewardTask", "RunResult", "TestCase", "ToolTask", "check_format",
    "composite_reward", "load_tasks", "run_minicalc", "save_tasks", "score_code",
    "score_instructions", "score_math", "score_toolcall", "task_from_json", "task_score",
    "task_to_json",
]

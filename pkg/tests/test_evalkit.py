import json

import pytest
from hypothesis import given, settings, strategies as st

from forge15.evalkit import (
    PUBLISHED_THINKING_TOKENS, MiniLMPolicy, pass_at_1, render_token_figure, run_suite, thinking_tokens,
)
from forge15.minilm import init_params
from forge15.rewards import InstructionTask, MathTask
from forge15.rewards.instructions import Constraint
from forge15.toydata import addition_tasks


class FixedPolicy:
    """Returns ``fn(prompt, seed)`` for every prompt."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = []

    def generate(self, prompts, *, temperature, top_p, max_new, seed):
        self.calls.append(seed)
        return [self.fn(p, seed) for p in prompts]


TASKS = [MathTask(f"what is {i}+1?", str(i + 1)) for i in range(6)]
ANSWERS = {t.prompt: t.answer for t in TASKS}


def test_always_correct_scores_one():
    pol = FixedPolicy(lambda p, s: f"<think>add</think>\\boxed{{{ANSWERS[p]}}}")
    res = pass_at_1(pol, TASKS, seeds=(0, 1, 2))
    assert res.score == 1.0 and res.per_seed == [1.0, 1.0, 1.0]
    assert pol.calls == [0, 1, 2]


def test_unformatted_answer_scores_zero():
    pol = FixedPolicy(lambda p, s: f"\\boxed{{{ANSWERS[p]}}}")
    assert pass_at_1(pol, TASKS).score == 0.0


def test_seed_averaging():
    # correct on even seeds only, for half of the tasks on odd seeds
    def fn(p, s):
        ok = s % 2 == 0 or int(ANSWERS[p]) % 2 == 0
        return f"<think>x</think>{ANSWERS[p] if ok else 'nope'}"
    res = pass_at_1(FixedPolicy(fn), TASKS, seeds=(0, 1))
    assert res.per_seed == [1.0, 0.5]
    assert res.score == pytest.approx(0.75)


def test_fractional_kind_uses_raw_reward():
    task = InstructionTask("write", (Constraint("max_words", 2), Constraint("contains", "cat")))
    res = pass_at_1(FixedPolicy(lambda p, s: "<think>t</think>the dog ran"), [task])
    assert res.score == pytest.approx(0.0)
    res = pass_at_1(FixedPolicy(lambda p, s: "<think>t</think>cat"), [task])
    assert res.score == pytest.approx(1.0)
    res = pass_at_1(FixedPolicy(lambda p, s: "<think>t</think>a cat sat"), [task])
    assert res.score == pytest.approx(0.5)


def test_empty_tasks_rejected():
    with pytest.raises(ValueError):
        pass_at_1(FixedPolicy(lambda p, s: ""), [])


def test_thinking_token_examples():
    assert thinking_tokens(["<think>ab</think>x"]).counts == [2]
    assert thinking_tokens(["<think></think>x"]).counts == [0]
    assert thinking_tokens(["<think>ab</think>x", "<think></think>x"]).mean == 1.0


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="abc xyz0123", max_size=30), st.text(max_size=30).filter(lambda s: s.strip()))
def test_thinking_tokens_ignore_answer(thought, answer):
    a = thinking_tokens([f"<think>{thought}</think>{answer}"]).counts
    b = thinking_tokens([f"<think>{thought}</think>{answer}{answer}"]).counts
    assert a == b == [len(thought.encode("utf-8"))]


def test_suite_report_consistent_and_deterministic():
    pols = {
        "good": FixedPolicy(lambda p, s: f"<think>ab</think>\\boxed{{{ANSWERS[p]}}}"),
        "bad": FixedPolicy(lambda p, s: "<think>abcd</think>no"),
    }
    rep = run_suite(pols, {"add": TASKS, "add2": TASKS[:3]}, seeds=(0, 1))
    rows = {(r["model"], r["suite"]): r for r in rep.rows}
    assert rows["good", "add"]["pass_at_1"] == 1.0 and rows["bad", "add"]["pass_at_1"] == 0.0
    assert rows["good", "add"]["mean_thinking_tokens"] == 2.0
    assert rows["bad", "add2"]["mean_thinking_tokens"] == 4.0
    assert rows["good", "add2"]["n"] == 6
    assert rep.to_json() == run_suite(pols, {"add": TASKS, "add2": TASKS[:3]}, seeds=(0, 1)).to_json()
    assert json.loads(rep.to_json()) == rep.rows
    assert "good" in rep.table() and "add2" in rep.table()


def test_minilm_policy_deterministic(tiny_cfg, tiny_params):
    pol = MiniLMPolicy(tiny_cfg, tiny_params)
    tasks = addition_tasks(5, seed=3)
    a = pass_at_1(pol, tasks, max_new=8, seeds=(4,))
    b = pass_at_1(pol, tasks, max_new=8, seeds=(4,))
    assert a.outputs == b.outputs
    assert all(len(o) == 1 for o in a.outputs)


def test_token_figure_values():
    fig = render_token_figure()
    for v in ("8627", "13422", "17528"):
        assert v in fig
    assert PUBLISHED_THINKING_TOKENS["QWQ-32B"]["AIME-24"] == 13422
    lines = [l for l in fig.splitlines() if "AIME-24" in l or l.strip().endswith(("8627", "13422", "17528"))]
    bars = {l.split()[-1]: l.count("#") for l in lines if "#" in l}
    assert bars["8627"] < bars["13422"] < bars["17528"]

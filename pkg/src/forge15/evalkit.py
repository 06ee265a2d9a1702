"""pass@1 evaluation and thinking-token accounting."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import torch

from . import tokenizer as tok
from .minilm import ModelConfig, Params, generate
from .rewards import FormatSpec, RewardTask, check_format, composite_reward

# Thinking tokens per benchmark as reported for three models; display data only.
PUBLISHED_THINKING_TOKENS = {
    "15B thinker": {"AIME-24": 8627, "AIME-25": 10332, "GPQA Diamond": 5407, "MATH-500": 2511},
    "QWQ-32B": {"AIME-24": 13422, "AIME-25": 16398, "GPQA Diamond": 7575, "MATH-500": 4437},
    "LG-ExaOne-32B": {"AIME-24": 17528, "AIME-25": 19707, "GPQA Diamond": 10568, "MATH-500": 5317},
}


class Policy(Protocol):
    def generate(self, prompts: Sequence[str], *, temperature: float, top_p: float, max_new: int,
                 seed: int) -> list[str]:
        ...


@dataclass
class MiniLMPolicy:
    cfg: ModelConfig
    params: Params

    def generate(self, prompts, *, temperature=0.6, top_p=1.0, max_new=64, seed=0):
        g = torch.Generator().manual_seed(seed)
        out: list[str | None] = [None] * len(prompts)
        by_len: dict[int, list[int]] = {}
        encoded = [tok.prompt_tokens(p) for p in prompts]
        for i, e in enumerate(encoded):
            by_len.setdefault(len(e), []).append(i)
        for n in sorted(by_len):
            idx = by_len[n]
            toks, _, lengths = generate(self.cfg, self.params, torch.tensor([encoded[i] for i in idx]),
                                        temperature=temperature, top_p=top_p, max_new=max_new, generator=g)
            for row, i in enumerate(idx):
                out[i] = tok.decode(toks[row, : int(lengths[row])].tolist())
        return out


def _binarize(task: RewardTask, r: float) -> float:
    return float(r == 1.0) if task.binary else r


@dataclass
class PassAt1:
    score: float
    per_task: list[list[float]]  # [task][seed]
    outputs: list[list[str]]
    per_seed: list[float]


def pass_at_1(policy: Policy, tasks: Sequence[RewardTask], temperature: float = 0.6, max_new: int = 64,
              seeds: Sequence[int] = (0,), top_p: float = 1.0, spec: FormatSpec = FormatSpec()) -> PassAt1:
    """One sample per task per seed; score averaged over tasks, then seeds.

    Binary task kinds count only a reward of exactly 1; fractional kinds
    contribute their raw reward.
    """
    if not tasks:
        raise ValueError("no tasks")
    per_task = [[] for _ in tasks]
    outputs = [[] for _ in tasks]
    per_seed = []
    for s in seeds:
        texts = policy.generate([t.prompt for t in tasks], temperature=temperature, top_p=top_p,
                                max_new=max_new, seed=s)
        scores = [_binarize(t, composite_reward(x, t, spec)) for t, x in zip(tasks, texts)]
        for i, (x, sc) in enumerate(zip(texts, scores)):
            per_task[i].append(sc)
            outputs[i].append(x)
        per_seed.append(sum(scores) / len(scores))
    return PassAt1(sum(per_seed) / len(per_seed), per_task, outputs, per_seed)


@dataclass
class ThinkingCounts:
    mean: float
    counts: list[int]


def thinking_tokens(outputs: Sequence[str], spec: FormatSpec = FormatSpec()) -> ThinkingCounts:
    """Byte-token count between the think tags; a malformed output counts in full."""
    counts = []
    for text in outputs:
        fmt = check_format(text, spec)
        counts.append(len(tok.encode(fmt.thinking if fmt.valid else text)))
    return ThinkingCounts(sum(counts) / len(counts) if counts else 0.0, counts)


@dataclass
class SuiteReport:
    rows: list[dict]

    def to_json(self) -> str:
        return json.dumps(self.rows, indent=2, sort_keys=True)

    def table(self) -> str:
        models = list(dict.fromkeys(r["model"] for r in self.rows))
        suites = list(dict.fromkeys(r["suite"] for r in self.rows))
        cell = {(r["model"], r["suite"]): r for r in self.rows}
        width = max(12, *(len(s) for s in suites))
        mw = max(5, *(len(m) for m in models))
        lines = [f"{'model':<{mw}} | " + " | ".join(f"{s:>{width}}" for s in suites)]
        lines.append("-" * len(lines[0]))
        for m in models:
            vals = []
            for s in suites:
                r = cell.get((m, s))
                vals.append(f"{r['pass_at_1']:.3f} / {r['mean_thinking_tokens']:.1f}".rjust(width) if r else " " * width)
            lines.append(f"{m:<{mw}} | " + " | ".join(vals))
        lines.append("(cells: pass@1 / mean thinking tokens)")
        return "\n".join(lines)


def run_suite(policies: Mapping[str, Policy], task_suites: Mapping[str, Sequence[RewardTask]],
              temperature: float = 0.6, max_new: int = 64, seeds: Sequence[int] = (0,),
              spec: FormatSpec = FormatSpec()) -> SuiteReport:
    if not policies or not task_suites:
        raise ValueError("need at least one model and one suite")
    rows = []
    for mname, pol in policies.items():
        for sname, tasks in task_suites.items():
            res = pass_at_1(pol, tasks, temperature=temperature, max_new=max_new, seeds=seeds, spec=spec)
            th = thinking_tokens([x for outs in res.outputs for x in outs], spec)
            rows.append({"model": mname, "suite": sname, "pass_at_1": res.score,
                         "mean_thinking_tokens": th.mean, "n": len(th.counts)})
    return SuiteReport(rows)


def render_token_figure(data: Mapping[str, Mapping[str, float]] = PUBLISHED_THINKING_TOKENS,
                        width: int = 50) -> str:
    """Grouped horizontal bar chart (text), one group per benchmark."""
    benches = list(dict.fromkeys(b for per in data.values() for b in per))
    peak = max(v for per in data.values() for v in per.values())
    nw = max(len(m) for m in data)
    lines = ["Thinking tokens consumed by model"]
    for b in benches:
        lines.append(b)
        for m, per in data.items():
            if b in per:
                v = per[b]
                lines.append(f"  {m:<{nw}} {'#' * max(1, round(width * v / peak))} {v:g}")
    return "\n".join(lines)

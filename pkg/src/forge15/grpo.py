"""Group Relative Policy Optimization with rule-based rewards."""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import torch

from . import tokenizer as tok
from .minilm import ModelConfig, Params, completion_logprobs, generate
from .rewards import FormatSpec, MathTask, RewardTask, composite_reward
from .tensor_store import Checkpoint
from .trainer import AdamState, TrainConfig, adamw_step, clip_grads

log = logging.getLogger(__name__)


@dataclass
class GRPOConfig:
    group_size: int = 8
    temperature: float = 1.0
    top_p: float = 0.95
    max_new: int = 256
    lr: float = 1e-4
    kl_beta: float = 0.001
    clip_eps: float = 0.2
    batch_prompts: int = 16
    steps: int = 100
    seed: int = 0
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    checkpoint_every: int = 0
    adv_eps: float = 1e-8

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must be in (0, 1)")

    @classmethod
    def from_dict(cls, d: Mapping) -> "GRPOConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown grpo config keys: {sorted(unknown)}")
        return cls(**d)


# Full-scale RL settings; the desk defaults above are scaled down.
LARGE_SCALE_PRESET = dict(group_size=8, temperature=1.0, top_p=0.95, max_new=32768, lr=1e-6, kl_beta=0.001,
                    batch_prompts=512)


@dataclass
class RolloutGroup:
    task: RewardTask
    prompt: list[int]
    completions: list[list[int]]
    rewards: list[float]
    logp_old: list[torch.Tensor]
    logp_ref: list[torch.Tensor]
    texts: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.completions)
        if not (len(self.rewards) == len(self.logp_old) == len(self.logp_ref) == n):
            raise ValueError("group fields must have one entry per completion")
        for c, a, b in zip(self.completions, self.logp_old, self.logp_ref):
            if not (len(c) == len(a) == len(b)):
                raise ValueError("completion/logprob length mismatch")


def group_advantages(rewards: Sequence[float], group_size: int | None = None, eps: float = 1e-8) -> list[float]:
    """``(r - mean) / (population std + eps)``; all zeros for a constant group."""
    if group_size is not None and len(rewards) != group_size:
        raise ValueError(f"expected {group_size} rewards, got {len(rewards)}")
    n = len(rewards)
    mean = math.fsum(rewards) / n
    std = math.sqrt(math.fsum((r - mean) ** 2 for r in rewards) / n)
    if std == 0:
        return [0.0] * n
    return [(r - mean) / (std + eps) for r in rewards]


def kl_per_token(logp, logp_ref):
    """k3 estimator ``exp(ref - logp) - (ref - logp) - 1``; nonnegative."""
    if isinstance(logp, torch.Tensor) or isinstance(logp_ref, torch.Tensor):
        d = torch.as_tensor(logp_ref) - torch.as_tensor(logp)
        if not bool(torch.isfinite(d).all()):
            raise ValueError("non-finite logprob")
        return torch.expm1(d) - d
    if not (math.isfinite(logp) and math.isfinite(logp_ref)):
        raise ValueError("non-finite logprob")
    d = logp_ref - logp
    return math.expm1(d) - d


def _pad_completions(prompts: Sequence[Sequence[int]], comps: Sequence[Sequence[int]]) -> torch.Tensor:
    """Rows of prompt + completion, PAD-filled to a common length.

    All prompts must have the same length.
    """
    P = len(prompts[0])
    L = max(len(c) for c in comps)
    seqs = torch.full((len(comps), P + L), tok.PAD, dtype=torch.long)
    for i, (pr, c) in enumerate(zip(prompts, comps)):
        seqs[i, :P] = torch.tensor(list(pr), dtype=torch.long)
        seqs[i, P: P + len(c)] = torch.tensor(list(c), dtype=torch.long)
    return seqs


def rollout(cfg: ModelConfig, params: Params, ref_params: Params, tasks: Sequence[RewardTask],
            config: GRPOConfig, seed: int | None = None, spec: FormatSpec = FormatSpec()) -> list[RolloutGroup]:
    """Sample ``group_size`` completions per task and score them.

    ``logp_old`` and ``logp_ref`` are teacher-forced logprobs of the sampled
    tokens under ``params`` and ``ref_params`` respectively.
    """
    if not tasks:
        raise ValueError("no tasks to roll out")
    G = config.group_size
    g = torch.Generator().manual_seed(config.seed if seed is None else seed)
    prompts = [tok.prompt_tokens(t.prompt) for t in tasks]
    buckets: dict[int, list[int]] = defaultdict(list)
    for i, p in enumerate(prompts):
        buckets[len(p)].append(i)
    groups: list[RolloutGroup | None] = [None] * len(tasks)
    for plen in sorted(buckets):
        idx = buckets[plen]
        batch = torch.tensor([prompts[i] for i in idx for _ in range(G)])
        toks, _, lengths = generate(cfg, params, batch, temperature=config.temperature, top_p=config.top_p,
                                    max_new=config.max_new, generator=g)
        comps = [toks[r, : int(lengths[r])].tolist() for r in range(len(batch))]
        old, ref = _logprobs_for(cfg, params, ref_params, [prompts[i] for i in idx for _ in range(G)], comps)
        for j, ti in enumerate(idx):
            sl = slice(j * G, (j + 1) * G)
            texts = [tok.decode(c) for c in comps[sl]]
            rewards = [composite_reward(t, tasks[ti], spec) for t in texts]
            groups[ti] = RolloutGroup(tasks[ti], prompts[ti], comps[sl], rewards, old[sl], ref[sl], texts)
    return groups


@torch.no_grad()
def _logprobs_for(cfg, params, ref_params, prompts, comps):
    nonempty = [i for i, c in enumerate(comps) if c]
    old = [torch.zeros(0, dtype=torch.float64) for _ in comps]
    ref = [torch.zeros(0, dtype=torch.float64) for _ in comps]
    if nonempty:
        seqs = _pad_completions([prompts[i] for i in nonempty], [comps[i] for i in nonempty])
        P = len(prompts[0])
        lp = completion_logprobs(cfg, params, seqs, P)
        lr = completion_logprobs(cfg, ref_params, seqs, P)
        for row, i in enumerate(nonempty):
            n = len(comps[i])
            old[i], ref[i] = lp[row, :n].clone(), lr[row, :n].clone()
    return old, ref


def grpo_loss(cfg: ModelConfig, params, groups: Sequence[RolloutGroup], config: GRPOConfig):
    """Clipped surrogate with per-completion length normalisation plus a k3
    KL penalty to the reference logprobs. Returns ``(loss, stats)``."""
    if not groups:
        raise ValueError("no rollout groups")
    terms, kls, clipped, n_tok, lengths = [], [], 0, 0, []
    for grp in groups:
        adv = group_advantages(grp.rewards, eps=config.adv_eps)
        keep = [i for i, c in enumerate(grp.completions) if c]
        lengths += [len(c) for c in grp.completions]
        if not keep:
            continue
        seqs = _pad_completions([grp.prompt] * len(keep), [grp.completions[i] for i in keep])
        logp = completion_logprobs(cfg, params, seqs, len(grp.prompt))
        for row, i in enumerate(keep):
            n = len(grp.completions[i])
            cur = logp[row, :n]
            ratio = torch.exp(cur - grp.logp_old[i])
            a = adv[i]
            surr = torch.minimum(ratio * a, torch.clamp(ratio, 1 - config.clip_eps, 1 + config.clip_eps) * a)
            term = -surr.mean()
            kl = kl_per_token(cur, grp.logp_ref[i]).mean()
            if config.kl_beta:
                term = term + config.kl_beta * kl
            terms.append(term)
            kls.append(float(kl.detach()))
            clipped += int(((ratio - 1).abs() > config.clip_eps).sum())
            n_tok += n
    if not terms:
        loss = sum(p.sum() * 0.0 for p in params.values())
    else:
        loss = torch.stack(terms).mean()
    rewards = [r for grp in groups for r in grp.rewards]
    stats = {
        "loss": float(loss.detach()),
        "mean_reward": sum(rewards) / len(rewards),
        "mean_kl": sum(kls) / len(kls) if kls else 0.0,
        "clip_frac": clipped / n_tok if n_tok else 0.0,
        "mean_length": sum(lengths) / len(lengths),
    }
    return loss, stats


def _adam_config(config: GRPOConfig) -> TrainConfig:
    return TrainConfig(base_lr=config.lr, final_lr=config.lr, weight_decay=config.weight_decay, grad_clip=None)


def grpo_step(cfg: ModelConfig, params: Params, groups: Sequence[RolloutGroup], config: GRPOConfig,
              state: AdamState | None = None) -> tuple[Params, AdamState, dict]:
    """One AdamW update (constant lr) on the GRPO loss."""
    state = state or AdamState()
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss, stats = grpo_loss(cfg, leaves, groups, config)
    names = list(leaves)
    gs = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    grads = {k: torch.zeros_like(leaves[k]) if g is None else g for k, g in zip(names, gs)}
    detached = {k: v.detach() for k, v in leaves.items()}
    if config.grad_clip:
        grads, stats["grad_norm"] = clip_grads(grads, config.grad_clip)
    new, state = adamw_step(detached, grads, state, config.lr, _adam_config(config))
    return new, state, stats


@dataclass
class CurationReport:
    selected: list[RewardTask]
    tallies: list[tuple[int, int]]


def keep_by_tally(correct: int, incorrect: int, min_correct: int = 1, min_incorrect: int = 3) -> bool:
    return correct >= min_correct and incorrect >= min_incorrect


def curate_math_prompts(cfg: ModelConfig, params: Params, math_tasks: Sequence[MathTask], config: GRPOConfig,
                        seed: int | None = None) -> CurationReport:
    """Keep prompts with at least one correct and at least three incorrect samples."""
    if any(not isinstance(t, MathTask) for t in math_tasks):
        raise ValueError("curate_math_prompts accepts math tasks only")
    if not math_tasks:
        return CurationReport([], [])
    groups = rollout(cfg, params, params, math_tasks, config, seed=seed)
    return curate_from_rewards([g.task for g in groups], [g.rewards for g in groups])


def curate_from_rewards(tasks: Sequence[RewardTask], rewards: Sequence[Sequence[float]]) -> CurationReport:
    tallies = [(sum(r == 1.0 for r in rs), sum(r == 0.0 for r in rs)) for rs in rewards]
    selected = [t for t, (c, w) in zip(tasks, tallies) if keep_by_tally(c, w)]
    return CurationReport(selected, tallies)


@dataclass
class GRPOResult:
    params: Params
    checkpoints: list[tuple[int, Checkpoint]]
    metrics: list[dict]


def train_grpo(cfg: ModelConfig, params: Params, tasks: Sequence[RewardTask], config: GRPOConfig,
               on_step: Callable[[int, Params, dict], None] | None = None,
               meta: Mapping[str, str] | None = None) -> GRPOResult:
    """Alternate rollout and ``grpo_step`` for ``config.steps`` updates.

    The reference policy is the input ``params``, frozen for the whole run.
    Each step draws ``batch_prompts`` tasks (cycling through a seeded
    permutation of ``tasks``).
    """
    if not tasks:
        raise ValueError("no tasks")
    ref = {k: v.detach().clone() for k, v in params.items()}
    params = {k: v.detach().clone() for k, v in params.items()}
    g = torch.Generator().manual_seed(config.seed)
    order: list[int] = []
    state = AdamState()
    metrics, ckpts = [], []
    for step in range(config.steps):
        batch = []
        while len(batch) < min(config.batch_prompts, len(tasks)):
            if not order:
                order = torch.randperm(len(tasks), generator=g).tolist()
            batch.append(tasks[order.pop()])
        groups = rollout(cfg, params, ref, batch, config, seed=config.seed * 1_000_003 + step)
        params, state, stats = grpo_step(cfg, params, groups, config, state)
        row = {"step": step, **{k: stats[k] for k in ("mean_reward", "mean_kl", "clip_frac", "mean_length", "loss")}}
        metrics.append(row)
        if on_step is not None:
            on_step(step, params, row)
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            ckpts.append((step + 1, Checkpoint.from_params(cfg, params, {**(meta or {}), "step": str(step + 1)})))
    return GRPOResult(params, ckpts, metrics)


def write_metrics(path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def config_dict(config: GRPOConfig) -> dict:
    return asdict(config)

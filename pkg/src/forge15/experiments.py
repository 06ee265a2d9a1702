"""Scripted toy-scale experiments used by the acceptance suite and the CLI."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import toydata
from .evalkit import MiniLMPolicy, pass_at_1
from .grpo import GRPOConfig, rollout, train_grpo
from .minilm import ModelConfig, Params, grad, init_params, loss
from .surgery import STRATEGIES, depth_upscale
from .tensor_store import Checkpoint
from .trainer import AdamState, TrainConfig, _pad_rows, adamw_step, clip_grads, prepare_rows, train_supervised

log = logging.getLogger(__name__)

ADDITION_ARCH = ModelConfig(n_layers=2, d_model=64, n_heads=4, d_ff=128, max_seq_len=64)


def mean_reward(cfg: ModelConfig, params: Params, tasks, samples: int = 4, seed: int = 999,
                max_new: int = 24) -> float:
    """Mean composite reward at the RL sampling settings (temperature 1.0, top-p 0.95)."""
    groups = rollout(cfg, params, params, tasks, GRPOConfig(group_size=samples, max_new=max_new, seed=seed))
    rs = [r for g in groups for r in g.rewards]
    return sum(rs) / len(rs)


@dataclass
class AdditionRun:
    seed: int
    sft_steps: int
    reward_before: float
    reward_after: float
    curve: list[tuple[int, float]] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def gain(self) -> float:
        return self.reward_after - self.reward_before


def sft_until(cfg: ModelConfig, params: Params, samples, eval_tasks, *, target: float, lr: float = 3e-3,
              batch: int = 32, check_every: int = 25, max_steps: int = 3000, seed: int = 0):
    """Train on random minibatches until the eval mean reward reaches ``target``."""
    tc = TrainConfig(base_lr=lr, final_lr=lr, warmup_frac=0.0, weight_decay=0.0, pack=False,
                     seq_len=cfg.max_seq_len, seed=seed)
    rows = prepare_rows(samples, "sft", tc)
    rng = np.random.default_rng(seed)
    state = AdamState()
    for step in range(1, max_steps + 1):
        b = _pad_rows([rows[i] for i in rng.integers(0, len(rows), batch)])
        g, _ = clip_grads(grad(cfg, params, b), 1.0)
        params, state = adamw_step(params, g, state, lr, tc)
        if step % check_every == 0 and mean_reward(cfg, params, eval_tasks) >= target:
            return params, step
    return params, max_steps


def addition_grpo(seed: int = 0, steps: int = 300, sft_target: float = 0.2, lr: float = 3e-4,
                  eval_every: int = 50, cfg: ModelConfig = ADDITION_ARCH) -> AdditionRun:
    """SFT a tiny model on think-format addition until its mean reward reaches
    ``sft_target``, then run GRPO at the RL settings (G=8, T=1.0, top-p 0.95,
    KL 0.001) and measure the mean reward again on held-out prompts."""
    t0 = time.time()
    eval_tasks = toydata.addition_tasks(64, seed=1000)
    params = init_params(cfg, seed)
    params, sft_steps = sft_until(cfg, params, toydata.addition_sft(4000, seed=seed), eval_tasks,
                                  target=sft_target, seed=seed)
    before = mean_reward(cfg, params, eval_tasks)
    gcfg = GRPOConfig(group_size=8, temperature=1.0, top_p=0.95, max_new=24, lr=lr, kl_beta=0.001,
                      batch_prompts=16, steps=steps, seed=seed)
    curve = [(0, before)]

    def on_step(step, p, row):
        if (step + 1) % eval_every == 0 and step + 1 < steps:
            curve.append((step + 1, mean_reward(cfg, p, eval_tasks)))

    res = train_grpo(cfg, params, toydata.addition_tasks(2000, seed=seed + 7), gcfg, on_step=on_step)
    after = mean_reward(cfg, res.params, eval_tasks)
    curve.append((steps, after))
    return AdditionRun(seed, sft_steps, before, after, curve, res.metrics, time.time() - t0)


@dataclass
class StrategyReport:
    base_loss: float
    initial_loss: dict[str, float]
    trained_loss: dict[str, float]
    n_params: dict[str, int]

    def ordering(self) -> list[str]:
        return sorted(self.initial_loss, key=self.initial_loss.get)

    def table(self) -> str:
        lines = [f"{'strategy':<18} {'params':>8} {'initial loss':>13} {'after CPT':>10}",
                 f"{'(base)':<18} {'':>8} {self.base_loss:>13.4f}"]
        for s in self.ordering():
            lines.append(f"{s:<18} {self.n_params[s]:>8} {self.initial_loss[s]:>13.4f} "
                         f"{self.trained_loss.get(s, math.nan):>10.4f}")
        return "\n".join(lines)


def depth_strategy_comparison(seed: int = 0, base_epochs: int = 10, cpt_epochs: int = 1) -> StrategyReport:
    """Upscale one trained 6-layer base to 8 layers with each strategy and
    report the CPT loss before and after a short CPT run."""
    cfg = ModelConfig(n_layers=6, d_model=32, n_heads=4, d_ff=64, max_seq_len=96)
    corpus = toydata.addition_cpt(600, seed=seed)
    held = prepare_rows(toydata.addition_cpt(120, seed=seed + 1), "cpt", TrainConfig(seq_len=96))
    tc = TrainConfig(base_lr=3e-3, final_lr=3e-4, epochs=base_epochs, batch_samples=8, seq_len=96, seed=seed)
    base = train_supervised(cfg, init_params(cfg, seed), corpus, tc, mode="cpt")
    base_ckpt = Checkpoint.from_params(cfg, base.params)
    with torch.no_grad():
        base_loss = float(loss(cfg, base.params, held))
    initial, trained, counts = {}, {}, {}
    cpt = TrainConfig(base_lr=1e-3, final_lr=1e-4, epochs=cpt_epochs, batch_samples=8, seq_len=96, seed=seed)
    for s in STRATEGIES:
        up = depth_upscale(base_ckpt, 8, s, (2, 3))
        p = up.to_params()
        with torch.no_grad():
            initial[s] = float(loss(up.arch, p, held))
        res = train_supervised(up.arch, p, corpus, cpt, mode="cpt")
        with torch.no_grad():
            trained[s] = float(loss(up.arch, res.params, held))
        counts[s] = up.n_params()
    return StrategyReport(base_loss, initial, trained, counts)


def addition_pass_at_1(cfg: ModelConfig, params: Params, n: int = 32, seeds=(0, 1)) -> float:
    return pass_at_1(MiniLMPolicy(cfg, params), toydata.addition_tasks(n, seed=2000), seeds=seeds,
                     max_new=24).score

"""Supervised training (CPT and SFT), cosine schedule with linear warmup, AdamW."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from . import data as dp
from .minilm import ModelConfig, Params, TokenBatch, forward, lm_loss
from .tensor_store import Checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    final_lr: float = 0.0
    warmup_frac: float = 0.10
    epochs: int = 1
    batch_samples: int = 8
    seq_len: int = 128
    weight_decay: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = 1.0
    pack: bool = True
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup_frac must be in [0, 1)")
        if self.base_lr <= 0 or self.final_lr < 0:
            raise ValueError("base_lr must be > 0 and final_lr >= 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# Full-scale values, kept as named presets rather than desk defaults.
PRESETS = {
    "upscale_pretrain": dict(base_lr=5e-5, final_lr=5e-5, warmup_frac=0.0, batch_samples=768, seq_len=16384),
    "cpt": dict(base_lr=5e-5, final_lr=5e-6, warmup_frac=0.10, weight_decay=0.1, batch_samples=768,
                seq_len=16384),
    "sft_small": dict(base_lr=1e-5, final_lr=0.0, warmup_frac=0.10, epochs=3, batch_samples=128,
                      seq_len=16384, pack=False),
    "sft": dict(base_lr=1e-5, final_lr=0.0, warmup_frac=0.10, seq_len=32768),
}


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup over ``round(warmup_frac * total)`` steps, then cosine
    decay from ``base_lr`` to ``final_lr`` at ``total_steps``."""
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    base, final = config.base_lr, config.final_lr
    warm = round(config.warmup_frac * total_steps)
    if step < warm:
        return base * (step + 1) / warm
    if step == warm:
        return base
    if step == total_steps:
        return final
    progress = (step - warm) / (total_steps - warm)
    return final + 0.5 * (base - final) * (1 + math.cos(math.pi * progress))


def _decays(name: str, p: torch.Tensor) -> bool:
    # no decay on norm scales (1-D) or the embedding table
    return p.dim() >= 2 and name != "embed"


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adamw_step(params: Params, grads: Mapping[str, torch.Tensor], state: AdamState, lr: float,
               config: TrainConfig) -> tuple[Params, AdamState]:
    """One AdamW update with bias correction and decoupled weight decay.

    Returns new parameter and state objects; inputs are not modified.
    """
    b1, b2, eps, wd = config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}: {tuple(g.shape)} vs {tuple(p.shape)}")
        if not bool(torch.isfinite(g).all()):
            raise FloatingPointError(f"non-finite gradient in {name!r}")
        m = state.m.get(name, torch.zeros_like(p)) * b1 + (1 - b1) * g
        v = state.v.get(name, torch.zeros_like(p)) * b2 + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        q = p
        if wd and _decays(name, p):
            q = p * (1 - lr * wd)
        new_p[name] = q - lr * m_hat / (v_hat.sqrt() + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(t, new_m, new_v)


def clip_grads(grads: dict[str, torch.Tensor], max_norm: float) -> tuple[dict[str, torch.Tensor], float]:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


def render(dataset: Sequence, mode: str) -> list[TokenBatch]:
    if mode == "cpt":
        return [dp.render_cpt(s) for s in dataset]
    if mode == "sft":
        return [dp.render_chat(s) for s in dataset]
    raise ValueError(f"unknown mode {mode!r}")


def _pad_rows(rows: list[TokenBatch]) -> list[TokenBatch]:
    n = max(len(r) for r in rows)
    out = []
    for r in rows:
        k = n - len(r)
        out.append(TokenBatch(r.tokens + [dp.tok.PAD] * k, r.doc_ids + [dp.PAD_DOC] * k, r.loss_mask + [0] * k))
    return out


def prepare_rows(dataset: Sequence, mode: str, config: TrainConfig) -> list[TokenBatch]:
    rendered = render(dataset, mode)
    if config.pack:
        return dp.pack_sequences(rendered, config.seq_len)
    for i, r in enumerate(rendered):
        if len(r) > config.seq_len:
            raise dp.DataError(f"sample {i} has length {len(r)} > seq_len {config.seq_len}")
    return rendered


@dataclass
class TrainResult:
    params: Params
    epoch_checkpoints: list[Checkpoint]
    step_checkpoints: list[tuple[int, Checkpoint]]
    log: list[dict]


def train_supervised(cfg: ModelConfig, params: Params, dataset: Sequence, config: TrainConfig,
                     mode: str = "sft", meta: Mapping[str, str] | None = None) -> TrainResult:
    """Shared CPT/SFT loop: render, pack, shuffle per epoch, AdamW under ``lr_at``.

    Emits one checkpoint per epoch plus one every ``checkpoint_every`` steps
    (when positive), and a loss log of ``{step, epoch, lr, loss, grad_norm}``.
    """
    params = {k: v.detach().clone() for k, v in params.items()}
    if config.epochs == 0:
        return TrainResult(params, [], [], [])
    rows = prepare_rows(dataset, mode, config)
    if not rows:
        raise ValueError("dataset is empty after rendering")
    per_epoch = math.ceil(len(rows) / config.batch_samples)
    total = per_epoch * config.epochs
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    history, epoch_ckpts, step_ckpts = [], [], []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(rows))
        for b in range(per_epoch):
            batch = _pad_rows([rows[i] for i in order[b * config.batch_samples:(b + 1) * config.batch_samples]])
            if not any(any(r.loss_mask[1:]) for r in batch):
                continue
            leaves = {k: v.requires_grad_(True) for k, v in params.items()}
            loss = lm_loss(forward(cfg, leaves, batch), batch)
            names = list(leaves)
            gs = torch.autograd.grad(loss, [leaves[k] for k in names])
            grads = {k: g for k, g in zip(names, gs)}
            params = {k: v.detach() for k, v in leaves.items()}
            norm = math.nan
            if config.grad_clip:
                grads, norm = clip_grads(grads, config.grad_clip)
            lr = lr_at(step, total, config)
            params, state = adamw_step(params, grads, state, lr, config)
            history.append({"step": step, "epoch": epoch, "lr": lr, "loss": float(loss.detach()), "grad_norm": norm})
            step += 1
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                step_ckpts.append((step, Checkpoint.from_params(cfg, params, {**(meta or {}), "step": str(step)})))
        epoch_ckpts.append(Checkpoint.from_params(cfg, params, {**(meta or {}), "epoch": str(epoch + 1)}))
        log.info("epoch %d done, last loss %.4f", epoch + 1, history[-1]["loss"] if history else float("nan"))
    return TrainResult(params, epoch_ckpts, step_ckpts, history)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)

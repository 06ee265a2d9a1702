"""Miniature decoder-only transformer.

Pre-norm RMSNorm blocks with rotary attention and a gated (SiLU) MLP, an
untied output head, and block-diagonal causal attention over packed
documents. Parameters are a plain ``dict[str, torch.Tensor]`` so that
checkpoint surgery and merging can treat them as named tensors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import tokenizer as tok

Params = dict[str, torch.Tensor]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    vocab_size: int = tok.VOCAB_SIZE
    max_seq_len: int = 512
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be a multiple of n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.vocab_size < tok.VOCAB_SIZE:
            raise ValueError(f"vocab_size must be >= {tok.VOCAB_SIZE} for the byte tokenizer")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**self.to_dict(), **kw})


LAYER_TENSORS = (
    "attn.q", "attn.k", "attn.v", "attn.o",
    "mlp.gate", "mlp.up", "mlp.down",
    "attn_norm", "mlp_norm",
)


def layer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of one block's tensors, keyed by the suffix after ``layers.{i}.``.

    Projections are stored as ``[out_features, in_features]``.
    """
    d, f = cfg.d_model, cfg.d_ff
    return {
        "attn.q": (d, d),
        "attn.k": (d, d),
        "attn.v": (d, d),
        "attn.o": (d, d),
        "mlp.gate": (f, d),
        "mlp.up": (f, d),
        "mlp.down": (d, f),
        "attn_norm": (d,),
        "mlp_norm": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {
        "embed": (cfg.vocab_size, cfg.d_model),
        "final_norm": (cfg.d_model,),
        "head": (cfg.d_model, cfg.vocab_size),
    }
    per_layer = layer_shapes(cfg)
    for i in range(cfg.n_layers):
        for k, s in per_layer.items():
            shapes[f"layers.{i}.{k}"] = s
    return dict(sorted(shapes.items()))


def per_layer_param_count(cfg: ModelConfig) -> int:
    return 4 * cfg.d_model**2 + 3 * cfg.d_model * cfg.d_ff + 2 * cfg.d_model


def param_count(cfg: ModelConfig) -> int:
    return cfg.n_layers * per_layer_param_count(cfg) + 2 * cfg.vocab_size * cfg.d_model + cfg.d_model


def init_params(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> Params:
    g = torch.Generator().manual_seed(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = torch.ones(shape, dtype=dtype)
            continue
        std = 0.02
        if name.endswith("attn.o") or name.endswith("mlp.down"):
            std = 0.02 / math.sqrt(2 * cfg.n_layers)
        params[name] = (torch.randn(shape, generator=g, dtype=torch.float64) * std).to(dtype)
    return params


@dataclass
class TokenBatch:
    """One token row with packing document ids and a per-token loss mask."""

    tokens: list[int]
    doc_ids: list[int] = field(default=None)
    loss_mask: list[int] = field(default=None)

    def __post_init__(self):
        self.tokens = [int(t) for t in self.tokens]
        n = len(self.tokens)
        self.doc_ids = [0] * n if self.doc_ids is None else [int(d) for d in self.doc_ids]
        self.loss_mask = [1] * n if self.loss_mask is None else [int(m) for m in self.loss_mask]
        if not (len(self.doc_ids) == len(self.loss_mask) == n):
            raise ValueError("tokens, doc_ids and loss_mask must have equal lengths")

    def __len__(self) -> int:
        return len(self.tokens)


def _as_rows(x, dtype=torch.long) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x), dtype=dtype) if not isinstance(x, torch.Tensor) else x.to(dtype)
    return t.unsqueeze(0) if t.dim() == 1 else t


def _batch_tensors(batch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if isinstance(batch, TokenBatch):
        batch = [batch]
    return (
        _as_rows([b.tokens for b in batch]),
        _as_rows([b.doc_ids for b in batch]),
        _as_rows([b.loss_mask for b in batch]),
    )


def _positions(doc_ids: torch.Tensor) -> torch.Tensor:
    # rotary positions restart at each document boundary
    B, T = doc_ids.shape
    idx = torch.arange(T).expand(B, T)
    start = torch.ones_like(doc_ids, dtype=torch.bool)
    start[:, 1:] = doc_ids[:, 1:] != doc_ids[:, :-1]
    first = torch.where(start, idx, torch.zeros_like(idx))
    return idx - torch.cummax(first, dim=1).values


def _rope(x: torch.Tensor, pos: torch.Tensor, theta: float) -> torch.Tensor:
    # x: [B, H, T, hd]; pos: [B, T]
    hd = x.shape[-1]
    inv = 1.0 / (theta ** (torch.arange(0, hd, 2, dtype=torch.float64) / hd))
    ang = pos.to(torch.float64)[:, None, :, None] * inv  # [B,1,T,hd/2]
    cos = torch.cos(ang).to(x.dtype)
    sin = torch.sin(ang).to(x.dtype)
    x1, x2 = x[..., : hd // 2], x[..., hd // 2:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def _rmsnorm(x: torch.Tensor, scale: torch.Tensor, eps: float) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * scale


def forward(cfg: ModelConfig, params: Mapping[str, torch.Tensor], tokens, doc_ids=None) -> torch.Tensor:
    """Logits ``[B, T, vocab]`` (or ``[T, vocab]`` for a 1-D input).

    Attention is causal and restricted to positions sharing a doc id.
    """
    if isinstance(tokens, TokenBatch) or (isinstance(tokens, list) and tokens
                                          and isinstance(tokens[0], TokenBatch)):
        squeeze = isinstance(tokens, TokenBatch)
        toks, docs, _ = _batch_tensors(tokens)
    else:
        squeeze = np.ndim(tokens) == 1
        toks = _as_rows(tokens)
        docs = torch.zeros_like(toks) if doc_ids is None else _as_rows(doc_ids)
    B, T = toks.shape
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if T == 0:
        raise ValueError("empty sequence")
    if int(toks.min()) < 0 or int(toks.max()) >= cfg.vocab_size:
        raise ValueError("token id out of range")
    if docs.shape != toks.shape:
        raise ValueError("doc_ids shape must match tokens")

    H, hd = cfg.n_heads, cfg.head_dim
    pos = _positions(docs)
    causal = torch.ones(T, T, dtype=torch.bool).tril()
    allowed = causal & (docs[:, :, None] == docs[:, None, :])  # [B,T,T]
    bias = torch.zeros(allowed.shape, dtype=params["embed"].dtype).masked_fill(~allowed, float("-inf"))
    bias = bias[:, None]

    x = params["embed"][toks]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = _rmsnorm(x, params[p + "attn_norm"], cfg.norm_eps)
        q = (h @ params[p + "attn.q"].T).view(B, T, H, hd).transpose(1, 2)
        k = (h @ params[p + "attn.k"].T).view(B, T, H, hd).transpose(1, 2)
        v = (h @ params[p + "attn.v"].T).view(B, T, H, hd).transpose(1, 2)
        q, k = _rope(q, pos, cfg.rope_theta), _rope(k, pos, cfg.rope_theta)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd) + bias
        att = torch.softmax(att, dim=-1)
        a = (att @ v).transpose(1, 2).reshape(B, T, cfg.d_model)
        x = x + a @ params[p + "attn.o"].T
        h = _rmsnorm(x, params[p + "mlp_norm"], cfg.norm_eps)
        m = F.silu(h @ params[p + "mlp.gate"].T) * (h @ params[p + "mlp.up"].T)
        x = x + m @ params[p + "mlp.down"].T
    x = _rmsnorm(x, params["final_norm"], cfg.norm_eps)
    logits = x @ params["head"]
    return logits[0] if squeeze else logits


def lm_loss(logits: torch.Tensor, batch) -> torch.Tensor:
    """Mean next-token cross-entropy over target tokens whose loss_mask is 1.

    The prediction at position t targets token t+1 and counts only when
    ``loss_mask[t+1] == 1`` and both positions belong to the same document.
    Reductions run in float64.
    """
    toks, docs, mask = _batch_tensors(batch)
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
    valid = (mask[:, 1:] == 1) & (docs[:, 1:] == docs[:, :-1])
    if not bool(valid.any()):
        raise ValueError("empty loss mask")
    logp = torch.log_softmax(logits[:, :-1].to(torch.float64), dim=-1)
    tgt = logp.gather(-1, toks[:, 1:, None]).squeeze(-1)
    return -(tgt[valid]).sum() / valid.sum()


def loss(cfg: ModelConfig, params, batch) -> torch.Tensor:
    _check_mask(batch)
    toks, docs, _ = _batch_tensors(batch)
    return lm_loss(forward(cfg, params, toks, docs), batch)


def _check_mask(batch):
    batches = [batch] if isinstance(batch, TokenBatch) else batch
    if not any(any(m for m in b.loss_mask[1:]) for b in batches):
        raise ValueError("empty loss mask")


def grad(cfg: ModelConfig, params: Params, batch) -> Params:
    """Exact gradient of the masked LM loss with respect to every parameter."""
    _check_mask(batch)
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    value = loss(cfg, leaves, batch)
    names = list(leaves)
    gs = torch.autograd.grad(value, [leaves[k] for k in names], allow_unused=True)
    return {k: (torch.zeros_like(leaves[k]) if g is None else g.detach()) for k, g in zip(names, gs)}


def nucleus_filter(probs: torch.Tensor, top_p: float) -> torch.Tensor:
    """Zero out everything outside the smallest descending-probability prefix
    whose cumulative mass reaches ``top_p``, then renormalize (last dim)."""
    if top_p >= 1.0:
        return probs / probs.sum(-1, keepdim=True)
    sorted_p, order = torch.sort(probs, dim=-1, descending=True)
    before = torch.cumsum(sorted_p, dim=-1) - sorted_p
    keep_sorted = before < top_p
    keep = torch.zeros_like(keep_sorted).scatter(-1, order, keep_sorted)
    out = torch.where(keep, probs, torch.zeros_like(probs))
    return out / out.sum(-1, keepdim=True)


@dataclass
class SampleResult:
    tokens: list[int]
    logprobs: list[float]


def _check_sampling(temperature: float, top_p: float):
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    if not 0 < top_p <= 1:
        raise ValueError("top_p must be in (0, 1]")


@torch.no_grad()
def generate(
    cfg: ModelConfig,
    params: Params,
    prompts: torch.Tensor,
    *,
    temperature: float,
    top_p: float,
    max_new: int,
    generator: torch.Generator,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batched nucleus sampling from equal-length prompts ``[B, P]``.

    Returns ``(completions [B, L], logprobs [B, L], lengths [B])``. Positions
    after a row's EOS hold PAD with logprob 0. The reported logprob is under
    the temperature-scaled full softmax (before nucleus truncation).
    """
    _check_sampling(temperature, top_p)
    if prompts.dim() != 2 or prompts.shape[1] == 0:
        raise ValueError("empty prompt")
    B, P = prompts.shape
    max_new = min(max_new, cfg.max_seq_len - P)
    seq = prompts.clone()
    done = torch.zeros(B, dtype=torch.bool)
    lengths = torch.zeros(B, dtype=torch.long)
    out_tok, out_lp = [], []
    for _ in range(max(max_new, 0)):
        logits = forward(cfg, params, seq)[:, -1].to(torch.float64) / temperature
        logp = torch.log_softmax(logits, dim=-1)
        probs = nucleus_filter(logp.exp(), top_p)
        nxt = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
        lp = logp.gather(-1, nxt[:, None]).squeeze(-1)
        nxt = torch.where(done, torch.full_like(nxt, tok.PAD), nxt)
        lp = torch.where(done, torch.zeros_like(lp), lp)
        lengths += (~done).long()
        out_tok.append(nxt)
        out_lp.append(lp)
        done |= nxt == tok.EOS
        seq = torch.cat([seq, nxt[:, None]], dim=1)
        if bool(done.all()):
            break
    if not out_tok:
        return torch.zeros(B, 0, dtype=torch.long), torch.zeros(B, 0, dtype=torch.float64), lengths
    return torch.stack(out_tok, 1), torch.stack(out_lp, 1), lengths


def sample(
    cfg: ModelConfig,
    params: Params,
    prompt: Sequence[int],
    temperature: float = 1.0,
    top_p: float = 1.0,
    max_new: int = 64,
    seed: int = 0,
) -> SampleResult:
    """Sample one completion; deterministic for a given seed. Stops at EOS (kept)."""
    _check_sampling(temperature, top_p)
    if len(prompt) == 0:
        raise ValueError("empty prompt")
    g = torch.Generator().manual_seed(seed)
    toks, lps, lengths = generate(
        cfg, params, torch.tensor([list(prompt)]), temperature=temperature, top_p=top_p,
        max_new=max_new, generator=g,
    )
    n = int(lengths[0])
    return SampleResult(toks[0, :n].tolist(), lps[0, :n].tolist())


def completion_logprobs(
    cfg: ModelConfig, params, seqs: torch.Tensor, prompt_len: int, temperature: float = 1.0
) -> torch.Tensor:
    """Teacher-forced logprobs of ``seqs[:, prompt_len:]``, shape ``[B, T - prompt_len]``.

    Differentiable with respect to ``params``.
    """
    seqs = _as_rows(seqs)
    if not 0 < prompt_len < seqs.shape[1]:
        raise ValueError("prompt_len must be in [1, len(tokens))")
    logits = forward(cfg, params, seqs)[:, prompt_len - 1: -1]
    logp = torch.log_softmax(logits.to(torch.float64) / temperature, dim=-1)
    return logp.gather(-1, seqs[:, prompt_len:, None]).squeeze(-1)


def sequence_logprobs(cfg: ModelConfig, params, tokens: Sequence[int], prompt_len: int,
                      temperature: float = 1.0) -> torch.Tensor:
    if not 0 < prompt_len < len(tokens):
        raise ValueError("prompt_len must be in [1, len(tokens))")
    return completion_logprobs(cfg, params, torch.tensor([list(tokens)]), prompt_len, temperature)[0]

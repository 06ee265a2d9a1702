"""Rendering CPT and chat samples to token rows, packing, and mixture sampling."""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tokenizer as tok
from .minilm import TokenBatch

ROLES = ("system", "user", "assistant")
DOMAIN_TAGS = ("math", "code", "rag", "fc", "if", "chat", "science")
CPT_KINDS = ("reasoning", "cot", "pretrain")

PAD_DOC = -1


class DataError(ValueError):
    pass


@dataclass
class Message:
    role: str
    content: str
    thinking: str | None = None


@dataclass
class ChatSample:
    messages: list[Message]
    domain_tag: str = "chat"

    def validate(self) -> None:
        msgs = self.messages
        if msgs and msgs[0].role == "system":
            msgs = msgs[1:]
        for i, m in enumerate(msgs):
            if m.role not in ROLES:
                raise DataError(f"unknown role {m.role!r}")
            want = "user" if i % 2 == 0 else "assistant"
            if m.role != want:
                raise DataError(f"malformed role sequence: expected {want} at turn {i}, got {m.role}")
            if m.thinking is not None and m.role != "assistant":
                raise DataError("thinking is only allowed on assistant messages")
        if not any(m.role == "assistant" for m in msgs):
            raise DataError("no assistant turn")

    @classmethod
    def from_json(cls, row: Mapping) -> "ChatSample":
        msgs = [Message(m["role"], m["content"], m.get("thinking")) for m in row["messages"]]
        return cls(msgs, row.get("domain_tag", "chat"))

    def to_json(self) -> dict:
        msgs = []
        for m in self.messages:
            d = {"role": m.role, "content": m.content}
            if m.thinking is not None:
                d["thinking"] = m.thinking
            msgs.append(d)
        return {"messages": msgs, "domain_tag": self.domain_tag}

    @property
    def prompt(self) -> str:
        return next(m.content for m in self.messages if m.role == "user")


@dataclass
class CPTSample:
    segments: list[str]
    kind: str = "pretrain"

    @classmethod
    def from_json(cls, row: Mapping) -> "CPTSample":
        return cls(list(row["segments"]), row.get("kind", "pretrain"))

    def to_json(self) -> dict:
        return {"segments": list(self.segments), "kind": self.kind}


def render_cpt(sample: CPTSample) -> TokenBatch:
    if not sample.segments:
        raise DataError("empty sample")
    if sample.kind not in CPT_KINDS:
        raise DataError(f"unknown CPT kind {sample.kind!r}")
    ids = tok.encode("\n".join(sample.segments))
    if not ids:
        raise DataError("empty sample")
    return TokenBatch(ids, [0] * len(ids), [1] * len(ids))


_ROLE_TOKEN = {"system": tok.SYS, "user": tok.USER, "assistant": tok.ASST}


def render_chat(sample: ChatSample) -> TokenBatch:
    """BOS, then per message its role token and content; assistant content is
    ``THINK_OPEN thinking THINK_CLOSE response EOS`` and is the only part
    with loss_mask 1."""
    sample.validate()
    ids, mask = [tok.BOS], [0]
    for m in sample.messages:
        ids.append(_ROLE_TOKEN[m.role])
        mask.append(0)
        if m.role == "assistant":
            body = [tok.THINK_OPEN, *tok.encode(m.thinking or ""), tok.THINK_CLOSE,
                    *tok.encode(m.content), tok.EOS]
            ids += body
            mask += [1] * len(body)
        else:
            body = tok.encode(m.content)
            ids += body
            mask += [0] * len(body)
    return TokenBatch(ids, [0] * len(ids), mask)


def pack_sequences(batches: Sequence[TokenBatch], seq_len: int) -> list[TokenBatch]:
    """First-fit packing in input order; no sample is split.

    Documents get consecutive doc ids within their row; padding uses PAD
    tokens, doc id -1 and mask 0.
    """
    rows: list[list[TokenBatch]] = []
    used: list[int] = []
    for i, b in enumerate(batches):
        if len(b) > seq_len:
            raise DataError(f"sample {i} has length {len(b)} > seq_len {seq_len}")
        for r, u in enumerate(used):
            if u + len(b) <= seq_len:
                rows[r].append(b)
                used[r] += len(b)
                break
        else:
            rows.append([b])
            used.append(len(b))
    out = []
    for docs, u in zip(rows, used):
        toks, ids, mask = [], [], []
        for d, b in enumerate(docs):
            toks += b.tokens
            ids += [d] * len(b)
            mask += b.loss_mask
        pad = seq_len - u
        out.append(TokenBatch(toks + [tok.PAD] * pad, ids + [PAD_DOC] * pad, mask + [0] * pad))
    return out


@dataclass
class MixtureSpec:
    sources: list[tuple[str, float]]
    total: int
    seed: int = 0

    def __post_init__(self):
        self.sources = [(str(s), float(w)) for s, w in self.sources]
        if any(w <= 0 for _, w in self.sources):
            raise DataError("mixture weights must be positive")
        if abs(math.fsum(w for _, w in self.sources) - 1.0) > 1e-9:
            raise DataError("mixture weights must sum to 1")


def mixture_counts(weights: Sequence[float], total: int) -> list[int]:
    """Largest-remainder apportionment of ``total`` (ties go to the earlier source)."""
    raw = [w * total for w in weights]
    counts = [math.floor(r) for r in raw]
    left = total - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def sample_mixture(spec: MixtureSpec, datasets: Mapping[str, Sequence]) -> list:
    for name, _ in spec.sources:
        if not datasets.get(name):
            raise DataError(f"empty source dataset {name!r}")
    rng = np.random.default_rng(spec.seed)
    counts = mixture_counts([w for _, w in spec.sources], spec.total)
    out = []
    for (name, _), n in zip(spec.sources, counts):
        src = datasets[name]
        out += [src[i] for i in rng.integers(0, len(src), size=n)]
    return [out[i] for i in rng.permutation(len(out))]


@dataclass
class MultigenReport:
    counts: dict[str, int] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)


def validate_multigen(dataset: Iterable[ChatSample], min_gens: int = 3) -> MultigenReport:
    """Count distinct assistant responses per prompt text."""
    seen: dict[str, set] = defaultdict(set)
    for s in dataset:
        prompt = "\n".join(m.content for m in s.messages if m.role != "assistant")
        reply = json.dumps([(m.thinking, m.content) for m in s.messages if m.role == "assistant"])
        seen[prompt].add(reply)
    counts = {p: len(r) for p, r in seen.items()}
    return MultigenReport(counts, [p for p, n in counts.items() if n < min_gens])


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_jsonl(path: str | os.PathLike, rows: Iterable[Mapping]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def load_chat(path) -> list[ChatSample]:
    return [ChatSample.from_json(r) for r in read_jsonl(path)]


def load_cpt(path) -> list[CPTSample]:
    return [CPTSample.from_json(r) for r in read_jsonl(path)]

"""Checkpoint container and the ANMT on-disk format.

Layout::

    b"ANMT" | version u32 LE | header_len u64 LE | header JSON (UTF-8)
    | zero padding to a 64-byte boundary | f32 LE tensor data

Header JSON is ``{"arch": {...}, "meta": {...}, "tensors": [{"name", "shape",
"offset"}, ...]}`` with tensors sorted by name and offsets relative to the
start of the data section, each 64-byte aligned.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .minilm import ModelConfig, Params, param_shapes

MAGIC = b"ANMT"
VERSION = 1
ALIGN = 64


class CheckpointError(ValueError):
    """Base class for checkpoint validation and format errors."""


class IncompleteCheckpoint(CheckpointError):
    pass


class BadMagic(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class TruncatedPayload(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


def _pad(n: int) -> int:
    return (-n) % ALIGN


@dataclass(frozen=True, eq=False)
class Checkpoint:
    arch: ModelConfig
    tensors: Mapping[str, np.ndarray]
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        tensors = {}
        for name in sorted(self.tensors):
            a = np.array(self.tensors[name], dtype="<f4", copy=True, order="C")
            a.flags.writeable = False
            tensors[name] = a
        object.__setattr__(self, "tensors", tensors)
        object.__setattr__(self, "meta", {str(k): str(v) for k, v in sorted(self.meta.items())})

    def validate(self) -> None:
        expected = param_shapes(self.arch)
        missing = sorted(set(expected) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(expected))
        if missing:
            raise IncompleteCheckpoint(f"incomplete checkpoint: missing tensor {missing[0]!r}")
        if extra:
            raise IncompleteCheckpoint(f"incomplete checkpoint: unexpected tensor {extra[0]!r}")
        for name, a in self.tensors.items():
            if tuple(a.shape) != tuple(expected[name]):
                raise ShapeMismatch(f"shape mismatch for {name!r}: {a.shape} vs {expected[name]}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.arch != other.arch or self.meta != other.meta:
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.shape == b.shape and np.array_equal(a.view(np.uint32), b.view(np.uint32))
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )

    __hash__ = None

    def with_meta(self, **updates: str) -> "Checkpoint":
        return Checkpoint(self.arch, self.tensors, {**self.meta, **updates})

    def to_params(self, dtype=torch.float32) -> Params:
        return {k: torch.tensor(np.array(v), dtype=dtype) for k, v in self.tensors.items()}

    @classmethod
    def from_params(cls, arch: ModelConfig, params: Mapping[str, torch.Tensor],
                    meta: Mapping[str, str] | None = None) -> "Checkpoint":
        tensors = {k: v.detach().to(torch.float32).cpu().numpy() for k, v in params.items()}
        return cls(arch, tensors, dict(meta or {}))

    def n_params(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))


def to_bytes(ckpt: Checkpoint) -> bytes:
    """Canonical ANMT serialization; a pure function of the checkpoint value."""
    ckpt.validate()
    entries, offset = [], 0
    for name, a in ckpt.tensors.items():
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes + _pad(a.nbytes)
    header = json.dumps(
        {"arch": ckpt.arch.to_dict(), "meta": dict(ckpt.meta), "tensors": entries},
        sort_keys=True, separators=(",", ":"), ensure_ascii=False,
    ).encode("utf-8")
    prefix = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header
    parts = [prefix, b"\0" * _pad(len(prefix))]
    for a in ckpt.tensors.values():
        raw = a.astype("<f4").tobytes()
        parts += [raw, b"\0" * _pad(len(raw))]
    if ckpt.tensors:
        parts.pop()  # no padding after the final tensor
    return b"".join(parts)


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise BadMagic("bad magic")
    version, header_len = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    if 16 + header_len > len(buf):
        raise TruncatedPayload("truncated payload: header extends past end of file")
    try:
        header = json.loads(buf[16:16 + header_len].decode("utf-8"))
        arch = ModelConfig.from_dict(header["arch"])
        entries = header["tensors"]
        meta = header.get("meta", {})
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from exc
    data_start = 16 + header_len + _pad(16 + header_len)
    expected = param_shapes(arch)
    names = [e["name"] for e in entries]
    if names != sorted(names) or len(set(names)) != len(names):
        raise CheckpointError("tensor records must be unique and sorted by name")
    tensors, end = {}, data_start
    cursor = 0
    for e in entries:
        name, shape, off = e["name"], tuple(e["shape"]), e["offset"]
        if name in expected and shape != tuple(expected[name]):
            raise ShapeMismatch(f"shape mismatch for {name!r}: {shape} vs {expected[name]}")
        if not shape or any(int(s) <= 0 for s in shape):
            raise ShapeMismatch(f"shape mismatch for {name!r}: invalid shape {shape}")
        if off % ALIGN or off < cursor:
            raise ShapeMismatch(f"shape mismatch for {name!r}: bad offset {off}")
        nbytes = 4 * int(np.prod(shape))
        lo, hi = data_start + off, data_start + off + nbytes
        if hi > len(buf):
            raise TruncatedPayload(f"truncated payload in tensor {name!r}")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=lo).reshape(shape)
        cursor, end = off + nbytes, hi
    if end != len(buf):
        raise CheckpointError(f"{len(buf) - end} trailing bytes after tensor data")
    ckpt = Checkpoint(arch, tensors, meta)
    ckpt.validate()
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    data = to_bytes(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def fingerprint(ckpt: Checkpoint) -> str:
    """SHA-256 hex digest of the canonical serialized bytes."""
    return hashlib.sha256(to_bytes(ckpt)).hexdigest()


def weights_fingerprint(ckpt: Checkpoint) -> str:
    """Digest over arch and tensors only, ignoring meta."""
    return fingerprint(Checkpoint(ckpt.arch, ckpt.tensors, {}))

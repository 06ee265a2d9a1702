"""Weighted linear checkpoint merging and equally-spaced checkpoint averaging."""

from __future__ import annotations

import json
import math
import os
import re
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor_store import Checkpoint, fingerprint, load_checkpoint


class MergeError(ValueError):
    pass


def check_compatible(ckpts: Sequence[Checkpoint]) -> None:
    ref = ckpts[0]
    for other in ckpts[1:]:
        names = sorted(set(ref.tensors) | set(other.tensors))
        for name in names:
            a, b = ref.tensors.get(name), other.tensors.get(name)
            if a is None or b is None or a.shape != b.shape:
                raise MergeError(f"arch mismatch at tensor {name!r}")
        if ref.arch != other.arch:
            raise MergeError(f"arch mismatch: {ref.arch} vs {other.arch}")


def check_weights(weights: Sequence[float], n: int) -> None:
    if len(weights) != n:
        raise MergeError(f"{len(weights)} weights for {n} checkpoints")
    if any(not (w > 0 and math.isfinite(w)) for w in weights):
        raise MergeError("merge weights must be positive")
    total = math.fsum(weights)
    if abs(total - 1.0) > 1e-9:
        raise MergeError(f"weights sum {total:g} != 1")


def linear_merge(ckpts: Sequence[Checkpoint], weights: Sequence[float]) -> Checkpoint:
    """Weighted sum of checkpoints, accumulated in float64 and cast to float32.

    Inputs are sorted by (fingerprint, weight) before summation so the result
    does not depend on argument order.
    """
    if len(ckpts) < 2:
        raise MergeError("need at least two checkpoints to merge")
    weights = [float(w) for w in weights]
    check_weights(weights, len(ckpts))
    check_compatible(ckpts)
    fps = [fingerprint(c) for c in ckpts]
    order = sorted(range(len(ckpts)), key=lambda i: (fps[i], weights[i]))
    tensors = {}
    for name in ckpts[0].tensors:
        acc = np.zeros(ckpts[0].tensors[name].shape, dtype=np.float64)
        for i in order:
            acc += weights[i] * ckpts[i].tensors[name].astype(np.float64)
        tensors[name] = acc.astype(np.float32)
    meta = {
        "stage": "merge",
        "parents": json.dumps([fps[i] for i in order]),
        "weights": json.dumps([weights[i] for i in order]),
    }
    return Checkpoint(ckpts[0].arch, tensors, meta)


def equally_spaced_indices(m: int, k: int) -> list[int]:
    """``round(i * (m - 1) / (k - 1))`` for i in 0..k-1, halves rounded up."""
    if k < 2:
        raise MergeError("k must be at least 2")
    if m < k:
        raise MergeError(f"only {m} checkpoints available, need {k}")
    return [math.floor(i * (m - 1) / (k - 1) + 0.5) for i in range(k)]


_STEP_RE = re.compile(r"^step-(\d+)\.anmt$")


def list_step_checkpoints(checkpoint_dir: str | os.PathLike) -> list[tuple[int, Path]]:
    found = []
    for p in Path(checkpoint_dir).iterdir():
        m = _STEP_RE.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return sorted(found)


def average_equally_spaced(checkpoint_dir: str | os.PathLike, k: int = 3) -> Checkpoint:
    steps = list_step_checkpoints(checkpoint_dir)
    idx = equally_spaced_indices(len(steps), k)
    chosen = [steps[i] for i in idx]
    merged = linear_merge([load_checkpoint(p) for _, p in chosen], [1.0 / k] * k)
    return merged.with_meta(stage="avg_checkpoints", steps=json.dumps([s for s, _ in chosen]))

"""Parameter-count transformations: depth upscaling, MLP widening, layer dropping.

All transforms are pure ``Checkpoint -> Checkpoint`` and leave tensors they do
not touch bit-identical.
"""

from __future__ import annotations

import json
import re

import numpy as np

from .minilm import LAYER_TENSORS
from .tensor_store import Checkpoint, fingerprint

STRATEGIES = ("duplicate", "average", "maxpool", "average_alternate")
PLACEMENTS = ("interleave", "block")

_LAYER_RE = re.compile(r"^layers\.(\d+)\.(.+)$")


class SurgeryError(ValueError):
    pass


def _layer(ckpt: Checkpoint, i: int) -> dict[str, np.ndarray]:
    return {k: ckpt.tensors[f"layers.{i}.{k}"] for k in LAYER_TENSORS}


def _non_layer(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    return {k: v for k, v in ckpt.tensors.items() if not _LAYER_RE.match(k)}


def _assemble(ckpt: Checkpoint, layers: list[dict[str, np.ndarray]], arch, meta) -> Checkpoint:
    tensors = _non_layer(ckpt)
    for i, layer in enumerate(layers):
        for k, v in layer.items():
            tensors[f"layers.{i}.{k}"] = v
    return Checkpoint(arch, tensors, {**ckpt.meta, **meta})


def parse_span(text: str) -> tuple[int, int]:
    """Parse an inclusive layer range such as ``"3..4"``."""
    m = re.fullmatch(r"\s*(\d+)\s*\.\.\s*(\d+)\s*", text)
    if not m:
        raise SurgeryError(f"bad span {text!r}; expected 'start..end'")
    return int(m.group(1)), int(m.group(2))


def default_span(n_layers: int, n_new: int) -> tuple[int, int]:
    """Contiguous middle block of ``n_new`` layers, centred."""
    start = (n_layers - n_new) // 2
    return start, start + n_new - 1


def _combine(strategy: str, layers: list[dict], i: int) -> dict[str, np.ndarray]:
    a = layers[i]
    if strategy == "duplicate":
        return dict(a)
    if strategy in ("average", "maxpool"):
        b = layers[i + 1]
    else:
        b = layers[i + 2]
    if strategy == "maxpool":
        return {k: np.maximum(a[k], b[k]) for k in a}
    return {k: ((a[k].astype(np.float64) + b[k].astype(np.float64)) * 0.5).astype(np.float32) for k in a}


def depth_upscale(
    ckpt: Checkpoint,
    target_layers: int,
    strategy: str = "duplicate",
    insert_span: tuple[int, int] | None = None,
    placement: str = "interleave",
) -> Checkpoint:
    """Grow the layer count to ``target_layers``.

    One new layer is built for each source layer ``i`` in the inclusive
    ``insert_span``: ``duplicate`` copies layer i, ``average``/``maxpool``
    take the elementwise mean/max of layers i and i+1, and
    ``average_alternate`` the mean of layers i and i+2. With the default
    ``interleave`` placement each new layer sits right after layer i;
    ``block`` inserts the new layers as one block after the span.
    """
    if strategy not in STRATEGIES:
        raise SurgeryError(f"unknown strategy {strategy!r}")
    if placement not in PLACEMENTS:
        raise SurgeryError(f"unknown placement {placement!r}")
    n_src = ckpt.arch.n_layers
    n_new = target_layers - n_src
    if n_new <= 0:
        raise SurgeryError(f"target_layers {target_layers} must exceed source layers {n_src}")
    lo, hi = insert_span if insert_span is not None else default_span(n_src, n_new)
    if lo < 1 or hi > n_src - 2 or lo > hi:
        raise SurgeryError(f"span {lo}..{hi} must lie strictly inside layers 0..{n_src - 1}")
    if hi - lo + 1 != n_new:
        raise SurgeryError(f"span {lo}..{hi} has {hi - lo + 1} layers but {n_new} must be added")
    if strategy == "average_alternate" and hi + 2 > n_src - 1:
        raise SurgeryError(f"average_alternate needs layer {hi + 2}, past the last layer")

    src = [_layer(ckpt, i) for i in range(n_src)]
    made = {i: _combine(strategy, src, i) for i in range(lo, hi + 1)}
    out: list[dict] = []
    for i in range(n_src):
        out.append(src[i])
        if placement == "interleave" and i in made:
            out.append(made[i])
        if placement == "block" and i == hi:
            out.extend(made[j] for j in range(lo, hi + 1))
    meta = {
        "stage": "depth_upscale",
        "strategy": strategy,
        "span": f"{lo}..{hi}",
        "placement": placement,
        "parent": fingerprint(ckpt),
    }
    return _assemble(ckpt, out, ckpt.arch.replace(n_layers=target_layers), meta)


def width_upscale(ckpt: Checkpoint, new_d_ff: int, init: str = "zero_preserving") -> Checkpoint:
    """Widen every MLP's intermediate dimension to ``new_d_ff``.

    New hidden unit j copies the gate/up rows of unit ``j % d_ff``.
    ``zero_preserving`` gives new units zero down-projection columns.
    ``duplicate_halved`` copies the down columns too and divides each source
    unit's column (original and copies) by its number of replicas. Both are
    exactly function preserving in real arithmetic.
    """
    d_ff = ckpt.arch.d_ff
    if new_d_ff <= d_ff:
        raise SurgeryError(f"new_d_ff {new_d_ff} must exceed d_ff {d_ff}")
    if init not in ("zero_preserving", "duplicate_halved"):
        raise SurgeryError(f"unknown init {init!r}")
    src_idx = np.arange(new_d_ff) % d_ff
    replicas = np.bincount(src_idx, minlength=d_ff).astype(np.float32)
    tensors = dict(ckpt.tensors)
    for i in range(ckpt.arch.n_layers):
        p = f"layers.{i}.mlp."
        tensors[p + "gate"] = ckpt.tensors[p + "gate"][src_idx]
        tensors[p + "up"] = ckpt.tensors[p + "up"][src_idx]
        down = ckpt.tensors[p + "down"]
        if init == "zero_preserving":
            new = np.zeros((down.shape[0], new_d_ff), dtype=np.float32)
            new[:, :d_ff] = down
        else:
            new = (down / replicas[None, :])[:, src_idx]
        tensors[p + "down"] = new
    meta = {"stage": "width_upscale", "init": init, "parent": fingerprint(ckpt)}
    return Checkpoint(ckpt.arch.replace(d_ff=new_d_ff), tensors, {**ckpt.meta, **meta})


def drop_layers(ckpt: Checkpoint, indices) -> Checkpoint:
    indices = [int(i) for i in indices]
    n = ckpt.arch.n_layers
    if len(set(indices)) != len(indices):
        raise SurgeryError("duplicate layer indices")
    if any(i < 0 or i >= n for i in indices):
        raise SurgeryError(f"layer index out of range 0..{n - 1}")
    if len(indices) >= n:
        raise SurgeryError("cannot drop all layers")
    keep = [i for i in range(n) if i not in set(indices)]
    layers = [_layer(ckpt, i) for i in keep]
    meta = {"stage": "drop_layers", "dropped": json.dumps(sorted(indices)), "parent": fingerprint(ckpt)}
    return _assemble(ckpt, layers, ckpt.arch.replace(n_layers=len(keep)), meta)

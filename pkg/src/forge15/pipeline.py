"""Declarative stage DAG: validation and resumable execution.

A pipeline config is one JSON document::

    {"seed": 0,
     "stages": [{"id": "A", "kind": "sft", "inputs": ["base"], "params": {...}}, ...]}

Inputs name earlier stages or checkpoint paths (anything ending in
``.anmt``). Each stage writes ``<workdir>/<id>.anmt`` (or ``<id>.json`` for
eval stages) and the run records ``manifest.json`` mapping stage id to path,
fingerprint and an input key used to skip completed stages on rerun.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from . import data as dp
from . import toydata
from .data import MixtureSpec, sample_mixture
from .evalkit import MiniLMPolicy, run_suite
from .grpo import GRPOConfig, train_grpo, write_metrics
from .merge import average_equally_spaced, linear_merge
from .minilm import ModelConfig, init_params
from .rewards import load_tasks
from .surgery import depth_upscale, drop_layers, parse_span, width_upscale
from .tensor_store import Checkpoint, fingerprint, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train_supervised

log = logging.getLogger(__name__)

KINDS = ("init", "upscale", "drop", "cpt", "sft", "grpo", "merge", "avg_checkpoints", "eval")
_ARITY = {"init": (0, 0), "upscale": (1, 1), "drop": (1, 1), "cpt": (1, 1), "sft": (1, 1), "grpo": (1, 1),
          "merge": (2, None), "avg_checkpoints": (1, 1), "eval": (1, None)}


class PipelineError(RuntimeError):
    def __init__(self, stage_id: str, message: str):
        super().__init__(f"stage {stage_id}: {message}")
        self.stage_id = stage_id


@dataclass
class Stage:
    id: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class PipelineConfig:
    stages: list[Stage]
    seed: int = 0
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str | os.PathLike = ".") -> "PipelineConfig":
        stages = [Stage(s["id"], s["kind"], list(s.get("inputs", [])), dict(s.get("params", {})))
                  for s in d["stages"]]
        return cls(stages, int(d.get("seed", 0)), Path(base_dir))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PipelineConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), path.parent)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "stages": [
            {"id": s.id, "kind": s.kind, "inputs": s.inputs, "params": s.params} for s in self.stages]}


def is_path_ref(ref: str) -> bool:
    return ref.endswith(".anmt")


def _find_cycle(stages: Mapping[str, Stage]) -> list[str] | None:
    color: dict[str, int] = {}
    stack: list[str] = []

    def visit(u: str) -> list[str] | None:
        color[u] = 1
        stack.append(u)
        for v in stages[u].inputs:
            if v not in stages:
                continue
            if color.get(v) == 1:
                return stack[stack.index(v):]
            if v not in color:
                found = visit(v)
                if found:
                    return found
        stack.pop()
        color[u] = 2
        return None

    for sid in stages:
        if sid not in color:
            found = visit(sid)
            if found:
                return found
    return None


def _static_arch(stage: Stage, archs: Mapping[str, ModelConfig | None]) -> ModelConfig | None:
    p = stage.params
    if stage.kind == "init":
        return ModelConfig.from_dict(p.get("arch", {}))
    src = archs.get(stage.inputs[0]) if stage.inputs else None
    if src is None:
        return None
    if stage.kind == "upscale":
        if "new_d_ff" in p:
            return src.replace(d_ff=int(p["new_d_ff"]))
        return src.replace(n_layers=int(p["target_layers"]))
    if stage.kind == "drop":
        return src.replace(n_layers=src.n_layers - len(p.get("layers", [])))
    return src


def validate_pipeline(config: PipelineConfig) -> list[str]:
    """Diagnostics for the config; an empty list means it is valid."""
    diags: list[str] = []
    ids = [s.id for s in config.stages]
    seen = set()
    for sid in ids:
        if sid in seen:
            diags.append(f"duplicate stage id: {sid}")
        seen.add(sid)
    stages = {s.id: s for s in config.stages}
    for s in config.stages:
        if s.kind not in KINDS:
            diags.append(f"stage {s.id}: unknown kind {s.kind!r}")
            continue
        lo, hi = _ARITY[s.kind]
        if len(s.inputs) < lo or (hi is not None and len(s.inputs) > hi):
            want = f"{lo}" if lo == hi else f"at least {lo}"
            diags.append(f"stage {s.id}: {s.kind} takes {want} input(s), got {len(s.inputs)}")
        for ref in s.inputs:
            if ref not in stages and not is_path_ref(ref):
                diags.append(f"stage {s.id}: dangling reference {ref!r}")
        if s.kind == "merge":
            w = s.params.get("weights")
            if w is None or len(w) != len(s.inputs):
                diags.append(f"stage {s.id}: merge needs one weight per input")
            elif any(x <= 0 for x in w):
                diags.append(f"stage {s.id}: merge weights must be positive")
            elif abs(math.fsum(w) - 1.0) > 1e-9:
                diags.append(f"stage {s.id}: weights sum {math.fsum(w):g} ≠ 1")
        if s.kind == "upscale" and "target_layers" not in s.params and "new_d_ff" not in s.params:
            diags.append(f"stage {s.id}: upscale needs target_layers or new_d_ff")
    cycle = _find_cycle(stages)
    if cycle:
        diags.append("cycle: " + ",".join(cycle))
        return diags
    # static arch propagation for merge compatibility
    archs: dict[str, ModelConfig | None] = {}
    try:
        for sid in topo_order(config):
            s = stages[sid]
            if s.kind not in KINDS:
                archs[sid] = None
                continue
            archs[sid] = _static_arch(s, archs)
            if s.kind == "merge":
                known = {archs.get(r) for r in s.inputs if archs.get(r) is not None}
                if len(known) > 1:
                    diags.append(f"stage {s.id}: merge inputs have incompatible architectures")
    except (KeyError, TypeError, ValueError) as exc:
        diags.append(f"invalid stage parameters: {exc}")
    return diags


def topo_order(config: PipelineConfig) -> list[str]:
    """Kahn's algorithm, ties broken by declaration order."""
    stages = {s.id: s for s in config.stages}
    deps = {s.id: [r for r in s.inputs if r in stages] for s in config.stages}
    done: list[str] = []
    remaining = [s.id for s in config.stages]
    while remaining:
        ready = [sid for sid in remaining if all(d in done for d in deps[sid])]
        if not ready:
            raise ValueError("pipeline has a cycle")
        done.append(ready[0])
        remaining.remove(ready[0])
    return done


# ---------------------------------------------------------------------------
# data references

_BUILTINS = {
    "addition_sft": toydata.addition_sft,
    "addition_cpt": toydata.addition_cpt,
    "addition_tasks": toydata.addition_tasks,
    "echo_chat": toydata.echo_chat,
}


def resolve_data(ref: Mapping | str, base_dir: Path, kind: str) -> list:
    """Load a dataset from ``{"builtin": name, "n", "seed"}``, ``{"path": file}``
    or ``{"mixture": [{"data": ref, "weight": w}, ...], "total": n, "seed": s}``."""
    if isinstance(ref, str):
        ref = {"path": ref}
    if "builtin" in ref:
        fn = _BUILTINS[ref["builtin"]]
        return fn(int(ref.get("n", 64)), seed=int(ref.get("seed", 0)))
    if "path" in ref:
        path = Path(ref["path"])
        path = path if path.is_absolute() else base_dir / path
        if kind == "tasks":
            return load_tasks(path)
        return dp.load_cpt(path) if kind == "cpt" else dp.load_chat(path)
    if "mixture" in ref:
        parts = {f"src{i}": resolve_data(m["data"], base_dir, kind) for i, m in enumerate(ref["mixture"])}
        spec = MixtureSpec([(f"src{i}", m["weight"]) for i, m in enumerate(ref["mixture"])],
                           int(ref["total"]), int(ref.get("seed", 0)))
        return sample_mixture(spec, parts)
    raise ValueError(f"unrecognised data reference {ref!r}")


# ---------------------------------------------------------------------------
# execution

def _key(stage: Stage, input_fps: list[str], seed: int) -> str:
    blob = json.dumps({"kind": stage.kind, "params": stage.params, "inputs": input_fps, "seed": seed},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Runner:
    def __init__(self, config: PipelineConfig, workdir: str | os.PathLike):
        self.config = config
        self.workdir = Path(workdir)
        self.stages = {s.id: s for s in config.stages}
        self.manifest_path = self.workdir / "manifest.json"
        self.manifest: dict[str, dict] = {}
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        self.executed: list[str] = []

    def input_checkpoint(self, ref: str) -> Checkpoint:
        if ref in self.stages:
            return load_checkpoint(self.manifest[ref]["path"])
        path = Path(ref)
        return load_checkpoint(path if path.is_absolute() else self.config.base_dir / path)

    def input_fingerprint(self, ref: str) -> str:
        if ref in self.stages:
            return self.manifest[ref]["fingerprint"]
        return fingerprint(self.input_checkpoint(ref))

    def run(self) -> dict[str, dict]:
        diags = validate_pipeline(self.config)
        if diags:
            raise PipelineError("<config>", "; ".join(diags))
        self.workdir.mkdir(parents=True, exist_ok=True)
        for sid in topo_order(self.config):
            stage = self.stages[sid]
            seed = int(stage.params.get("seed", self.config.seed))
            fps = [self.input_fingerprint(r) for r in stage.inputs]
            key = _key(stage, fps, seed)
            prev = self.manifest.get(sid)
            if prev and prev.get("key") == key and Path(prev["path"]).exists() and \
                    self._output_digest(stage, Path(prev["path"])) == prev["fingerprint"]:
                log.info("stage %s up to date, skipping", sid)
                continue
            log.info("running stage %s (%s)", sid, stage.kind)
            try:
                path = self._execute(stage, seed, fps)
            except Exception as exc:  # noqa: BLE001 - rewrapped with the stage id
                raise PipelineError(sid, f"{type(exc).__name__}: {exc}") from exc
            self.manifest[sid] = {"kind": stage.kind, "path": str(path), "key": key,
                                  "fingerprint": self._output_digest(stage, path), "inputs": fps}
            self.executed.append(sid)
            self._write_manifest()
        return self.manifest

    def _write_manifest(self):
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
        os.replace(tmp, self.manifest_path)

    def _output_digest(self, stage: Stage, path: Path) -> str:
        if stage.kind == "eval":
            return _file_digest(path)
        return fingerprint(load_checkpoint(path))

    def _save(self, stage: Stage, ckpt: Checkpoint) -> Path:
        path = self.workdir / f"{stage.id}.anmt"
        save_checkpoint(ckpt, path)
        return path

    def _provenance(self, stage: Stage, fps: list[str], seed: int) -> dict[str, str]:
        return {"stage": stage.kind, "stage_id": stage.id, "parent": ",".join(fps), "seed": str(seed)}

    def _execute(self, stage: Stage, seed: int, fps: list[str]) -> Path:
        p, base = stage.params, self.config.base_dir
        kind = stage.kind
        if kind == "init":
            arch = ModelConfig.from_dict(p.get("arch", {}))
            ckpt = Checkpoint.from_params(arch, init_params(arch, seed), self._provenance(stage, fps, seed))
            return self._save(stage, ckpt)
        if kind == "merge":
            ckpts = [self.input_checkpoint(r) for r in stage.inputs]
            return self._save(stage, linear_merge(ckpts, p["weights"]))
        if kind == "avg_checkpoints":
            src = stage.inputs[0]
            step_dir = self.workdir / f"{src}.steps" if src in self.stages else Path(src).parent
            ckpt = average_equally_spaced(step_dir, int(p.get("k", 3)))
            return self._save(stage, ckpt)
        if kind == "eval":
            suites = {name: resolve_data(ref, base, "tasks") for name, ref in p["suites"].items()}
            policies = {}
            for ref in stage.inputs:
                c = self.input_checkpoint(ref)
                policies[ref] = MiniLMPolicy(c.arch, c.to_params())
            report = run_suite(policies, suites, temperature=float(p.get("temperature", 0.6)),
                               max_new=int(p.get("max_new", 64)), seeds=p.get("seeds", [seed]))
            path = self.workdir / f"{stage.id}.json"
            path.write_text(report.to_json())
            (self.workdir / f"{stage.id}.txt").write_text(report.table() + "\n")
            return path

        src = self.input_checkpoint(stage.inputs[0])
        meta = self._provenance(stage, fps, seed)
        if kind == "upscale":
            if "new_d_ff" in p:
                out = width_upscale(src, int(p["new_d_ff"]), p.get("init", "zero_preserving"))
            else:
                span = parse_span(p["span"]) if isinstance(p.get("span"), str) else p.get("span")
                out = depth_upscale(src, int(p["target_layers"]), p.get("strategy", "duplicate"),
                                    tuple(span) if span else None, p.get("placement", "interleave"))
            return self._save(stage, out.with_meta(**meta))
        if kind == "drop":
            return self._save(stage, drop_layers(src, p.get("layers", [])).with_meta(**meta))
        if kind in ("cpt", "sft"):
            dataset = resolve_data(p["data"], base, kind)
            tc = TrainConfig.from_dict({"seed": seed, **p.get("train", {})})
            res = train_supervised(src.arch, src.to_params(), dataset, tc, mode=kind, meta=meta)
            write_metrics(self.workdir / f"{stage.id}.loss.jsonl", res.log)
            if res.step_checkpoints:
                step_dir = self.workdir / f"{stage.id}.steps"
                step_dir.mkdir(exist_ok=True)
                for step, c in res.step_checkpoints:
                    save_checkpoint(c, step_dir / f"step-{step}.anmt")
            pick = p.get("select_epoch")
            if pick is not None:
                out = res.epoch_checkpoints[int(pick) - 1]
            elif res.epoch_checkpoints:
                out = res.epoch_checkpoints[-1]
            else:
                out = Checkpoint(src.arch, src.tensors, meta)
            return self._save(stage, out.with_meta(**meta))
        if kind == "grpo":
            tasks = resolve_data(p["tasks"], base, "tasks")
            gc = GRPOConfig.from_dict({"seed": seed, **p.get("grpo", {})})
            res = train_grpo(src.arch, src.to_params(), tasks, gc)
            write_metrics(self.workdir / f"{stage.id}.metrics.jsonl", res.metrics)
            return self._save(stage, Checkpoint.from_params(src.arch, res.params, meta))
        raise ValueError(f"unknown stage kind {kind!r}")


def run_pipeline(config: PipelineConfig, workdir: str | os.PathLike) -> dict[str, dict]:
    return Runner(config, workdir).run()


def reference_config(name: str) -> PipelineConfig:
    """Load one of the shipped reference configs (``specialize_merge``, ``depth_strategies``, ``cpt_sft_ablation``)."""
    path = Path(__file__).parent / "configs" / f"{name}.json"
    return PipelineConfig.load(path)

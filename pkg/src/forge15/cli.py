"""``forge15`` command line.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as dp
from .evalkit import MiniLMPolicy, render_token_figure, run_suite
from .grpo import GRPOConfig, curate_math_prompts, train_grpo, write_metrics
from .merge import MergeError, average_equally_spaced, linear_merge
from .minilm import ModelConfig, init_params
from .pipeline import PipelineConfig, PipelineError, reference_config, run_pipeline, validate_pipeline
from .rewards import MathTask, load_tasks, save_tasks
from .surgery import SurgeryError, depth_upscale, drop_layers, parse_span, width_upscale
from .tensor_store import Checkpoint, CheckpointError, fingerprint, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train_supervised

log = logging.getLogger("forge15")


class UsageError(Exception):
    """Bad arguments or config; maps to exit code 1."""


def _load_json(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def _save(ckpt: Checkpoint, out: str) -> None:
    save_checkpoint(ckpt, out)
    print(f"{out} {fingerprint(ckpt)}")


def parse_weighted(spec: str) -> tuple[str, float]:
    """``path.anmt:0.3`` -> (path, 0.3)."""
    path, sep, w = spec.rpartition(":")
    if not sep:
        raise UsageError(f"expected PATH:WEIGHT, got {spec!r}")
    try:
        return path, float(w)
    except ValueError as exc:
        raise UsageError(f"bad weight in {spec!r}") from exc


def cmd_init(a) -> None:
    arch = ModelConfig.from_dict(_load_json(a.arch)) if a.arch else ModelConfig()
    _save(Checkpoint.from_params(arch, init_params(arch, a.seed), {"stage": "init", "seed": str(a.seed)}), a.out)


def cmd_upscale(a) -> None:
    ckpt = load_checkpoint(a.ckpt)
    if a.d_ff is not None:
        out = width_upscale(ckpt, a.d_ff, a.init)
    else:
        if a.layers is None:
            raise UsageError("upscale needs --layers or --d-ff")
        span = parse_span(a.span) if a.span else None
        out = depth_upscale(ckpt, a.layers, a.strategy, span, a.placement)
    _save(out, a.out)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from exc


def cmd_drop(a) -> None:
    layers = [i for group in a.layers for i in group]
    _save(drop_layers(load_checkpoint(a.ckpt), layers), a.out)


def cmd_merge(a) -> None:
    pairs = [parse_weighted(s) for s in a.input]
    _save(linear_merge([load_checkpoint(p) for p, _ in pairs], [w for _, w in pairs]), a.out)


def cmd_avg(a) -> None:
    _save(average_equally_spaced(a.dir, a.k), a.out)


def _train(a, mode: str) -> None:
    ckpt = load_checkpoint(a.ckpt)
    cfg = {"seed": a.seed, **_load_json(a.config)}
    try:
        tc = TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    dataset = dp.load_cpt(a.data) if mode == "cpt" else dp.load_chat(a.data)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"stage": mode, "parent": fingerprint(ckpt), "seed": str(a.seed)}
    res = train_supervised(ckpt.arch, ckpt.to_params(), dataset, tc, mode=mode, meta=meta)
    write_metrics(out / "loss.jsonl", res.log)
    for i, c in enumerate(res.epoch_checkpoints, 1):
        _save(c, str(out / f"epoch-{i}.anmt"))
    for step, c in res.step_checkpoints:
        save_checkpoint(c, out / f"step-{step}.anmt")
    final = res.epoch_checkpoints[-1] if res.epoch_checkpoints else ckpt
    _save(final, str(out / "final.anmt"))


def cmd_train_grpo(a) -> None:
    ckpt = load_checkpoint(a.ckpt)
    try:
        gc = GRPOConfig.from_dict({"seed": a.seed, **_load_json(a.config)})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    tasks = load_tasks(a.tasks)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"stage": "grpo", "parent": fingerprint(ckpt), "seed": str(a.seed)}
    res = train_grpo(ckpt.arch, ckpt.to_params(), tasks, gc, meta=meta)
    write_metrics(out / "metrics.jsonl", res.metrics)
    for step, c in res.checkpoints:
        save_checkpoint(c, out / f"step-{step}.anmt")
    _save(Checkpoint.from_params(ckpt.arch, res.params, meta), str(out / "final.anmt"))


def cmd_curate_math(a) -> None:
    ckpt = load_checkpoint(a.ckpt)
    tasks = load_tasks(a.tasks)
    if any(not isinstance(t, MathTask) for t in tasks):
        raise UsageError("curate-math accepts math tasks only")
    gc = GRPOConfig(group_size=a.group_size, max_new=a.max_new, seed=a.seed)
    rep = curate_math_prompts(ckpt.arch, ckpt.to_params(), tasks, gc, seed=a.seed)
    save_tasks(a.out, rep.selected)
    print(f"kept {len(rep.selected)} of {len(tasks)} prompts")


def cmd_eval(a) -> None:
    policies = {}
    for p in a.ckpt:
        c = load_checkpoint(p)
        policies[Path(p).stem] = MiniLMPolicy(c.arch, c.to_params())
    suites = {Path(s).stem: load_tasks(s) for s in a.suite}
    seeds = a.seeds if a.seeds else [a.seed]
    rep = run_suite(policies, suites, temperature=a.temp, max_new=a.max_new, seeds=seeds)
    print(rep.table())
    if a.json:
        Path(a.json).write_text(rep.to_json())


def cmd_figure(a) -> None:
    print(render_token_figure())


def _pipeline_config(a) -> PipelineConfig:
    if a.reference:
        cfg = reference_config(a.reference)
    elif not a.config:
        raise UsageError("pipeline needs a config file or --reference NAME")
    else:
        try:
            cfg = PipelineConfig.load(a.config)
        except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read pipeline config: {exc}") from exc
    if a.seed is not None:
        cfg.seed = a.seed
    return cfg


def cmd_pipeline(a) -> None:
    cfg = _pipeline_config(a)
    diags = validate_pipeline(cfg)
    if diags:
        raise UsageError("\n".join(diags))
    if a.action == "validate":
        print("ok")
        return
    manifest = run_pipeline(cfg, a.workdir)
    for sid, row in manifest.items():
        print(f"{sid} {row['path']} {row['fingerprint']}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forge15", description="Upscale, train, reward and merge small decoder models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("init", cmd_init, "write a randomly initialised checkpoint")
    sp.add_argument("--arch", help="JSON file with model config fields")
    sp.add_argument("--out", required=True)

    sp = add("upscale", cmd_upscale, "depth or width upscaling")
    sp.add_argument("--ckpt", "--in", dest="ckpt", required=True)
    sp.add_argument("--layers", "--target-layers", dest="layers", type=int, help="target layer count")
    sp.add_argument("--strategy", default="duplicate", choices=["duplicate", "average", "maxpool", "average_alternate"])
    sp.add_argument("--span", help="inclusive source layer range, e.g. 3..4")
    sp.add_argument("--placement", default="interleave", choices=["interleave", "block"])
    sp.add_argument("--d-ff", type=int, dest="d_ff", help="new MLP width (width upscaling)")
    sp.add_argument("--init", default="zero_preserving", choices=["zero_preserving", "duplicate_halved"])
    sp.add_argument("--out", required=True)

    sp = add("drop", cmd_drop, "remove layers")
    sp.add_argument("--ckpt", "--in", dest="ckpt", required=True)
    sp.add_argument("--layers", type=_int_list, nargs="+", required=True, help="indices, e.g. 2,5 or 2 5")
    sp.add_argument("--out", required=True)

    sp = add("merge", cmd_merge, "weighted linear merge")
    sp.add_argument("--input", action="append", required=True, metavar="PATH:WEIGHT")
    sp.add_argument("--out", required=True)

    sp = add("avg", cmd_avg, "average k equally spaced step checkpoints")
    sp.add_argument("--dir", required=True)
    sp.add_argument("-k", type=int, default=3)
    sp.add_argument("--out", required=True)

    for mode in ("cpt", "sft"):
        sp = add(f"train-{mode}", lambda a, m=mode: _train(a, m), f"{mode.upper()} training")
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--data", required=True, help="JSON-lines dataset")
        sp.add_argument("--config", help="JSON train config")
        sp.add_argument("--out", required=True, help="output directory")

    sp = add("train-grpo", cmd_train_grpo, "GRPO on reward tasks")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--tasks", required=True)
    sp.add_argument("--config", help="JSON GRPO config")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("curate-math", cmd_curate_math, "keep math prompts with 1+ correct and 3+ incorrect samples")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--tasks", required=True)
    sp.add_argument("--group-size", type=int, default=8, dest="group_size")
    sp.add_argument("--max-new", type=int, default=256, dest="max_new")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "pass@1 and thinking tokens")
    sp.add_argument("--ckpt", action="append", required=True)
    sp.add_argument("--suite", action="append", required=True, help="JSON-lines reward tasks")
    sp.add_argument("--temp", type=float, default=0.6)
    sp.add_argument("--max-new", type=int, default=64, dest="max_new")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--json", help="write the JSON report here")

    add("figure", cmd_figure, "print the thinking-token comparison chart")

    sp = sub.add_parser("pipeline", help="validate or run a stage DAG")
    sp.add_argument("action", choices=["run", "validate"])
    sp.add_argument("config", nargs="?")
    sp.add_argument("--reference", choices=["specialize_merge", "depth_strategies", "cpt_sft_ablation"])
    sp.add_argument("--workdir", default="forge15-run")
    sp.add_argument("--seed", type=int, default=None, help="override the config seed")
    sp.set_defaults(fn=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except (UsageError, SurgeryError, MergeError, CheckpointError, dp.DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PipelineError, Exception) as exc:  # noqa: BLE001 - top-level boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Exit codes: 0 success, 1 configuration or input error, 2 non-finite loss during
training, 3 selfcheck failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional, Tuple

import numpy as np

from . import pretrain
from ._mutants import KNOWN as MUTANTS
from ._mutants import activated
from .estimator import HierCLIP
from .experiments import DataConfig, build_corpus, check_compatible, hierarchy_benefit, train_on
from .induction import ThresholdSchedule, export_hierarchy, parse_text_tree, content_trace, segment_image_groups
from .masks import export_mask, mask_2d
from .pnm import read_pnm, to_patches
from .pretrain import atomic_write
from .selfcheck import format_report, run_selfcheck
from .shapes_world import ShapesWorldSpec, read_vocabulary, write_vocabulary
from .validation import tokenize

logger = logging.getLogger("hierclip")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_SELFCHECK = 0, 1, 2, 3

# hard floor and pilot-calibrated target for held-out text-to-image R@1
R1_FLOOR = 0.20
R1_TARGET = 0.45

RUN_KEYS = {"data", "checkpoint_every", "eval_every", "compare_seeds", "compare_steps"}


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


def _coerce(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def apply_overrides(config: dict, overrides: List[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _coerce(value)
    return config


def load_run_config(path: str, overrides: List[str], seed: Optional[int]):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
        raw.setdefault("data", {})["seed"] = seed
    run = {k: raw.pop(k) for k in list(raw) if k in RUN_KEYS}
    try:
        data = DataConfig.from_dict(run.pop("data", {}))
        spec = data.spec
        raw.setdefault("vision", {})
        raw["vision"] = {"grid_h": spec.grid_h, "grid_w": spec.grid_w, "patch_dim": spec.patch_dim,
                         **raw["vision"]}
        cfg = pretrain.TrainConfig.from_dict(raw)
        check_compatible(cfg, data)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    run.setdefault("checkpoint_every", 500)
    run.setdefault("eval_every", 250)
    for key in ("checkpoint_every", "eval_every"):
        if not isinstance(run[key], int) or run[key] < 1:
            raise ConfigError(f"{key} must be a positive integer")
    return cfg, data, run


def _checkpoint(cfg, data, params, step) -> pretrain.Checkpoint:
    config = cfg.to_dict()
    config["data"] = data.to_dict()
    return pretrain.Checkpoint(params, step, config)


def _jsonl(records) -> bytes:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode("utf-8")


def cmd_train(args) -> int:
    try:
        cfg, data, run = load_run_config(args.config, args.set or [], args.seed)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out
    os.makedirs(out, exist_ok=True)
    ckpt_path = os.path.join(out, "checkpoint.bin")
    metrics_path = os.path.join(out, "metrics.jsonl")
    atomic_write(os.path.join(out, "vocab.txt"), write_vocabulary(data.spec).encode("utf-8"))
    resolved = cfg.to_dict()
    resolved.update(run, data=data.to_dict())
    atomic_write(os.path.join(out, "config.json"), (json.dumps(resolved, indent=2, sort_keys=True) + "\n").encode())

    records: List[dict] = []
    params0 = pretrain.init_model(cfg)
    pretrain.save_checkpoint(ckpt_path, _checkpoint(cfg, data, params0, 0))
    atomic_write(metrics_path, b"")
    if cfg.steps == 0:
        return EXIT_OK

    corpus = build_corpus(data)
    every = run["checkpoint_every"]

    def on_eval(step, params, record):
        records.append(record)
        atomic_write(metrics_path, _jsonl(records))

    def on_step(step, params):
        if step % every == 0 or step == cfg.steps:
            pretrain.save_checkpoint(ckpt_path, _checkpoint(cfg, data, params, step))

    try:
        result = train_on(cfg, corpus, eval_every=run["eval_every"], callback=on_eval, on_step=on_step)
    except pretrain.TrainingDiverged as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    final = result.history[-1]
    records.append({"event": "summary", "step": final["step"], "t2i_r1": final.get("t2i_r1"),
                    "r1_floor": R1_FLOOR, "r1_target": R1_TARGET,
                    "meets_floor": bool(final.get("t2i_r1", 0.0) >= R1_FLOOR)})
    atomic_write(metrics_path, _jsonl(records))
    seeds = run.get("compare_seeds")
    if seeds:
        try:
            report = hierarchy_benefit(cfg, corpus, seeds, run.get("compare_steps"))
        except pretrain.TrainingDiverged as err:
            print(f"training diverged: {err}", file=sys.stderr)
            return EXIT_DIVERGED
        for row in report["runs"]:
            records.append({"event": "hierarchy_diagnostic", **row})
        records.append({"event": "hierarchy_diagnostic_summary",
                        **{k: v for k, v in report.items() if k != "runs"}})
        atomic_write(metrics_path, _jsonl(records))
    return EXIT_OK


def _load_model(path: str) -> Tuple[HierCLIP, Optional[dict]]:
    try:
        ckpt = pretrain.load_checkpoint(path)
    except (OSError, pretrain.CheckpointError) as err:
        raise InputError(f"cannot load checkpoint {path}: {err}") from err
    try:
        model = HierCLIP.from_checkpoint(ckpt)
    except (TypeError, ValueError) as err:
        raise InputError(f"checkpoint {path} has an unusable config: {err}") from err
    return model, ckpt.config.get("data")


def _vocabulary(args, data: Optional[dict]) -> dict:
    path = args.vocab or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), "vocab.txt")
    if os.path.exists(path):
        with open(path) as fh:
            return read_vocabulary(fh.read())
    if args.vocab:
        raise InputError(f"vocabulary file {path} not found")
    spec = DataConfig.from_dict(data).spec if data else ShapesWorldSpec()
    return {w: i for i, w in enumerate(spec.vocabulary())}


def _read_image_patches(path: str, model: HierCLIP) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            image = read_pnm(fh.read())
    except (OSError, ValueError) as err:
        raise InputError(f"cannot read image {path}: {err}") from err
    patch = int(round(model.patch_dim ** 0.5))
    if patch * patch != model.patch_dim:
        raise InputError(f"patch_dim {model.patch_dim} is not a square patch")
    try:
        patches = to_patches(image, patch)
    except ValueError as err:
        raise InputError(str(err)) from err
    if patches.shape[:2] != (model.grid_h, model.grid_w):
        raise InputError(f"image gives a {patches.shape[0]}x{patches.shape[1]} patch grid, "
                         f"model expects {model.grid_h}x{model.grid_w}")
    return patches


def cmd_parse(args) -> int:
    try:
        model, data = _load_model(args.ckpt)
        if args.text:
            vocab = _vocabulary(args, data)
            try:
                with open(args.text) as fh:
                    lines = [ln for ln in fh.read().splitlines() if ln.strip()]
            except OSError as err:
                raise InputError(f"cannot read {args.text}: {err}") from err
            if not lines:
                raise InputError(f"{args.text} contains no caption")
            words_by_id = {i: w for w, i in vocab.items()}
            chunks = []
            for line_no, line in enumerate(lines, 1):
                try:
                    ids = tokenize(line, vocab)
                except KeyError as err:
                    raise InputError(f"line {line_no}: {err.args[0]}") from err
                trace = content_trace(model.text_traces(ids))
                words = [words_by_id[i] for i in ids[1:-1]]
                tree = parse_text_tree(trace, len(words)) if words else None
                if tree is None:
                    raise InputError(f"line {line_no}: empty caption")
                chunks.append(export_hierarchy(tree, args.format, words))
            payload = b"".join(chunks)
        else:
            patches = _read_image_patches(args.image, model)
            schedule = (ThresholdSchedule(tuple(float(t) for t in args.thresholds.split(",")))
                        if args.thresholds else ThresholdSchedule.for_layers(model.layers))
            seg = segment_image_groups(model.image_traces(patches), schedule)
            payload = export_hierarchy(seg, args.format)
    except (InputError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    atomic_write(args.out, payload)
    return EXIT_OK


def cmd_export_mask(args) -> int:
    try:
        model, _ = _load_model(args.ckpt)
        patches = _read_image_patches(args.image, model)
        if not 1 <= args.layer <= model.layers:
            raise InputError(f"layer must be in 1..{model.layers}")
        trace = model.image_traces(patches)
    except (InputError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    atomic_write(args.out, export_mask(mask_2d(trace[args.layer - 1])))
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    with activated(*(args.mutant or [])):
        results = run_selfcheck(args.seed or 0)
    print(format_report(results))
    ok = all(r.passed for r in results)
    print("ALL CHECKS PASSED" if ok else "SELFCHECK FAILED")
    return EXIT_OK if ok else EXIT_SELFCHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierclip", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a generated shapes-world corpus")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="overrides both the model and the data seed")
    p.add_argument("--out", default="run", help="run directory (default: ./run)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("parse", help="induce a text tree or image grouping")
    p.add_argument("--ckpt", required=True, help="checkpoint written by train")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text", help="caption file, one caption per line")
    src.add_argument("--image", help="PGM or PPM image")
    p.add_argument("--format", choices=("dot", "json"), default="json")
    p.add_argument("--out", required=True, help="output file")
    p.add_argument("--vocab", help="vocabulary file, one token per line (default: vocab.txt beside the checkpoint)")
    p.add_argument("--thresholds", help="comma-separated per-layer break thresholds")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("export-mask", help="write one layer's image mask as CSV")
    p.add_argument("--ckpt", required=True, help="checkpoint written by train")
    p.add_argument("--image", required=True, help="PGM or PPM image")
    p.add_argument("--layer", type=int, required=True, help="1-based encoder layer")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_export_mask)

    p = sub.add_parser("selfcheck", help="run the oracle and invariant battery")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mutant", action="append", choices=sorted(MUTANTS), help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``fine-imitate <command> [options]``.

Every command resolves its configuration as defaults < ``--config`` file <
``--override key=value`` flags, writes ``manifest.json`` (with timestamps) and
``metrics.json`` (no timestamps, so reruns are byte-identical) to ``--out``.
"""
from __future__ import annotations

import argparse
import copy
import datetime
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from typing import List, Optional

from . import __version__
from . import detector as det
from .analysis import Experiment, baseline_comparison, per_channel_variance, psi_sweep, sample_images
from .data import DatasetSpec, load_jsonl, make_splits, save_jsonl
from .imitation import DistillConfig
from .mask import (MaskConfig, estimate_mask, estimate_mask_hard, mask_to_overlay,
                   overlay_to_json, render_overlay)
from .trainer import TrainConfig, distill_train, load_detector, make_student, train_teacher, train

logger = logging.getLogger("fine_imitate")


class ConfigError(ValueError):
    pass


def _defaults(cls, drop=()):
    return {f.name: (list(v) if isinstance(v, tuple) else v)
            for f in fields(cls) if f.name not in drop
            for v in [getattr(cls(), f.name)]}


def default_config() -> dict:
    return {
        "data": {**_defaults(DatasetSpec), "num_test": 100},
        "teacher": _defaults(det.DetectorConfig),
        "student": {"width_mult": 0.25},
        "train": _defaults(TrainConfig, drop=("distill",)),
        "teacher_train": {},  # overrides of "train" used by train-teacher
        "distill": _defaults(DistillConfig),
        "sweep": {"psis": [0.0, 0.1, 0.5, 0.9, 1.0], "seeds": [0, 1, 2]},
        "compare": {"seeds": [0, 1, 2]},
        "variance": {"psi": 0.5, "num_images": 10, "sample_seed": 0},
        "visualize": {"index": 0, "psi": 0.5, "hard_threshold": None, "split": "test"},
    }


def _merge(base: dict, update: dict, path: str = "") -> None:
    for k, v in update.items():
        name = f"{path}{k}"
        if path == "teacher_train.":
            if k not in default_config()["train"]:
                raise ConfigError(f"unknown config key '{name}'")
            base[k] = v
        elif k not in base:
            raise ConfigError(f"unknown config key '{name}'")
        elif isinstance(base[k], dict) or name == "teacher_train":
            if not isinstance(v, dict):
                raise ConfigError(f"config key '{name}' must be an object")
            _merge(base[k], v, name + ".")
        else:
            base[k] = v


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(path: Optional[str], overrides: List[str], seed: Optional[int]) -> dict:
    cfg = default_config()
    if path:
        with open(path) as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(cfg, loaded)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override '{item}' is not key=value")
        update = node = {}
        parts = key.split(".")
        for p in parts[:-1]:
            node[p] = {}
            node = node[p]
        node[parts[-1]] = _parse_value(value)
        _merge(cfg, update)
    if seed is not None:
        cfg["train"]["seed"] = seed
    return cfg


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def build_objects(cfg: dict):
    """Typed objects from a resolved config; raises ConfigError on bad values."""
    try:
        data = dict(cfg["data"])
        num_test = int(data.pop("num_test"))
        spec = DatasetSpec(**_tuples(data))
        teacher = det.DetectorConfig(**_tuples(cfg["teacher"]))
        student = make_student(teacher, float(cfg["student"]["width_mult"]))
        train_cfg = TrainConfig(**cfg["train"])
        teacher_train = TrainConfig(**{**cfg["train"], **cfg["teacher_train"]})
        distill = DistillConfig(**cfg["distill"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return spec, num_test, teacher, student, train_cfg, teacher_train, distill


def _load_data(cfg: dict, data_dir: Optional[str]):
    spec, num_test = build_objects(cfg)[:2]
    if data_dir is None:
        return make_splits(spec, num_test)
    out = []
    for name in ("train", "test"):
        path = os.path.join(data_dir, f"{name}.jsonl")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing {path}")
        samples = load_jsonl(path)
        for s in samples:
            s.load()
        out.append(samples)
    return out[0], out[1]


def _load_teacher(path: str) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing teacher checkpoint {path}")
    return load_detector(path)


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_text(path, text) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


# ------------------------------------------------------------------ commands

def cmd_generate_data(cfg, args) -> dict:
    train_set, test_set = _load_data(cfg, None)
    save_jsonl(train_set, os.path.join(args.out, "train.jsonl"), os.path.join(args.out, "images"))
    save_jsonl(test_set, os.path.join(args.out, "test.jsonl"), os.path.join(args.out, "images"))
    digest = hashlib.sha256()
    for s in list(train_set) + list(test_set):
        digest.update(s.image.tobytes())
    return {"num_train": len(train_set), "num_test": len(test_set),
            "num_boxes": sum(len(s.gts) for s in list(train_set) + list(test_set)),
            "pixels_sha256": digest.hexdigest()}


def _train_metrics(rec) -> dict:
    ev = rec.evals[-1] if rec.evals else {}
    return {"mAP": ev.get("mAP"), "per_class": ev.get("per_class"), "params_sha256": rec.params_sha256,
            "final_loss": rec.losses[-1] if rec.losses else None}


def _save_run(rec, out) -> None:
    rec.checkpoint = os.path.basename(rec.checkpoint) if rec.checkpoint else None
    rec.save(os.path.join(out, "run.json"))


def cmd_train_teacher(cfg, args) -> dict:
    _, _, teacher, _, _, teacher_train, _ = build_objects(cfg)
    train_set, test_set = _load_data(cfg, args.data)
    rec = train_teacher(teacher, teacher_train, train_set, test_set, out_dir=args.out)
    _save_run(rec, args.out)
    return _train_metrics(rec)


def cmd_train(cfg, args) -> dict:
    _, _, _, student, train_cfg, _, _ = build_objects(cfg)
    train_set, test_set = _load_data(cfg, args.data)
    rec = train(student, train_cfg, train_set, test_set, out_dir=args.out)
    _save_run(rec, args.out)
    return _train_metrics(rec)


def cmd_distill(cfg, args) -> dict:
    _, _, teacher, student, train_cfg, _, distill = build_objects(cfg)
    train_set, test_set = _load_data(cfg, args.data)
    t_params = _load_teacher(args.teacher)
    rec = distill_train(t_params, teacher, student, TrainConfig(**{**asdict(train_cfg), "distill": distill}),
                        train_set, test_set, out_dir=args.out)
    _save_run(rec, args.out)
    return {**_train_metrics(rec), "teacher_sha256": rec.config["teacher_sha256"]}


def _experiment(cfg, args) -> Experiment:
    _, _, teacher, student, train_cfg, _, distill = build_objects(cfg)
    train_set, test_set = _load_data(cfg, args.data)
    return Experiment(teacher, _load_teacher(args.teacher), student,
                      TrainConfig(**{**asdict(train_cfg), "distill": distill}), train_set, test_set)


def cmd_sweep_psi(cfg, args) -> dict:
    exp = _experiment(cfg, args)
    res = psi_sweep(cfg["sweep"]["psis"], cfg["sweep"]["seeds"], exp)
    _write_text(os.path.join(args.out, "sweep.csv"), res.to_csv())
    _write_text(os.path.join(args.out, "sweep.json"), res.to_json())
    return {"psi": [p.psi for p in res.points], "mean_map": [p.mean_map for p in res.points],
            "per_seed_map": [p.maps for p in res.points]}


def cmd_compare_baselines(cfg, args) -> dict:
    exp = _experiment(cfg, args)
    res = baseline_comparison(cfg["compare"]["seeds"], exp)
    _write_text(os.path.join(args.out, "comparison.csv"), res.to_csv())
    _write_text(os.path.join(args.out, "comparison.json"), res.to_json())
    return {"mean_map": {v: res.mean_map(v) for v in res.maps}, "per_seed_map": res.maps,
            "varied": res.varied}


def cmd_analyze_variance(cfg, args) -> dict:
    _, _, teacher, *_ = build_objects(cfg)
    vcfg = cfg["variance"]
    _, test_set = _load_data(cfg, args.data)
    images = sample_images(test_set, int(vcfg["num_images"]), int(vcfg["sample_seed"]))
    report = per_channel_variance(_load_teacher(args.teacher), teacher, images, float(vcfg["psi"]))
    _write_text(os.path.join(args.out, "variance.csv"), report.to_csv())
    return {**report.summary(), "image_ids": [s.image_id for s in images]}


def cmd_visualize_mask(cfg, args) -> dict:
    _, _, teacher, *_ = build_objects(cfg)
    vcfg = cfg["visualize"]
    train_set, test_set = _load_data(cfg, args.data)
    samples = test_set if vcfg["split"] == "test" else train_set
    index = int(vcfg["index"])
    if not 0 <= index < len(samples):
        raise ConfigError(f"visualize.index {index} out of range for {len(samples)} images")
    sample = samples[index]
    image = sample.load()
    grid = teacher.grid(image.shape[1], image.shape[0])
    if vcfg["hard_threshold"] is not None:
        mask = estimate_mask_hard(sample.gts, grid, float(vcfg["hard_threshold"]))
    else:
        mask = estimate_mask(sample.gts, grid, MaskConfig(float(vcfg["psi"])))[0]
    rects = mask_to_overlay(mask, grid.stride, image.shape[1], image.shape[0])
    render_overlay(image, rects, sample.gts).save(os.path.join(args.out, "overlay.png"))
    _write_text(os.path.join(args.out, "overlay.json"), overlay_to_json(rects))
    return {"image_id": sample.image_id, "n_positive": mask.n_positive, "cells": mask.cells()}


COMMANDS = {
    "generate-data": (cmd_generate_data, "render the synthetic dataset to PNG + JSONL", ()),
    "train-teacher": (cmd_train_teacher, "train the full-width teacher", ("data",)),
    "train": (cmd_train, "train the width-multiplied student on gt only", ("data",)),
    "distill": (cmd_distill, "train the student with masked feature imitation", ("data", "teacher")),
    "sweep-psi": (cmd_sweep_psi, "imitation runs over a grid of psi values", ("data", "teacher")),
    "compare-baselines": (cmd_compare_baselines, "no-imitation / fine / full / gt-projection masks",
                          ("data", "teacher")),
    "analyze-variance": (cmd_analyze_variance, "per-channel teacher feature variance in/out of the mask",
                         ("data", "teacher")),
    "visualize-mask": (cmd_visualize_mask, "overlay an imitation mask on an image", ("data",)),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fine-imitate", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text, extra) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config key, value parsed as JSON (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if "data" in extra:
            p.add_argument("--data", help="dataset directory from generate-data (default: generate in memory)")
        if "teacher" in extra:
            p.add_argument("--teacher", required=True, help="teacher checkpoint (.npz)")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = _now()
    cfg = resolve_config(args.config, args.override, args.seed)
    build_objects(cfg)
    os.makedirs(args.out, exist_ok=True)
    fn = COMMANDS[args.command][0]
    metrics = fn(copy.deepcopy(cfg), args)
    _write_json(os.path.join(args.out, "metrics.json"), metrics)
    _write_json(os.path.join(args.out, "manifest.json"), {
        "command": args.command, "config": cfg, "seed": cfg["train"]["seed"],
        "data_seed": cfg["data"]["seed"], "out": os.path.abspath(args.out),
        "data": getattr(args, "data", None), "teacher": getattr(args, "teacher", None),
        "version": __version__, "started": started, "finished": _now()})
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line driver: gen-data, train, eval, pose-eval, export-mesh.

Exit codes: 0 ok, 1 usage / invalid input, 2 IO or missing files, 3 training diverged,
4 checkpoint mismatch.
"""
from __future__ import annotations

import argparse
from concurrent.futures import ThreadPoolExecutor
import json
import logging
import math
from pathlib import Path
import sys

import numpy as np
from tqdm import tqdm
import yaml

import config
from inemo import __version__
from inemo.errors import InemoError, InvalidArgumentError
from inemo.models import Camera
from inemo.services import checkpoint, settings_store
from inemo.services.benchgen import (
    OCCLUSION_RANGES,
    build_task_sequence,
    make_class_appearance,
    occlude,
    render_sample,
)
from inemo.services.dataset_io import Dataset, DatasetWriter, file_digest
from inemo.services.geometry3d import export_mesh
from inemo.services.inference import (
    evaluate_classification,
    evaluate_pose,
    mean_task_accuracy,
    pose_report,
)
from inemo.services.training import ModelState, TaskData, train_task

log = logging.getLogger(__name__)

REPORT_SCHEMA = "inemo-report/1"


def log_step(message: str) -> None:
    print(f"\n==> {message}", flush=True)


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_set(items):
    """`--set key=value` pairs; values parsed as YAML scalars."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise InvalidArgumentError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def _parse_angle(text):
    text = text.strip().lower().replace(" ", "")
    if text.startswith("pi/"):
        return math.pi / float(text[3:])
    return float(text)


def _write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _report_header(kind, cfg, confusion=None):
    return {
        "schema_version": REPORT_SCHEMA,
        "kind": kind,
        "code_version": __version__,
        "config": settings_store.config_echo(cfg),
        "conventions": {
            "kd": "KL(p_previous || p_current), p = softmax(kappa3 * f . theta) over previous vertices",
            "classify": (
                "confusion penalty applied per pixel, then max over the foreground"
                if (cfg.confusion if confusion is None else confusion)
                else "plain vertex matching: max over the foreground of the class score"
            ),
        },
    }


def _dataset_overrides(dataset):
    meta = dataset.meta
    return {
        "image_size": meta["image_size"],
        "viewport_scale": meta["viewport_scale"],
        "distance": meta["distance"],
        "num_classes": meta["num_classes"],
        "split_spec": meta["split_spec"],
    }


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    overrides = _parse_set(args.set)
    for key, flag in (("num_classes", args.classes), ("per_class_train", args.per_class),
                      ("per_class_test", args.per_class_test), ("split_spec", args.split),
                      ("seed", args.seed), ("noise_level", args.noise), ("image_size", args.image_size),
                      ("azimuth_mode", args.azimuth_mode)):
        if flag is not None:
            overrides[key] = flag
    if args.out is None:
        config.ensure_data_dirs()
        args.out = config.DATASETS_DIR / "default"
    cfg = settings_store.resolve_config(args.preset, args.config, overrides)
    levels = [l.strip().lower() for l in (args.occlusion or "").split(",") if l.strip()]
    for level in levels:
        if level not in OCCLUSION_RANGES:
            raise InvalidArgumentError(f"Unknown occlusion level {level!r}")

    log_step(f"Generating {cfg.num_classes} classes, split {cfg.split_spec}, seed {cfg.seed}")
    seq = build_task_sequence(cfg.num_classes, cfg.split_spec, cfg.per_class_train, cfg.per_class_test,
                              cfg.seed, cfg.azimuth_mode, cfg.distance)
    appearances = {c: make_class_appearance(c, cfg.seed) for c in range(cfg.num_classes)}
    camera = Camera.for_resolution(cfg.image_size, viewport_scale=cfg.viewport_scale)
    task_of = {c: t.index for t in seq.tasks for c in t.class_ids}

    def render(spec):
        sample = render_sample(appearances[spec.class_id], spec.pose, camera, spec.background_seed,
                               cfg.noise_level, spec.sample_id)
        extra = []
        if spec.split == "test":
            extra = [occlude(sample, level, seed=spec.background_seed) for level in levels]
        return spec, sample, extra

    meta = {
        "num_classes": cfg.num_classes,
        "split_spec": cfg.split_spec,
        "seed": cfg.seed,
        "per_class_train": cfg.per_class_train,
        "per_class_test": cfg.per_class_test,
        "image_size": cfg.image_size,
        "viewport_scale": cfg.viewport_scale,
        "distance": cfg.distance,
        "noise_level": cfg.noise_level,
        "azimuth_mode": cfg.azimuth_mode,
        "occlusion_levels": levels,
        "tasks": [t.to_dict() for t in seq.tasks],
        "appearances": [appearances[c].to_dict() for c in sorted(appearances)],
    }
    counts = {"train": 0, "test": 0, **{level: 0 for level in levels}}
    with DatasetWriter(args.out, meta) as writer, ThreadPoolExecutor(max_workers=config.INEMO_THREADS) as pool:
        for spec, sample, extra in tqdm(pool.map(render, seq.specs), total=len(seq.specs),
                                        desc="render", unit="sample", disable=None):
            writer.add(sample, spec.split, task_of[spec.class_id])
            counts[spec.split] += 1
            for occluded in extra:
                writer.add(occluded, "test", task_of[spec.class_id])
                counts[occluded.occlusion_level] += 1
    dataset = Dataset(args.out)
    print(json.dumps({"out": str(args.out), "counts": counts, "manifest_sha256": dataset.manifest_digest},
                     sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_config(args, dataset):
    overrides = _parse_set(args.set)
    overrides.update(_dataset_overrides(dataset))
    if args.tasks and args.tasks != dataset.meta["split_spec"]:
        raise InvalidArgumentError(
            f"--tasks {args.tasks} does not match the dataset's split {dataset.meta['split_spec']}"
        )
    for key, flag in (("epochs_per_task", args.epochs), ("seed", args.seed), ("lr", args.lr)):
        if flag is not None:
            overrides[key] = flag
    if args.no_replay:
        overrides["replay"] = False
    if args.no_kd:
        overrides["kd"] = False
    if args.no_etf:
        overrides["etf"] = False
    if args.latent_init:
        overrides["latent_init"] = args.latent_init
    if args.no_confusion:
        overrides["confusion"] = False
    overrides["data"] = str(args.data)
    return settings_store.resolve_config(args.preset, args.config, overrides)


def evaluate_seen(state, dataset, tasks, upto, occlusion="", threads=None, confusion=True):
    """Accuracy on the test samples of tasks 0..upto, overall and per task."""
    seen = [c for t in tasks[: upto + 1] for c in t.class_ids]
    ids = dataset.select("test", set(seen), occlusion)
    samples = dataset.load_many(ids)
    result = evaluate_classification(state, samples, threads, confusion)
    preds = np.array(result["predictions"])
    truth = np.array([s.class_id for s in samples])
    per_task = []
    for t in tasks[: upto + 1]:
        sel = np.isin(truth, t.class_ids)
        per_task.append(float(np.mean(preds[sel] == truth[sel])) if sel.any() else None)
    result["per_task"] = per_task
    result["classes"] = sorted(seen)
    return result, samples


def cmd_train(args):
    dataset = Dataset(args.data)
    cfg = _train_config(args, dataset)
    if args.out is None:
        config.ensure_data_dirs()
        args.out = config.RUNS_DIR / "default"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = dataset.tasks
    appearances = dataset.appearances
    state = ModelState.create(cfg)
    trace_path = out / "trace.jsonl"
    trace_file = open(trace_path, "w", encoding="utf-8")

    def sink(record):
        trace_file.write(json.dumps(record, sort_keys=True) + "\n")

    def dump(st):
        return str(checkpoint.save(st, cfg, out / "diverged.ckpt"))

    mode = "finetune" if cfg.finetune else "full"
    try:
        for task in tasks:
            log_step(f"Task {task.index + 1}/{len(tasks)}: classes {task.class_ids} ({mode})")
            data = TaskData(
                index=task.index,
                class_ids=task.class_ids,
                samples=dataset.load_many(dataset.select("train", set(task.class_ids))),
                appearances=appearances,
                load_sample=dataset.load_sample,
            )
            train_task(data, state, cfg, trace_sink=sink, on_diverged=dump)
            result, _ = evaluate_seen(state, dataset, tasks, task.index, confusion=cfg.confusion)
            state.history.append({
                "task": task.index,
                "classes": result["classes"],
                "accuracy": result["accuracy"],
                "per_task": result["per_task"],
            })
            path = checkpoint.save(state, cfg, out / f"task-{task.index:02d}.ckpt")
            print(f"task {task.index}: acc(1:{task.index + 1}) = {result['accuracy']:.4f} -> {path} "
                  f"(sha256 {file_digest(path)[:16]})")
    finally:
        trace_file.close()
    return 0


# ---------------------------------------------------------------------------
# eval / pose-eval / export-mesh
# ---------------------------------------------------------------------------


def cmd_eval(args):
    state, cfg = checkpoint.load(args.checkpoint)
    dataset = Dataset(args.data or cfg.data)
    tasks = dataset.tasks
    upto = state.tasks_done - 1
    if upto < 0:
        raise InvalidArgumentError("Checkpoint has no trained tasks")
    levels = [args.occlusion.lower()] if args.occlusion else dataset.occlusion_levels()
    use_confusion = cfg.confusion and not args.no_confusion

    log_step(f"Evaluating {len(state.meshes)} classes after task {upto + 1}")
    report = _report_header("classification", cfg, use_confusion)
    clean, _ = evaluate_seen(state, dataset, tasks, upto, "", confusion=use_confusion)
    history = [h["accuracy"] for h in state.history]
    report.update({
        "checkpoint": str(args.checkpoint),
        "tasks_done": state.tasks_done,
        "classes": clean["classes"],
        "accuracy": clean["accuracy"],
        "final_accuracy": clean["accuracy"],
        "mean_task_accuracy": mean_task_accuracy(history) if history else clean["accuracy"],
        "history": state.history,
        "per_task": clean["per_task"],
        "confusion": clean["confusion"],
        "fallbacks": clean["fallbacks"],
        "variant": {"latent_init": cfg.latent_init, "confusion_term": use_confusion},
        "occlusion": {},
    })
    for level in levels:
        if level == "":
            report["occlusion"]["none"] = clean["accuracy"]
            continue
        result, samples = evaluate_seen(state, dataset, tasks, upto, level, confusion=use_confusion)
        report["occlusion"][level] = result["accuracy"] if samples else None
    path = _write_json(args.out, report)
    print(json.dumps({"accuracy": report["accuracy"], "mean_task_accuracy": report["mean_task_accuracy"],
                      "occlusion": report["occlusion"], "report": str(path)}, sort_keys=True))
    return 0


def cmd_pose_eval(args):
    state, cfg = checkpoint.load(args.checkpoint)
    dataset = Dataset(args.data or cfg.data)
    thresholds = [_parse_angle(t) for t in args.thresholds.split(",")]
    names = {"pi_6" if i == 0 else ("pi_18" if i == 1 else f"t{i}"): t for i, t in enumerate(thresholds)}
    classes = state.meshes.classes()
    ids = dataset.select("test", set(classes), (args.occlusion or "").lower())
    if args.per_class:
        kept, seen = [], {}
        for sample_id in ids:
            c = dataset.record(sample_id)["class_id"]
            if seen.get(c, 0) < args.per_class:
                kept.append(sample_id)
                seen[c] = seen.get(c, 0) + 1
        ids = kept
    samples = dataset.load_many(ids)

    log_step(f"Estimating {len(samples)} poses ({'self-render' if args.self_render else 'images'})")
    estimates, errors = evaluate_pose(state, samples, cfg, self_render=args.self_render)
    report = _report_header("pose", cfg)
    report.update({
        "checkpoint": str(args.checkpoint),
        "self_render": bool(args.self_render),
        "thresholds": names,
        **pose_report(samples, estimates, errors, names),
    })
    path = _write_json(args.out, report)
    print(json.dumps({k: report[k] for k in report if k.startswith("acc_") or k == "median_error"}
                     | {"report": str(path)}, sort_keys=True))
    return 0


def cmd_export_mesh(args):
    state, _ = checkpoint.load(args.checkpoint)
    mesh = state.meshes.get(args.class_id)
    export_mesh(mesh.geometry, args.out)
    print(f"class {args.class_id}: {mesh.geometry.vertex_count} vertices -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_config_flags(p):
    p.add_argument("--preset", help="Named preset from presets.yaml")
    p.add_argument("--config", help="Flat YAML file of ExperimentConfig keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override one config key")


def build_parser():
    parser = _Parser(prog="inemo", description="Incremental neural mesh models at desk scale.")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    parser.add_argument("--version", action="version", version=f"inemo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="Generate the synthetic benchmark")
    p.add_argument("--out", help="Dataset directory (default: DATA_DIR/datasets/default)")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--per-class-test", type=int)
    p.add_argument("--split")
    p.add_argument("--seed", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--image-size", type=int)
    p.add_argument("--azimuth-mode", choices=("uniform", "biased"))
    p.add_argument("--occlusion", help="Comma list of levels to add to the test split (l1,l2,l3)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="Train the task sequence; one checkpoint per task")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="Run directory (default: DATA_DIR/runs/default)")
    p.add_argument("--tasks", help="Split spec; must match the dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-replay", action="store_true")
    p.add_argument("--no-kd", action="store_true")
    p.add_argument("--no-etf", action="store_true")
    p.add_argument("--latent-init", choices=("etf", "random"), help="Initial vertex features (default: etf)")
    p.add_argument("--no-confusion", action="store_true", help="Plain vertex matching in the per-task evaluation")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Classification report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--occlusion", help="Only this level (l1, l2, l3); default: every level in the dataset")
    p.add_argument("--no-confusion", action="store_true", help="Classify without the confusion term")
    p.add_argument("--out", default="report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pose-eval", help="Pose accuracy report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--thresholds", default="pi/6,pi/18")
    p.add_argument("--self-render", action="store_true", help="Targets are noise-free mesh renderings")
    p.add_argument("--per-class", type=int, help="At most this many test samples per class")
    p.add_argument("--occlusion")
    p.add_argument("--out", default="pose-report.json")
    p.set_defaults(func=cmd_pose_eval)

    p = sub.add_parser("export-mesh", help="Write one class's cuboid mesh as text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_mesh)
    return parser


def configure_logging(verbose=False):
    level = logging.DEBUG if verbose else getattr(logging, config.INEMO_LOG_LEVEL, logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("\nInterrupted by user.", file=sys.stderr)
        return 130
    except InemoError as exc:
        dump = getattr(exc, "dump_path", None)
        print(f"\nError: {exc}" + (f" (state dumped to {dump})" if dump else ""), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"\nError: {exc}", file=sys.stderr)
        return 2

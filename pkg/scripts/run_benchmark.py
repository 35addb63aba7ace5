#!/usr/bin/env python3
"""Desk benchmark: generate the 8-class B0+2 dataset, train the full method and the finetune
ablation, then evaluate classification (clean and occluded) and self-rendered pose accuracy.

With --ablations it also trains the full method from random unit-sphere vertex features and
evaluates the full model without the confusion term.

Prints one JSON summary. Directional checks are reported as booleans, not enforced.

Usage (from project root):
  python scripts/run_benchmark.py --work /tmp/desk
  python scripts/run_benchmark.py --work /tmp/desk --epochs 4 --per-class 40   # quicker, weaker
"""
import json
import sys
from pathlib import Path

# Ensure project root is on path when run as scripts/run_benchmark.py
_project_root = Path(__file__).resolve().parent.parent
if str(_project_root) not in sys.path:
    sys.path.insert(0, str(_project_root))


def _run(argv):
    from inemo.commands.cli import main as cli_main

    code = cli_main([str(a) for a in argv])
    if code != 0:
        raise SystemExit(f"inemo {argv[0]} failed with exit code {code}")


def run_benchmark(work, seed=1, classes=8, per_class=100, per_class_test=20, epochs=10, pose_per_class=50,
                  ablations=False):
    work = Path(work)
    data = work / "data"
    _run(["gen-data", "--out", data, "--classes", classes, "--per-class", per_class,
          "--per-class-test", per_class_test, "--split", "B0+2", "--seed", seed,
          "--occlusion", "l1,l2,l3", "--preset", "desk"])

    reports = {}
    runs = [("full", []), ("finetune", ["--no-replay", "--no-kd", "--no-etf"])]
    if ablations:
        runs.append(("random-init", ["--latent-init", "random"]))
    for name, flags in runs:
        run_dir = work / name
        _run(["train", "--data", data, "--out", run_dir, "--epochs", epochs, "--seed", seed,
              "--preset", "desk", *flags])
        last = sorted(run_dir.glob("task-*.ckpt"))[-1]
        _run(["eval", "--checkpoint", last, "--data", data, "--out", run_dir / "report.json"])
        reports[name] = json.loads((run_dir / "report.json").read_text())

    full_last = sorted((work / "full").glob("task-*.ckpt"))[-1]
    _run(["pose-eval", "--checkpoint", full_last, "--data", data, "--self-render",
          "--per-class", pose_per_class, "--out", work / "full" / "pose-report.json"])
    pose = json.loads((work / "full" / "pose-report.json").read_text())

    full, finetune = reports["full"], reports["finetune"]
    extra = {}
    if ablations:
        _run(["eval", "--checkpoint", full_last, "--data", data, "--no-confusion",
              "--out", work / "full" / "report-no-confusion.json"])
        plain = json.loads((work / "full" / "report-no-confusion.json").read_text())
        extra = {
            "random_init_accuracy": reports["random-init"]["accuracy"],
            "no_confusion_accuracy": plain["accuracy"],
        }
    occ = full["occlusion"]
    ordered = [occ.get(k) for k in ("none", "l1", "l2", "l3")]
    return {
        "full_accuracy": full["accuracy"],
        "full_mean_task_accuracy": full["mean_task_accuracy"],
        "finetune_accuracy": finetune["accuracy"],
        "finetune_first_task_accuracy": finetune["per_task"][0],
        "full_first_task_accuracy": full["per_task"][0],
        "occlusion": occ,
        "pose": {k: pose[k] for k in ("acc_pi_6", "acc_pi_18", "median_error", "refine_failures")},
        "ablations": extra,
        "checks": {
            "full_at_least_0.90": full["accuracy"] >= 0.90,
            "finetune_forgets": finetune["per_task"][0] <= 0.50
            and full["accuracy"] - finetune["per_task"][0] >= 0.30,
            "occlusion_ordered": None not in ordered
            and all(a >= b for a, b in zip(ordered, ordered[1:]))
            and ordered[0] - ordered[-1] >= 0.10,
            "pose_pi_18_at_least_0.90": pose["acc_pi_18"] >= 0.90,
            "pose_pi_6_at_least_0.98": pose["acc_pi_6"] >= 0.98,
        },
    }


def main():
    import argparse
    parser = argparse.ArgumentParser(description="Run the desk-scale incremental benchmark end to end.")
    parser.add_argument("--work", required=True, help="Working directory for data, runs and reports")
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--per-class", type=int, default=100)
    parser.add_argument("--per-class-test", type=int, default=20)
    parser.add_argument("--pose-per-class", type=int, default=50)
    parser.add_argument("--ablations", action="store_true", help="Also run the random-init and no-confusion variants")
    args = parser.parse_args()

    summary = run_benchmark(args.work, seed=args.seed, per_class=args.per_class,
                            per_class_test=args.per_class_test, epochs=args.epochs,
                            pose_per_class=args.pose_per_class, ablations=args.ablations)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0 if all(summary["checks"].values()) else 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Verbs: gen-data, train, detect, eval, gradcheck, run, report. A run
directory is shared state between the stage verbs: gen-data writes the
dataset and videos, train the checkpoint and log, detect the detections
file, eval the scores; run chains all four (or the sweep / loss-comparison
protocols) and leaves a FAILED marker if a stage dies.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .evaluation import read_eval_csv
from .experiment import (ConfigError, ExperimentConfig, config_from_dict,
                         run_experiment, run_lambda_sweep, run_loss_comparison,
                         stage_detect, stage_eval, stage_gen_data, stage_train)
from .gradcheck import standard_suite
from .tensor import NumericsError, ShapeError
from .training import load_train_log

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="siamtad",
        description="siamese identification-verification experiments for "
                    "temporal action detection")
    sub = parser.add_subparsers(dest="command", required=True, metavar="verb")

    def stage_parser(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="experiment config JSON")
        p.add_argument("--seed", type=int, metavar="N", help="override the global seed")
        p.add_argument("--out", metavar="DIR", help="run directory")
        p.add_argument("--preset", choices=("tiny", "full"), help="network preset")
        p.add_argument("--lambda", dest="lam", type=float, metavar="X",
                       help="verification loss weight")
        p.add_argument("--loss", choices=("verification", "contrastive"),
                       help="pair loss")
        return p

    stage_parser("gen-data", "generate the synthetic dataset and videos")
    stage_parser("train", "train on a generated dataset")
    stage_parser("detect", "run proposals + classification + NMS")
    stage_parser("eval", "score detections against ground truth")
    run_p = stage_parser("run", "full pipeline: gen-data, train, detect, eval")
    run_p.add_argument("--sweep-lambda", action="store_true",
                       help="run the lambda ablation {0, 0.5, 1, 2}")
    run_p.add_argument("--compare-losses", action="store_true",
                       help="run verification vs contrastive")

    grad_p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    grad_p.add_argument("--seeds", type=int, default=5, metavar="N",
                        help="instances per checked item")

    report_p = sub.add_parser("report", help="merge runs into a table and plots")
    report_p.add_argument("runs", nargs="+", metavar="RUN_DIR",
                          help="run directories holding eval.csv")
    report_p.add_argument("--out", required=True, metavar="DIR",
                          help="report output directory")
    return parser


def resolve_config(args) -> ExperimentConfig:
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    config = config_from_dict(doc)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.preset is not None:
        config = replace(config, preset=args.preset)
    if args.out is not None:
        config = replace(config, out=str(args.out))
    if args.lam is not None:
        config = replace(config, train=replace(config.train, lam=args.lam))
    if args.loss is not None:
        config = replace(config, train=replace(config.train, loss=args.loss))
    if getattr(args, "sweep_lambda", False):
        config = replace(config, sweep_lambda=True)
    if getattr(args, "compare_losses", False):
        config = replace(config, compare_losses=True)
    return config


def cmd_gen_data(args) -> int:
    config = resolve_config(args)
    stage_gen_data(config, Path(config.out))
    print(f"dataset and videos written under {config.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    metrics = stage_train(config, Path(config.out))
    print(f"holdout identification accuracy {metrics['identification_accuracy']:.3f}, "
          f"pair accuracy {metrics['pair_accuracy']:.3f}")
    return EXIT_OK


def cmd_detect(args) -> int:
    config = resolve_config(args)
    stage_detect(config, Path(config.out))
    print(f"detections written to {Path(config.out) / 'detections.jsonl'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = resolve_config(args)
    result = stage_eval(config, Path(config.out))
    for th in result.thresholds:
        print(f"mAP@{th:g} = {result.mean_ap[th]:.4f}")
    return EXIT_OK


def cmd_run(args) -> int:
    config = resolve_config(args)
    out = Path(config.out)
    if config.sweep_lambda:
        run_lambda_sweep(config, out)
        print(f"lambda sweep written to {out / 'sweep_lambda.csv'}")
    if config.compare_losses:
        run_loss_comparison(config, out)
        print(f"loss comparison written to {out / 'loss_comparison.csv'}")
    if not config.sweep_lambda and not config.compare_losses:
        summary = run_experiment(config, out)
        maps = " ".join(f"mAP@{k}={v:.4f}" for k, v in summary["map"].items())
        print(f"run complete: {maps}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    items = standard_suite(seeds=args.seeds)
    failed = 0
    for name, err, tol in items:
        status = "PASS" if err < tol else "FAIL"
        failed += status == "FAIL"
        print(f"{name:22s} max rel err {err:.3e}  (tolerance {tol:g})  {status}")
    if failed:
        print(f"{failed} gradient check(s) failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for run in args.runs:
        run_dir = Path(run)
        eval_csv = run_dir / "eval.csv"
        if not eval_csv.exists():
            raise FileNotFoundError(f"{run_dir}: no eval.csv; not a finished run")
        mean_ap = read_eval_csv(eval_csv)["mAP"]
        rows.append((run_dir.name, run_dir, mean_ap))

    thresholds = sorted(rows[0][2])
    for name, _, mean_ap in rows:
        if sorted(mean_ap) != thresholds:
            raise ConfigError(f"run {name} was evaluated at different thresholds")

    import csv as csv_module
    with open(out / "report.csv", "w", newline="") as handle:
        writer = csv_module.writer(handle)
        writer.writerow(["run"] + [f"{th:g}" for th in thresholds])
        for name, _, mean_ap in rows:
            writer.writerow([name] + [f"{mean_ap[th]:.6f}" for th in thresholds])

    _plot_map_vs_threshold(rows, thresholds, out / "map_vs_threshold.svg")
    curve_runs = [(name, load_train_log(run_dir / "train_log.csv"))
                  for name, run_dir, _ in rows if (run_dir / "train_log.csv").exists()]
    if curve_runs:
        _plot_training_curves(curve_runs, out / "training_curves.svg")
    print(f"report written to {out / 'report.csv'}")
    return EXIT_OK


def _matplotlib():
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "siamtad"
    import matplotlib.pyplot as plt
    return plt


def _plot_map_vs_threshold(rows, thresholds, path: Path) -> None:
    plt = _matplotlib()
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, _, mean_ap in rows:
        ax.plot(thresholds, [mean_ap[th] for th in thresholds], marker="o", label=name)
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("mAP")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def _plot_training_curves(curve_runs, path: Path) -> None:
    plt = _matplotlib()
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, log in curve_runs:
        ax.plot([r.iteration for r in log.rows], [r.loss for r in log.rows],
                label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("joint loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "run": cmd_run,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except (NumericsError, ShapeError) as error:
        print(f"numerical failure: {error}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError) as error:
        print(f"i/o failure: {error}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as error:
        print(f"configuration error: {error}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

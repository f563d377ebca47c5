"""Experiment configuration and the staged gen -> train -> detect -> eval
pipeline, including the lambda-sweep and loss-comparison protocols.

One JSON document configures everything; every field has a default, so an
empty config runs the tiny preset end to end. A single global seed derives
all stage seeds, making a run a pure function of (config, seed).
"""

from __future__ import annotations

import csv
import json
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (SyntheticDatasetSpec, generate_synthetic_dataset,
                   generate_untrimmed_videos, load_dataset, load_videos,
                   save_dataset, save_videos, split_dataset)
from .detection import (classify_proposals, generate_proposals,
                        load_detections, load_ground_truth, nms,
                        save_detections, save_ground_truth, sort_detections)
from .evaluation import (DEFAULT_THRESHOLDS, EvalResult, evaluate,
                         read_eval_csv, write_eval_csv)
from .network import PRESETS, build_model, load_checkpoint, save_checkpoint
from .training import (TrainConfig, identification_accuracy,
                       pair_verification_accuracy, save_train_log, train)

LAMBDA_SWEEP = (0.0, 0.5, 1.0, 2.0)
FAILED_MARKER = "FAILED"

# stage seeds are fixed offsets from the global seed
SEED_DATASET = 0
SEED_VIDEOS = 1
SEED_TRAIN = 2
SEED_HOLDOUT_PAIRS = 3
SEED_LABEL_SHUFFLE = 4


class ConfigError(ValueError):
    """The experiment configuration is malformed or inconsistent."""


@dataclass(frozen=True)
class DatasetParams:
    """Dataset block of the experiment config; the seed and clip shape come
    from the global seed and the network preset."""

    n_classes: int = 4
    clips_per_class: int = 20
    noise_sigma: float = 0.25
    random_phase: bool = True
    background_amplitude: float = 0.4
    confusable_pairs: bool = True
    background_clips: int = 20


@dataclass(frozen=True)
class DetectionParams:
    n_videos: int = 4
    total_length: int = 96
    instances_per_video: int = 3
    # 12-frame instances are hit by both window scales (inside 8-window gives
    # IoU 2/3, covering 16-window gives 3/4), so cross-scale NMS cannot
    # suppress the only window that clears the 0.5 threshold.
    instance_lengths: tuple[int, ...] = (8, 12)
    window_lengths: tuple[int, ...] = (8, 16)
    stride_fraction: float = 0.5
    nms_threshold: float = 0.3

    def __post_init__(self):
        if self.n_videos < 1 or self.total_length < 1 or self.instances_per_video < 1:
            raise ConfigError("detection counts must be positive")
        if not self.instance_lengths or not self.window_lengths:
            raise ConfigError("instance_lengths and window_lengths must be non-empty")
        if not 0.0 < self.stride_fraction <= 1.0:
            raise ConfigError("stride_fraction must lie in (0, 1]")
        if not 0.0 <= self.nms_threshold <= 1.0:
            raise ConfigError("nms_threshold must lie in [0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    preset: str = "tiny"
    out: str = "run"
    dataset: DatasetParams = field(default_factory=DatasetParams)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(iterations=400))
    detection: DetectionParams = field(default_factory=DetectionParams)
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    holdout_per_class: int = 5
    eval_pairs: int = 40
    sweep_lambda: bool = False
    compare_losses: bool = False
    shuffle_train_labels: bool = False

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from "
                              f"{sorted(PRESETS)}")
        if not self.thresholds or any(not 0.0 < t <= 1.0 for t in self.thresholds):
            raise ConfigError("thresholds must lie in (0, 1]")
        if self.holdout_per_class < 1:
            raise ConfigError("holdout_per_class must be at least 1")
        if self.eval_pairs < 1:
            raise ConfigError("eval_pairs must be at least 1")

    def network_config(self):
        """The preset sized for this dataset: actions plus background."""
        return PRESETS[self.preset](n_classes=self.dataset.n_classes + 1,
                                    seed=self.seed)

    def dataset_spec(self) -> SyntheticDatasetSpec:
        return SyntheticDatasetSpec(
            seed=self.seed + SEED_DATASET,
            n_classes=self.dataset.n_classes,
            clips_per_class=self.dataset.clips_per_class,
            clip_shape=self.network_config().input_shape,
            noise_sigma=self.dataset.noise_sigma,
            random_phase=self.dataset.random_phase,
            background_amplitude=self.dataset.background_amplitude,
            confusable_pairs=self.dataset.confusable_pairs,
            background_clips=self.dataset.background_clips,
        )

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed + SEED_TRAIN)

    def to_dict(self) -> dict:
        d = self.train_config().to_dict()
        d.pop("seed")
        return {
            "seed": self.seed,
            "preset": self.preset,
            "out": self.out,
            "dataset": {
                "n_classes": self.dataset.n_classes,
                "clips_per_class": self.dataset.clips_per_class,
                "noise_sigma": self.dataset.noise_sigma,
                "random_phase": self.dataset.random_phase,
                "background_amplitude": self.dataset.background_amplitude,
                "confusable_pairs": self.dataset.confusable_pairs,
                "background_clips": self.dataset.background_clips,
            },
            "train": d,
            "detection": {
                "n_videos": self.detection.n_videos,
                "total_length": self.detection.total_length,
                "instances_per_video": self.detection.instances_per_video,
                "instance_lengths": list(self.detection.instance_lengths),
                "window_lengths": list(self.detection.window_lengths),
                "stride_fraction": self.detection.stride_fraction,
                "nms_threshold": self.detection.nms_threshold,
            },
            "thresholds": list(self.thresholds),
            "holdout_per_class": self.holdout_per_class,
            "eval_pairs": self.eval_pairs,
            "sweep_lambda": self.sweep_lambda,
            "compare_losses": self.compare_losses,
            "shuffle_train_labels": self.shuffle_train_labels,
        }


def _take(block: dict, allowed: set[str], where: str) -> dict:
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(sorted(unknown))}; "
                          f"allowed: {', '.join(sorted(allowed))}")
    return block


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Strict parse: unknown keys anywhere are config errors."""
    if not isinstance(doc, dict):
        raise ConfigError("experiment config must be a JSON object")
    top_allowed = {"seed", "preset", "out", "dataset", "train", "detection",
                   "thresholds", "holdout_per_class", "eval_pairs",
                   "sweep_lambda", "compare_losses", "shuffle_train_labels"}
    _take(doc, top_allowed, "config")
    try:
        dataset = DatasetParams(**_take(dict(doc.get("dataset", {})), {
            "n_classes", "clips_per_class", "noise_sigma", "random_phase",
            "background_amplitude", "confusable_pairs", "background_clips"},
            "dataset"))
        train_block = _take(dict(doc.get("train", {})), {
            "learning_rate", "momentum", "batch_pairs", "iterations", "lambda",
            "same_ratio", "loss", "margin"}, "train")
        defaults = ExperimentConfig().train.to_dict()
        defaults.pop("seed")
        defaults.update(train_block)
        train_config = TrainConfig.from_dict(defaults)
        detection = DetectionParams(**{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in _take(dict(doc.get("detection", {})), {
                "n_videos", "total_length", "instances_per_video",
                "instance_lengths", "window_lengths", "stride_fraction",
                "nms_threshold"}, "detection").items()})
        return ExperimentConfig(
            seed=int(doc.get("seed", 0)),
            preset=doc.get("preset", "tiny"),
            out=doc.get("out", "run"),
            dataset=dataset,
            train=train_config,
            detection=detection,
            thresholds=tuple(doc.get("thresholds", DEFAULT_THRESHOLDS)),
            holdout_per_class=int(doc.get("holdout_per_class", 5)),
            eval_pairs=int(doc.get("eval_pairs", 40)),
            sweep_lambda=bool(doc.get("sweep_lambda", False)),
            compare_losses=bool(doc.get("compare_losses", False)),
            shuffle_train_labels=bool(doc.get("shuffle_train_labels", False)),
        )
    except (TypeError, ValueError) as error:
        if isinstance(error, ConfigError):
            raise
        raise ConfigError(str(error)) from error


def load_config(path: str | Path) -> ExperimentConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


@contextmanager
def _stage(out: Path, name: str):
    """Tag failures with the stage and leave a FAILED marker in the run dir."""
    try:
        yield
    except Exception as error:
        out.mkdir(parents=True, exist_ok=True)
        (out / FAILED_MARKER).write_text(
            f"stage: {name}\n{type(error).__name__}: {error}\n")
        print(f"stage {name} failed: {error}", file=sys.stderr)
        raise


def stage_gen_data(config: ExperimentConfig, out: Path) -> None:
    """Dataset of trimmed clips plus untrimmed videos with planted actions."""
    spec = config.dataset_spec()
    save_dataset(generate_synthetic_dataset(spec), out / "dataset")
    videos = generate_untrimmed_videos(
        spec, config.detection.n_videos, config.detection.total_length,
        config.detection.instances_per_video, config.detection.instance_lengths,
        seed=config.seed + SEED_VIDEOS)
    save_videos(videos, out / "videos")
    save_ground_truth([g for v in videos for g in v.instances], out / "gt.jsonl")


def stage_train(config: ExperimentConfig, out: Path) -> dict:
    dataset = load_dataset(out / "dataset")
    train_set, held = split_dataset(dataset, config.holdout_per_class)
    if config.shuffle_train_labels:
        rng = np.random.default_rng(config.seed + SEED_LABEL_SHUFFLE)
        labels = [clip.label for clip in train_set.clips]
        for clip, label in zip(train_set.clips, rng.permutation(labels)):
            clip.label = int(label)
    model = build_model(config.network_config())
    log = train(model, train_set, config.train_config())
    save_checkpoint(model, out / "checkpoint")
    save_train_log(log, out / "train_log.csv")
    held_actions = [c for c in held.clips if c.label > 0]
    metrics = {
        "identification_accuracy": identification_accuracy(model, held_actions),
        "pair_accuracy": pair_verification_accuracy(
            model, held, config.eval_pairs, config.seed + SEED_HOLDOUT_PAIRS,
            loss=config.train.loss, margin=config.train.margin),
        "initial_loss": log.initial_loss(),
        "final_loss": log.final_loss(),
        "train_clips": len(train_set.clips),
        "holdout_clips": len(held.clips),
    }
    (out / "holdout.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics


def stage_detect(config: ExperimentConfig, out: Path) -> None:
    model = load_checkpoint(out / "checkpoint")
    videos = load_videos(out / "videos")
    detections = []
    for video in videos:
        proposals = generate_proposals(video.total_length,
                                       list(config.detection.window_lengths),
                                       config.detection.stride_fraction)
        scored = classify_proposals(model, video, proposals)
        detections.extend(nms(scored, config.detection.nms_threshold))
    save_detections(sort_detections(detections), out / "detections.jsonl")


def stage_eval(config: ExperimentConfig, out: Path) -> EvalResult:
    detections = load_detections(out / "detections.jsonl")
    ground_truth = load_ground_truth(out / "gt.jsonl")
    result = evaluate(detections, ground_truth, config.thresholds)
    write_eval_csv(result, out / "eval.csv")
    return result


def run_experiment(config: ExperimentConfig, out: str | Path) -> dict:
    """The four stages in order; returns the summary also written to disk."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    marker = out / FAILED_MARKER
    if marker.exists():
        marker.unlink()
    with _stage(out, "gen-data"):
        stage_gen_data(config, out)
    with _stage(out, "train"):
        metrics = stage_train(config, out)
    with _stage(out, "detect"):
        stage_detect(config, out)
    with _stage(out, "eval"):
        result = stage_eval(config, out)
    summary = {
        "seed": config.seed,
        "preset": config.preset,
        "loss": config.train.loss,
        "lambda": config.train.lam,
        **metrics,
        "map": {f"{th:g}": result.mean_ap[th] for th in result.thresholds},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _comparison_rows(out: Path, label: str, runs: list[tuple[str, Path]],
                     thresholds: tuple[float, ...], csv_name: str) -> list[dict]:
    """Merge the sub-runs' mAP rows into one Table-shaped CSV."""
    rows = []
    with open(out / csv_name, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([label] + [f"{th:g}" for th in thresholds])
        for value, run_dir in runs:
            mean_ap = read_eval_csv(run_dir / "eval.csv")["mAP"]
            writer.writerow([value] + [f"{mean_ap[th]:.6f}" for th in thresholds])
            rows.append({label: value, "map": mean_ap})
    return rows


def run_lambda_sweep(config: ExperimentConfig, out: str | Path) -> list[dict]:
    """One full run per lambda in {0, 0.5, 1, 2}, plus sweep_lambda.csv."""
    out = Path(out)
    runs = []
    for lam in LAMBDA_SWEEP:
        sub = replace(config, train=replace(config.train, lam=lam))
        run_dir = out / f"lambda-{lam:g}"
        run_experiment(sub, run_dir)
        runs.append((f"{lam:g}", run_dir))
    return _comparison_rows(out, "lambda", runs, config.thresholds,
                            "sweep_lambda.csv")


def run_loss_comparison(config: ExperimentConfig, out: str | Path) -> list[dict]:
    """Verification vs contrastive under identical seeds; loss_comparison.csv."""
    out = Path(out)
    runs = []
    for kind in ("verification", "contrastive"):
        sub = replace(config, train=replace(config.train, loss=kind))
        run_dir = out / f"loss-{kind}"
        run_experiment(sub, run_dir)
        runs.append((kind, run_dir))
    return _comparison_rows(out, "loss", runs, config.thresholds,
                            "loss_comparison.csv")

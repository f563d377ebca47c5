"""Deterministic synthetic clip and video generation, plus pair sampling.

Clips are drifting sinusoidal gratings: each action class owns a spatial
orientation and a drift direction. Classes are generated in confusable
pairs that share the orientation and differ only in drift direction, so
identity must be read from the temporal axis. Intra-class variation comes
from per-clip phase, a smooth random background field, and pixel noise.
Everything is a pure function of the spec seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detection import GroundTruthInstance, Segment, UntrimmedVideo
from .losses import VerificationSignal
from .tensor import Tensor, load_tensor, save_tensor

DATASET_FORMAT = "siamtad-dataset-v1"
VIDEOS_FORMAT = "siamtad-videos-v1"

# grating geometry, shared by clips and planted video instances
SPATIAL_CYCLES = 2.0
DRIFT_PERIOD = 8.0


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Knobs for the generator.

    n_classes counts action classes only; label 0 is reserved for background
    and emitted only when background_clips > 0. noise_sigma, random_phase,
    and background_amplitude control intra-class variation; confusable_pairs
    makes classes (1,2), (3,4), ... share an orientation and differ only in
    drift direction.
    """

    seed: int = 0
    n_classes: int = 4
    clips_per_class: int = 20
    clip_shape: tuple[int, int, int, int] = (1, 8, 16, 16)
    noise_sigma: float = 0.25
    random_phase: bool = True
    background_amplitude: float = 0.4
    confusable_pairs: bool = True
    background_clips: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.clips_per_class < 2:
            raise ValueError("clips_per_class must be at least 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.background_amplitude < 0:
            raise ValueError("background_amplitude must be nonnegative")
        if self.background_clips < 0:
            raise ValueError("background_clips must be nonnegative")
        if len(self.clip_shape) != 4 or any(e < 1 for e in self.clip_shape):
            raise ValueError(f"clip_shape must be 4 positive extents, got {self.clip_shape}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_classes": self.n_classes,
            "clips_per_class": self.clips_per_class,
            "clip_shape": list(self.clip_shape),
            "noise_sigma": self.noise_sigma,
            "random_phase": self.random_phase,
            "background_amplitude": self.background_amplitude,
            "confusable_pairs": self.confusable_pairs,
            "background_clips": self.background_clips,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDatasetSpec":
        d = dict(d)
        d["clip_shape"] = tuple(d.get("clip_shape", (1, 8, 16, 16)))
        return cls(**d)


@dataclass
class Clip:
    tensor: Tensor
    label: int
    video_id: str
    segment: tuple[int, int]


@dataclass
class PairSample:
    clip1: Clip
    clip2: Clip
    signal: VerificationSignal


@dataclass
class SyntheticDataset:
    spec: SyntheticDatasetSpec
    clips: list[Clip] = field(default_factory=list)

    @property
    def n_model_classes(self) -> int:
        """Class-head width: the action classes plus background at index 0."""
        return self.spec.n_classes + 1

    def by_label(self) -> dict[int, list[Clip]]:
        groups: dict[int, list[Clip]] = {}
        for clip in self.clips:
            groups.setdefault(clip.label, []).append(clip)
        return groups


def class_wave(spec: SyntheticDatasetSpec, label: int) -> tuple[float, float, float]:
    """(orientation, drift direction, angular speed) for an action label."""
    if not 1 <= label <= spec.n_classes:
        raise ValueError(f"label {label} is not an action class")
    if spec.confusable_pairs:
        n_pairs = (spec.n_classes + 1) // 2
        theta = math.pi * ((label - 1) // 2) / n_pairs
        direction = 1.0 if label % 2 == 1 else -1.0
    else:
        theta = math.pi * (label - 1) / spec.n_classes
        direction = 1.0
    return theta, direction, 2.0 * math.pi / DRIFT_PERIOD


def render_grating(spec: SyntheticDatasetSpec, label: int, n_frames: int,
                   phase: float) -> np.ndarray:
    """Drifting grating volume of shape (C, n_frames, H, W), amplitude 1."""
    channels, _, height, width = spec.clip_shape
    theta, direction, omega = class_wave(spec, label)
    ys = np.arange(height) / height
    xs = np.arange(width) / width
    spatial = 2.0 * math.pi * SPATIAL_CYCLES * (
        math.cos(theta) * xs[None, :] + math.sin(theta) * ys[:, None])
    ts = direction * omega * np.arange(n_frames)
    # channel k is the same wave shifted a third of a cycle
    chan = 2.0 * math.pi / 3.0 * np.arange(channels)
    angle = (spatial[None, None, :, :] + ts[None, :, None, None]
             + chan[:, None, None, None] + phase)
    return np.sin(angle)


def _background_field(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Smooth random texture in roughly [-1, 1], static in time."""
    ys = np.arange(height) / height
    xs = np.arange(width) / width
    out = np.zeros((height, width))
    for _ in range(3):
        fy, fx = rng.integers(1, 3, size=2)
        py, px = rng.uniform(0.0, 2.0 * math.pi, size=2)
        amp = rng.normal()
        out += amp * np.sin(2.0 * math.pi * fy * ys + py)[:, None] \
                   * np.sin(2.0 * math.pi * fx * xs + px)[None, :]
    return out / 3.0


def _render_clip(spec: SyntheticDatasetSpec, rng: np.random.Generator,
                 label: int) -> np.ndarray:
    channels, length, height, width = spec.clip_shape
    # draw the phase and background unconditionally so toggling one knob
    # does not reshuffle every other clip's randomness
    phase = float(rng.uniform(0.0, 2.0 * math.pi))
    background = _background_field(rng, height, width)
    if not spec.random_phase:
        phase = 0.0
    if label == 0:
        volume = np.zeros(spec.clip_shape)
    else:
        volume = render_grating(spec, label, length, phase)
    volume = volume + spec.background_amplitude * background[None, None, :, :]
    if spec.noise_sigma > 0:
        volume = volume + rng.normal(0.0, spec.noise_sigma, size=volume.shape)
    return volume


def generate_synthetic_dataset(spec: SyntheticDatasetSpec) -> SyntheticDataset:
    """All action clips in label order, then the background clips."""
    rng = np.random.default_rng(spec.seed)
    labels = [label for label in range(1, spec.n_classes + 1)
              for _ in range(spec.clips_per_class)]
    labels += [0] * spec.background_clips
    clips = []
    for index, label in enumerate(labels):
        video_id = f"clip-{index:05d}"
        volume = _render_clip(spec, rng, label)
        clips.append(Clip(tensor=Tensor(volume, name=video_id), label=label,
                          video_id=video_id, segment=(0, spec.clip_shape[1])))
    return SyntheticDataset(spec=spec, clips=clips)


def split_dataset(dataset: SyntheticDataset,
                  holdout_per_class: int) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Deterministic split: the last holdout_per_class clips of every label
    group become the held-out set."""
    if holdout_per_class < 0:
        raise ValueError("holdout_per_class must be nonnegative")
    train, held = [], []
    for label, group in sorted(dataset.by_label().items()):
        if holdout_per_class >= len(group):
            raise ValueError(
                f"holdout {holdout_per_class} would empty label {label} "
                f"({len(group)} clips)")
        cut = len(group) - holdout_per_class
        train.extend(group[:cut])
        held.extend(group[cut:])
    return (SyntheticDataset(spec=dataset.spec, clips=train),
            SyntheticDataset(spec=dataset.spec, clips=held))


def sample_pairs(dataset: SyntheticDataset, batch: int, same_ratio: float,
                 rng: np.random.Generator) -> list[PairSample]:
    """⌈batch·same_ratio⌉ same-class pairs, the rest different-class."""
    if batch < 1:
        raise ValueError("batch must be at least 1")
    if not 0.0 <= same_ratio <= 1.0:
        raise ValueError("same_ratio must lie in [0, 1]")
    groups = dataset.by_label()
    n_same = math.ceil(batch * same_ratio)
    pair_classes = sorted(label for label, clips in groups.items() if len(clips) >= 2)
    if n_same > 0 and not pair_classes:
        raise ValueError("no class has two clips; cannot draw same-class pairs")
    if batch - n_same > 0 and len(groups) < 2:
        raise ValueError("need two distinct classes for different-class pairs")

    labels = sorted(groups)
    pairs = []
    for _ in range(n_same):
        label = pair_classes[int(rng.integers(len(pair_classes)))]
        group = groups[label]
        i, j = rng.choice(len(group), size=2, replace=False)
        pairs.append(PairSample(group[int(i)], group[int(j)], VerificationSignal.SAME))
    for _ in range(batch - n_same):
        la, lb = rng.choice(len(labels), size=2, replace=False)
        ca = groups[labels[int(la)]]
        cb = groups[labels[int(lb)]]
        pairs.append(PairSample(ca[int(rng.integers(len(ca)))],
                                cb[int(rng.integers(len(cb)))],
                                VerificationSignal.DIFFERENT))
    return pairs


def save_dataset(dataset: SyntheticDataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for clip in dataset.clips:
        save_tensor(clip.tensor, directory / clip.video_id)
        entries.append({"file": clip.video_id, "label": clip.label,
                        "video_id": clip.video_id,
                        "segment": list(clip.segment)})
    manifest = {"format": DATASET_FORMAT, "spec": dataset.spec.to_dict(),
                "clips": entries}
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(directory: str | Path) -> SyntheticDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{directory}: unknown dataset format {manifest.get('format')!r}")
    spec = SyntheticDatasetSpec.from_dict(manifest["spec"])
    clips = []
    for entry in manifest["clips"]:
        tensor = load_tensor(directory / entry["file"])
        clips.append(Clip(tensor=tensor, label=int(entry["label"]),
                          video_id=entry["video_id"],
                          segment=tuple(entry["segment"])))
    return SyntheticDataset(spec=spec, clips=clips)


def generate_untrimmed_videos(spec: SyntheticDatasetSpec, n_videos: int,
                              total_length: int, instances_per_video: int,
                              instance_lengths: tuple[int, ...],
                              seed: int) -> list[UntrimmedVideo]:
    """Background-textured videos with gratings planted at known segments.

    Each video is divided into instances_per_video equal blocks and one
    instance is placed at a random offset inside each block, so instances
    never overlap. Instance lengths are drawn from instance_lengths.
    """
    if n_videos < 1 or instances_per_video < 1:
        raise ValueError("need at least one video and one instance per video")
    if not instance_lengths or any(v < 1 for v in instance_lengths):
        raise ValueError("instance_lengths must be positive")
    block = total_length // instances_per_video
    if block < max(instance_lengths) + 2:
        raise ValueError(
            f"total_length {total_length} too short for {instances_per_video} "
            f"instances of up to {max(instance_lengths)} frames")
    channels, _, height, width = spec.clip_shape
    rng = np.random.default_rng(seed)
    videos = []
    for v in range(n_videos):
        video_id = f"video-{v:04d}"
        volume = spec.background_amplitude * _background_field(rng, height, width)
        volume = np.broadcast_to(volume, (channels, total_length, height, width)).copy()
        if spec.noise_sigma > 0:
            volume += rng.normal(0.0, spec.noise_sigma, size=volume.shape)
        instances = []
        for i in range(instances_per_video):
            length = int(instance_lengths[int(rng.integers(len(instance_lengths)))])
            offset = int(rng.integers(block - length - 1))
            start = i * block + offset
            label = int(rng.integers(1, spec.n_classes + 1))
            phase = float(rng.uniform(0.0, 2.0 * math.pi))
            if not spec.random_phase:
                phase = 0.0
            volume[:, start:start + length] += render_grating(spec, label, length, phase)
            instances.append(GroundTruthInstance(
                video_id=video_id, segment=Segment(start, start + length),
                class_id=label))
        videos.append(UntrimmedVideo(video_id=video_id,
                                     volume=Tensor(volume, name=video_id),
                                     instances=instances))
    return videos


def save_videos(videos: list[UntrimmedVideo], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for video in videos:
        save_tensor(video.volume, directory / video.video_id)
        entries.append({
            "file": video.video_id,
            "video_id": video.video_id,
            "instances": [{"start": g.segment.start, "end": g.segment.end,
                           "class_id": g.class_id} for g in video.instances],
        })
    manifest = {"format": VIDEOS_FORMAT, "videos": entries}
    (directory / "videos.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_videos(directory: str | Path) -> list[UntrimmedVideo]:
    directory = Path(directory)
    manifest = json.loads((directory / "videos.json").read_text())
    if manifest.get("format") != VIDEOS_FORMAT:
        raise ValueError(f"{directory}: unknown videos format {manifest.get('format')!r}")
    videos = []
    for entry in manifest["videos"]:
        volume = load_tensor(directory / entry["file"])
        instances = [GroundTruthInstance(video_id=entry["video_id"],
                                         segment=Segment(g["start"], g["end"]),
                                         class_id=int(g["class_id"]))
                     for g in entry["instances"]]
        videos.append(UntrimmedVideo(video_id=entry["video_id"], volume=volume,
                                     instances=instances))
    return videos

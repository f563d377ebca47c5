"""Sliding-window proposals, proposal classification, and temporal NMS.

Segments are half-open integer frame intervals [start, end); all IoU
arithmetic runs on frame counts, so there is no off-by-one ambiguity.
Detections never carry the background class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import SiameseModel, classify
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class Segment:
    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.start >= self.end:
            raise ValueError(f"segment needs 0 <= start < end, got [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class Detection:
    video_id: str
    segment: Segment
    class_id: int
    score: float

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError("detections never carry the background class")
        if not 0.0 < self.score <= 1.0:
            raise ValueError(f"score must lie in (0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruthInstance:
    video_id: str
    segment: Segment
    class_id: int

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError("ground truth never carries the background class")


@dataclass
class UntrimmedVideo:
    video_id: str
    volume: Tensor
    instances: list[GroundTruthInstance] = field(default_factory=list)

    def __post_init__(self):
        for g in self.instances:
            if g.segment.end > self.total_length:
                raise ValueError(
                    f"{self.video_id}: instance [{g.segment.start}, {g.segment.end}) "
                    f"exceeds video length {self.total_length}")

    @property
    def total_length(self) -> int:
        return self.volume.shape[1]


def generate_proposals(total_length: int, window_lengths: list[int],
                       stride_fraction: float) -> list[Segment]:
    """Windows at multiples of max(1, floor(w * stride_fraction)) per scale,
    plus the tail window clipped to end at total_length; deduplicated and
    ordered by (start, length)."""
    if not window_lengths or any(w < 1 for w in window_lengths):
        raise ValueError("window lengths must be positive")
    if not 0.0 < stride_fraction <= 1.0:
        raise ValueError("stride_fraction must lie in (0, 1]")
    if total_length < min(window_lengths):
        raise ValueError(
            f"total_length {total_length} is shorter than the smallest window "
            f"{min(window_lengths)}")
    seen = set()
    for w in window_lengths:
        if w > total_length:
            continue
        stride = max(1, int(w * stride_fraction))
        for start in range(0, total_length - w + 1, stride):
            seen.add((start, start + w))
        seen.add((total_length - w, total_length))
    return [Segment(s, e) for s, e in sorted(seen, key=lambda p: (p[0], p[1] - p[0]))]


def temporal_iou(a: Segment, b: Segment) -> float:
    inter = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    return inter / union


def resample_indices(segment: Segment, n_frames: int) -> np.ndarray:
    """Uniform nearest-frame index selection mapping a segment onto a fixed
    model input length."""
    j = np.arange(n_frames)
    return segment.start + ((j + 0.5) * segment.length / n_frames).astype(int)


def classify_proposals(model: SiameseModel, video: UntrimmedVideo,
                       proposals: list[Segment]) -> list[Detection]:
    """Score every proposal with the identification head.

    Proposals are resampled to the model's input length; a proposal whose
    argmax lands on background is dropped, otherwise its detection scores
    the argmax class with that class's softmax probability. Output sorted
    by descending score.
    """
    channels, n_frames, height, width = model.config.input_shape
    if video.volume.shape[0] != channels or video.volume.shape[2:] != (height, width):
        raise ShapeError(
            f"video volume {video.volume.shape} does not match network input "
            f"{model.config.input_shape}")
    detections = []
    for segment in proposals:
        if segment.end > video.total_length:
            raise ValueError(
                f"proposal [{segment.start}, {segment.end}) outside video "
                f"[0, {video.total_length})")
        frames = video.volume.data[:, resample_indices(segment, n_frames)]
        p = classify(model, Tensor(frames)).data
        class_id = int(np.argmax(p))
        if class_id == 0:
            continue
        detections.append(Detection(video_id=video.video_id, segment=segment,
                                    class_id=class_id, score=float(p[class_id])))
    return sort_detections(detections)


def sort_detections(detections: list[Detection]) -> list[Detection]:
    """Deterministic score ranking: score desc, then start, video id, class."""
    return sorted(detections, key=lambda d: (-d.score, d.segment.start,
                                             d.video_id, d.class_id))


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class temporal NMS: keep the best remaining detection,
    discard same-class same-video detections overlapping it beyond the
    threshold. Kept detections are returned in ranking order, unaltered."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in [0, 1]")
    kept: list[Detection] = []
    for d in sort_detections(detections):
        suppressed = any(
            k.video_id == d.video_id and k.class_id == d.class_id
            and temporal_iou(k.segment, d.segment) > iou_threshold
            for k in kept)
        if not suppressed:
            kept.append(d)
    return kept


# --- line-oriented interchange files ---

def save_detections(detections: list[Detection], path: str | Path) -> None:
    lines = [json.dumps({"video_id": d.video_id, "start": d.segment.start,
                         "end": d.segment.end, "class_id": d.class_id,
                         "score": d.score}, sort_keys=True)
             for d in detections]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_detections(path: str | Path) -> list[Detection]:
    detections = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        detections.append(Detection(video_id=d["video_id"],
                                    segment=Segment(int(d["start"]), int(d["end"])),
                                    class_id=int(d["class_id"]),
                                    score=float(d["score"])))
    return detections


def save_ground_truth(instances: list[GroundTruthInstance], path: str | Path) -> None:
    lines = [json.dumps({"video_id": g.video_id, "start": g.segment.start,
                         "end": g.segment.end, "class_id": g.class_id},
                        sort_keys=True)
             for g in instances]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_ground_truth(path: str | Path) -> list[GroundTruthInstance]:
    instances = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        g = json.loads(line)
        instances.append(GroundTruthInstance(video_id=g["video_id"],
                                             segment=Segment(int(g["start"]), int(g["end"])),
                                             class_id=int(g["class_id"])))
    return instances

import numpy as np
import pytest

from siamtad.data import SyntheticDatasetSpec, generate_untrimmed_videos
from siamtad.detection import (Detection, GroundTruthInstance, Segment,
                               UntrimmedVideo, classify_proposals,
                               generate_proposals, load_detections,
                               load_ground_truth, nms, resample_indices,
                               save_detections, save_ground_truth,
                               sort_detections, temporal_iou)
from siamtad.network import build_model, tiny_config
from siamtad.tensor import ShapeError, Tensor

from oracles import iou_1d, nms_naive


def det(video, start, end, cls, score):
    return Detection(video_id=video, segment=Segment(start, end),
                     class_id=cls, score=score)


def random_detections(rng, n, n_videos=2, n_classes=3, span=60):
    out = []
    for _ in range(n):
        start = int(rng.integers(span - 4))
        length = int(rng.integers(2, min(20, span - start) + 1))
        out.append(det(f"v{int(rng.integers(n_videos))}", start, start + length,
                       int(rng.integers(1, n_classes + 1)),
                       float(rng.uniform(0.05, 1.0))))
    return out


class TestSegments:
    def test_rejects_empty_or_negative(self):
        with pytest.raises(ValueError):
            Segment(5, 5)
        with pytest.raises(ValueError):
            Segment(-1, 4)

    def test_detection_rejects_background_and_bad_scores(self):
        with pytest.raises(ValueError):
            det("v", 0, 4, 0, 0.5)
        with pytest.raises(ValueError):
            det("v", 0, 4, 1, 0.0)
        with pytest.raises(ValueError):
            det("v", 0, 4, 1, 1.5)

    def test_video_rejects_instances_past_the_end(self):
        instance = GroundTruthInstance("v", Segment(4, 20), 1)
        with pytest.raises(ValueError, match="exceeds"):
            UntrimmedVideo("v", Tensor(np.zeros((1, 16, 4, 4))), [instance])


class TestGenerateProposals:
    def test_single_scale_with_clipped_tail(self):
        # length 100, window 16, stride 8: starts 0..80 plus the [84, 100) tail
        proposals = generate_proposals(100, [16], 0.5)
        starts = [p.start for p in proposals]
        assert starts == [0, 8, 16, 24, 32, 40, 48, 56, 64, 72, 80, 84]
        assert len(proposals) == 12
        assert proposals[-1] == Segment(84, 100)

    def test_two_scales_merge_without_duplicates(self):
        proposals = generate_proposals(100, [16, 32], 0.5)
        expected = {(s, s + 16) for s in range(0, 85, 8)} | {(84, 100)} \
            | {(s, s + 32) for s in range(0, 69, 16)} | {(68, 100)}
        assert {(p.start, p.end) for p in proposals} == expected
        assert len(proposals) == len(set(proposals))

    def test_window_equal_to_video_gives_one_proposal(self):
        assert generate_proposals(16, [16], 0.5) == [Segment(0, 16)]

    def test_output_is_sorted_by_start_then_length(self):
        proposals = generate_proposals(64, [8, 16, 32], 0.25)
        keys = [(p.start, p.length) for p in proposals]
        assert keys == sorted(keys)

    def test_every_frame_is_covered(self):
        for length, windows in [(100, [16]), (37, [5, 9]), (64, [8, 16, 32])]:
            proposals = generate_proposals(length, windows, 0.75)
            covered = set()
            for p in proposals:
                covered.update(range(p.start, p.end))
            assert covered == set(range(length))

    def test_oversized_windows_are_skipped(self):
        proposals = generate_proposals(20, [8, 200], 0.5)
        assert all(p.length == 8 for p in proposals)

    def test_rejects_video_shorter_than_every_window(self):
        with pytest.raises(ValueError, match="shorter"):
            generate_proposals(4, [8, 16], 0.5)

    def test_rejects_bad_stride_fraction(self):
        with pytest.raises(ValueError):
            generate_proposals(100, [16], 0.0)
        with pytest.raises(ValueError):
            generate_proposals(100, [16], 1.5)


class TestTemporalIou:
    def test_identical_segments(self):
        assert temporal_iou(Segment(3, 10), Segment(3, 10)) == 1.0

    def test_disjoint_segments(self):
        assert temporal_iou(Segment(0, 5), Segment(5, 9)) == 0.0

    def test_hand_computed_overlap(self):
        # [0,10) vs [5,15): intersection 5, union 15
        assert temporal_iou(Segment(0, 10), Segment(5, 15)) == pytest.approx(5 / 15)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            a = Segment(int(rng.integers(20)), int(rng.integers(21, 40)))
            b = Segment(int(rng.integers(20)), int(rng.integers(21, 40)))
            v = temporal_iou(a, b)
            assert v == temporal_iou(b, a)
            assert 0.0 <= v <= 1.0
            assert v == pytest.approx(iou_1d((a.start, a.end), (b.start, b.end)))


class TestResampleIndices:
    def test_native_length_is_identity(self):
        np.testing.assert_array_equal(resample_indices(Segment(5, 13), 8),
                                      np.arange(5, 13))

    def test_upsampling_duplicates_frames(self):
        idx = resample_indices(Segment(0, 8), 16)
        np.testing.assert_array_equal(idx, np.repeat(np.arange(8), 2))

    def test_downsampling_takes_every_other_frame(self):
        idx = resample_indices(Segment(10, 42), 16)
        np.testing.assert_array_equal(idx, 10 + 2 * np.arange(16) + 1)

    def test_indices_stay_inside_the_segment(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            start = int(rng.integers(30))
            length = int(rng.integers(1, 40))
            idx = resample_indices(Segment(start, start + length), 16)
            assert idx.min() >= start and idx.max() < start + length


@pytest.fixture(scope="module")
def setup():
    spec = SyntheticDatasetSpec(seed=2, n_classes=4, clips_per_class=2,
                                clip_shape=(1, 8, 16, 16))
    video = generate_untrimmed_videos(spec, n_videos=1, total_length=48,
                                      instances_per_video=2,
                                      instance_lengths=(8,), seed=3)[0]
    model = build_model(tiny_config(n_classes=5, seed=0))
    proposals = generate_proposals(48, [8, 16], 0.5)
    return model, video, proposals


class TestClassifyProposals:
    def test_output_contract(self, setup):
        model, video, proposals = setup
        detections = classify_proposals(model, video, proposals)
        assert len(detections) <= len(proposals)
        scores = [d.score for d in detections]
        assert scores == sorted(scores, reverse=True)
        assert all(d.class_id >= 1 and 0.0 < d.score <= 1.0 for d in detections)
        assert all(d.video_id == video.video_id for d in detections)

    def test_background_argmax_drops_the_proposal(self, setup):
        model, video, proposals = setup
        rigged = build_model(tiny_config(n_classes=5, seed=0))
        rigged.params["cls_head.weight"].data[...] = 0.0
        rigged.params["cls_head.bias"].data[...] = 0.0
        rigged.params["cls_head.bias"].data[0] = 5.0
        assert classify_proposals(rigged, video, proposals) == []

    def test_rigged_class_bias_detects_every_proposal(self, setup):
        model, video, proposals = setup
        rigged = build_model(tiny_config(n_classes=5, seed=0))
        rigged.params["cls_head.weight"].data[...] = 0.0
        rigged.params["cls_head.bias"].data[...] = 0.0
        rigged.params["cls_head.bias"].data[2] = 5.0
        detections = classify_proposals(rigged, video, proposals)
        assert len(detections) == len(proposals)
        assert all(d.class_id == 2 for d in detections)
        expected = np.exp(5.0) / (np.exp(5.0) + 4.0)
        assert all(d.score == pytest.approx(expected) for d in detections)

    def test_rejects_out_of_bounds_proposal(self, setup):
        model, video, _ = setup
        with pytest.raises(ValueError, match="outside"):
            classify_proposals(model, video, [Segment(40, 56)])

    def test_rejects_mismatched_video_shape(self, setup):
        model, _, _ = setup
        bad = UntrimmedVideo("bad", Tensor(np.zeros((1, 32, 8, 8))))
        with pytest.raises(ShapeError):
            classify_proposals(model, bad, [Segment(0, 8)])


class TestSortDetections:
    def test_orders_by_score_then_start_video_class(self):
        a = det("v0", 10, 20, 2, 0.9)
        b = det("v0", 5, 15, 1, 0.9)
        c = det("v1", 5, 15, 1, 0.9)
        d = det("v0", 0, 8, 3, 0.95)
        assert sort_detections([a, b, c, d]) == [d, b, c, a]


class TestNms:
    def test_single_detection_survives(self):
        only = [det("v", 0, 10, 1, 0.7)]
        assert nms(only, 0.3) == only

    def test_same_class_overlap_suppresses_the_lower_score(self):
        # IoU 0.8 > 0.3: only the higher score survives
        high = det("v", 0, 10, 1, 0.9)
        low = det("v", 1, 10, 1, 0.6)
        assert temporal_iou(high.segment, low.segment) == pytest.approx(0.9)
        assert nms([low, high], 0.3) == [high]

    def test_different_classes_never_suppress(self):
        a = det("v", 0, 10, 1, 0.9)
        b = det("v", 0, 10, 2, 0.6)
        assert nms([a, b], 0.3) == [a, b]

    def test_different_videos_never_suppress(self):
        a = det("v0", 0, 10, 1, 0.9)
        b = det("v1", 0, 10, 1, 0.6)
        assert nms([a, b], 0.3) == [a, b]

    def test_iou_equal_to_threshold_is_kept(self):
        # suppression needs IoU strictly above the threshold
        a = det("v", 0, 10, 1, 0.9)
        b = det("v", 5, 15, 1, 0.6)
        assert nms([a, b], 5 / 15) == [a, b]

    def test_rejects_bad_threshold(self):
        with pytest.raises(ValueError):
            nms([], -0.1)
        with pytest.raises(ValueError):
            nms([], 1.1)

    def test_idempotent_on_random_sets(self):
        rng = np.random.default_rng(13)
        for _ in range(25):
            detections = random_detections(rng, int(rng.integers(1, 25)))
            once = nms(detections, 0.3)
            assert nms(once, 0.3) == once

    def test_kept_detections_are_the_original_objects(self):
        rng = np.random.default_rng(14)
        detections = random_detections(rng, 20)
        kept = nms(detections, 0.4)
        assert len(kept) <= len(detections)
        assert all(any(k is d for d in detections) for k in kept)

    def test_no_kept_pair_overlaps_beyond_the_threshold(self):
        rng = np.random.default_rng(15)
        for threshold in (0.0, 0.3, 0.7):
            kept = nms(random_detections(rng, 30), threshold)
            for i, a in enumerate(kept):
                for b in kept[i + 1:]:
                    if a.video_id == b.video_id and a.class_id == b.class_id:
                        assert temporal_iou(a.segment, b.segment) <= threshold

    def test_matches_the_quadratic_oracle(self):
        rng = np.random.default_rng(16)
        for _ in range(30):
            detections = random_detections(rng, int(rng.integers(1, 30)))
            threshold = float(rng.choice([0.1, 0.3, 0.5, 0.7]))
            expected = nms_naive([(d.video_id, d.segment.start, d.segment.end,
                                   d.class_id, d.score) for d in detections],
                                 threshold)
            got = [(d.video_id, d.segment.start, d.segment.end, d.class_id,
                    d.score) for d in nms(detections, threshold)]
            assert got == expected


class TestDetectionFiles:
    def test_detections_roundtrip(self, tmp_path):
        rng = np.random.default_rng(17)
        detections = sort_detections(random_detections(rng, 12))
        save_detections(detections, tmp_path / "d.jsonl")
        assert load_detections(tmp_path / "d.jsonl") == detections

    def test_ground_truth_roundtrip(self, tmp_path):
        instances = [GroundTruthInstance("v0", Segment(4, 16), 2),
                     GroundTruthInstance("v1", Segment(0, 8), 1)]
        save_ground_truth(instances, tmp_path / "gt.jsonl")
        assert load_ground_truth(tmp_path / "gt.jsonl") == instances

    def test_one_json_record_per_line(self, tmp_path):
        detections = [det("v", 0, 10, 1, 0.5), det("v", 10, 20, 2, 0.25)]
        save_detections(detections, tmp_path / "d.jsonl")
        lines = (tmp_path / "d.jsonl").read_text().splitlines()
        assert len(lines) == 2
        assert all(line.startswith("{") for line in lines)

import json
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import utils.evaluation_engine as evaluation_engine
from data.synth_corpus import Corpus, Slide
from utils.detection_engine import AnchorConfig, build_detector
from utils.domain_types import Detection, GroundTruthBox, ScannerDomain
from utils.error_handler import ArtifactFormatError, TileError, UnknownSlideError
from utils.evaluation_engine import (DetectionCounts, EvalConfig, EvalReport, evaluate, ground_truth_of,
                                     infer_corpus, infer_slide, match_detections, nms, read_predictions,
                                     scanners_of, tile_offsets, tile_slide, write_predictions)


def iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area = lambda r: (r[2] - r[0]) * (r[3] - r[1])
    return inter / (area(a) + area(b) - inter)


def brute_force_nms(detections, threshold):
    kept = []
    for d in sorted(detections, key=lambda d: -d.score):
        if all(iou(d.to_xyxy(), k.to_xyxy()) <= threshold for k in kept):
            kept.append(d)
    return kept


def spot_slide(size=128, spot=(60, 60), scanner=0, slide_id="s0"):
    image = np.zeros((size, size, 3), dtype=np.uint8)
    image[spot[1], spot[0]] = 255
    return Slide(image=image, slide_id=slide_id, scanner=ScannerDomain(scanner))


def fake_detect_batch(model, pixels):
    """One box per tile, centered on its brightest pixel"""
    scores = np.zeros((len(pixels), 1), dtype=np.float32)
    boxes = np.zeros((len(pixels), 1, 4), dtype=np.float32)
    for i, tile in enumerate(pixels):
        row, col = np.unravel_index(np.argmax(tile[..., 0]), tile.shape[:2])
        if tile[row, col, 0] > 0.5:
            scores[i, 0] = 0.9
            boxes[i, 0] = (col + 0.5 - 25, row + 0.5 - 25, col + 0.5 + 25, row + 0.5 + 25)
    return scores, boxes


class StubModel(SimpleNamespace):
    def eval(self):
        return self


class TestTiling:
    def test_single_tile(self):
        assert tile_offsets(128, 128, 64) == [0]

    def test_grid(self):
        slide = spot_slide(size=256)
        tiles = tile_slide(slide, 128, 64)
        assert len(tiles) == 9
        assert [origin for _, origin in tiles[:3]] == [(0, 0), (64, 0), (128, 0)]
        patch, (x, y) = tiles[4]
        assert (patch.x_offset, patch.y_offset) == (x, y) == (64, 64)

    def test_last_tile_shifted_inward(self):
        assert tile_offsets(300, 128, 64) == [0, 64, 128, 172]

    @given(st.integers(32, 600), st.integers(8, 128), st.data())
    def test_covers_every_pixel(self, length, patch, data):
        if patch > length:
            with pytest.raises(TileError):
                tile_offsets(length, patch, 0)
            return
        overlap = data.draw(st.integers(0, patch - 1))
        offsets = tile_offsets(length, patch, overlap)
        covered = np.zeros(length, dtype=bool)
        for o in offsets:
            assert 0 <= o <= length - patch
            covered[o:o + patch] = True
        assert covered.all()
        assert all(b - a >= 1 for a, b in zip(offsets, offsets[1:]))

    def test_bad_overlap(self):
        with pytest.raises(TileError):
            tile_offsets(256, 128, 128)
        with pytest.raises(ValueError):
            EvalConfig(patch_size=128, tile_overlap=128)


class TestNms:
    def test_single_detection(self):
        d = Detection(10.0, 10.0, 0.8)
        assert nms([d], 0.5) == [d]
        assert nms([], 0.5) == []

    def test_identical_boxes(self):
        low, high = Detection(10.0, 10.0, 0.6), Detection(10.0, 10.0, 0.9)
        assert nms([low, high], 0.5) == [high]

    def test_distant_boxes_survive(self):
        dets = [Detection(10.0, 10.0, 0.6), Detection(200.0, 10.0, 0.9)]
        assert set(nms(dets, 0.5)) == set(dets)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 51))
            xy = rng.uniform(0, 200, size=(n, 2))
            scores = rng.uniform(0, 1, size=n)
            dets = [Detection(float(x), float(y), float(s)) for (x, y), s in zip(xy, scores)]
            threshold = float(rng.uniform(0.1, 0.9))
            assert set(nms(dets, threshold)) == set(brute_force_nms(dets, threshold))


class TestMetrics:
    def test_reported_operating_point(self):
        gts = [GroundTruthBox(100.0 * (i % 60) + 50, 100.0 * (i // 60) + 50) for i in range(3689)]
        n_slides = 40
        ground_truth = {f"slide{k}": [] for k in range(n_slides)}
        predictions = {f"slide{k}": [] for k in range(n_slides)}
        for i, gt in enumerate(gts):
            slide = f"slide{i % n_slides}"
            ground_truth[slide].append(gt)
            if i < 2600:
                predictions[slide].append(Detection(gt.x, gt.y, 0.9))
            if i < 600:
                predictions[slide].append(Detection(gt.x + 50, gt.y + 50, 0.8))

        report = evaluate(predictions, ground_truth, EvalConfig())
        assert (report.tp, report.fp, report.fn) == (2600, 600, 1089)
        assert report.precision == pytest.approx(0.8125, abs=1e-4)
        assert report.recall == pytest.approx(0.7048, abs=1e-4)
        assert report.f1 == pytest.approx(0.7548, abs=1e-4)

    def test_counts_formula(self):
        counts = DetectionCounts(2600, 600, 1089)
        assert counts.f1 == pytest.approx(2 * 2600 / (2 * 2600 + 600 + 1089))
        assert EvalReport.from_counts(2600, 600, 1089).f1 == counts.f1

    def test_empty(self):
        report = evaluate({}, {}, EvalConfig())
        assert (report.tp, report.fp, report.fn) == (0, 0, 0)
        assert report.f1 == 0.0

    def test_perfect_predictions(self):
        ground_truth = {"a": [GroundTruthBox(30.0, 40.0), GroundTruthBox(200.0, 90.0)], "b": []}
        predictions = {k: [Detection(b.x, b.y, 1.0) for b in v] for k, v in ground_truth.items()}
        report = evaluate(predictions, ground_truth, EvalConfig())
        assert report.f1 == 1.0

    def test_missing_slide_counts_as_missed(self):
        report = evaluate({}, {"a": [GroundTruthBox(30.0, 40.0)]}, EvalConfig())
        assert report.fn == 1 and report.recall == 0.0

    def test_score_threshold(self):
        ground_truth = {"a": [GroundTruthBox(100.0, 100.0)]}
        report = evaluate({"a": [Detection(100.0, 100.0, 0.69)]}, ground_truth, EvalConfig(score_threshold=0.7))
        assert (report.tp, report.fp, report.fn) == (0, 0, 1)
        report = evaluate({"a": [Detection(100.0, 100.0, 0.7)]}, ground_truth, EvalConfig(score_threshold=0.7))
        assert report.tp == 1

    def test_radius(self):
        gt = [GroundTruthBox(100.0, 100.0)]
        assert match_detections([Detection(125.0, 100.0, 0.9)], gt, 25.0).tp == 1
        assert match_detections([Detection(125.5, 100.0, 0.9)], gt, 25.0).tp == 0

    def test_higher_score_claims_first(self):
        gt = [GroundTruthBox(100.0, 100.0), GroundTruthBox(140.0, 100.0)]
        dets = [Detection(95.0, 100.0, 0.9), Detection(118.0, 100.0, 0.95)]
        counts = match_detections(dets, gt, 25.0)
        assert (counts.tp, counts.fp, counts.fn) == (1, 1, 1)

    def test_unknown_slide(self):
        with pytest.raises(UnknownSlideError):
            evaluate({"ghost": []}, {"a": []}, EvalConfig())

    def test_per_scanner_breakdown(self):
        ground_truth = {"a": [GroundTruthBox(50.0, 50.0)], "b": [GroundTruthBox(50.0, 50.0)]}
        predictions = {"a": [Detection(50.0, 50.0, 0.9)], "b": []}
        report = evaluate(predictions, ground_truth, EvalConfig(), scanners={"a": 0, "b": 4})
        assert report.per_scanner[0].tp == 1
        assert report.per_scanner[4].fn == 1
        assert set(report.to_dict()['per_scanner']) == {"0", "4"}

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), max_size=15),
           st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20), st.floats(0, 1)), max_size=15))
    def test_counts_are_consistent(self, gt_cells, det_cells):
        gts = [GroundTruthBox(10.0 * x, 10.0 * y) for x, y in gt_cells]
        dets = [Detection(10.0 * x, 10.0 * y, s) for x, y, s in det_cells]
        counts = match_detections(dets, gts, 25.0)
        assert counts.tp + counts.fn == len(gts)
        assert counts.tp + counts.fp == len(dets)
        assert 0.0 <= counts.f1 <= 1.0


class TestInference:
    def test_untrained_model_detects_nothing(self):
        model = build_detector(AnchorConfig(), 64, width=8, fpn_channels=16, seed=0)
        model.eval()
        assert infer_slide(model, spot_slide(), EvalConfig(patch_size=64, tile_overlap=32)) == []

    def test_overlapping_tiles_give_one_detection(self, monkeypatch):
        monkeypatch.setattr(evaluation_engine, "detect_batch", fake_detect_batch)
        detections = infer_slide(StubModel(patch_size=64), spot_slide(), EvalConfig(patch_size=64, tile_overlap=32))
        assert len(detections) == 1
        assert (detections[0].x, detections[0].y) == (60.5, 60.5)

    def test_corpus_scanner_filter(self, monkeypatch):
        monkeypatch.setattr(evaluation_engine, "detect_batch", fake_detect_batch)
        corpus = Corpus(slides=[spot_slide(scanner=d, slide_id=f"s{d}") for d in range(5)])
        predictions = infer_corpus(StubModel(patch_size=64), corpus, EvalConfig(patch_size=64, tile_overlap=32),
                                   scanners=[4])
        assert list(predictions) == ["s4"]

    def test_corpus_helpers(self, tiny_corpus):
        ground_truth = ground_truth_of(tiny_corpus)
        scanners = scanners_of(tiny_corpus)
        assert set(ground_truth) == set(scanners) == {s.slide_id for s in tiny_corpus.slides}
        assert all(len(v) == 4 for v in ground_truth.values())
        predictions = {k: [Detection(b.x, b.y, 1.0) for b in v] for k, v in ground_truth.items()}
        report = evaluate(predictions, ground_truth, EvalConfig(), scanners)
        assert report.f1 == 1.0
        assert sorted(report.per_scanner) == [0, 1, 2, 3, 4]


class TestPredictionFiles:
    def test_write_and_read(self, tmp_path):
        predictions = {"b": [Detection(1.5, 2.0, 0.75)], "a": []}
        path = write_predictions(predictions, tmp_path / "predictions.json")
        assert read_predictions(path) == predictions
        assert list(json.loads(path.read_text())) == ["a", "b"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArtifactFormatError):
            read_predictions(tmp_path / "absent.json")

    @pytest.mark.parametrize("content", [
        "not json",
        "[1, 2]",
        '{"a": [{"x": 1.0, "y": 2.0}]}',
        '{"a": [{"x": 1.0, "y": 2.0, "score": 3.0}]}',
    ])
    def test_malformed(self, tmp_path, content):
        path = tmp_path / "predictions.json"
        path.write_text(content)
        with pytest.raises(ArtifactFormatError) as info:
            read_predictions(path)
        assert info.value.path == str(path)

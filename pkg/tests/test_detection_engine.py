import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch.autograd import gradcheck

from utils.detection_engine import (BG, DEFAULT_BASE_SIZES, FG, IGNORE, AnchorConfig, DetectorModel, FocalLossConfig,
                                    anchor_sides, assign_targets, build_all_anchors, build_anchors, build_detector,
                                    decode_boxes, detect_batch, detector_forward, detector_loss, encode_boxes,
                                    focal_loss, loss_from_outputs)
from utils.domain_types import GroundTruthBox, Patch
from utils.error_handler import InvalidLevel, ShapeError


def small_detector(patch_size=32, seed=0):
    return build_detector(AnchorConfig(), patch_size, width=8, fpn_channels=16, seed=seed)


class TestAnchors:
    def test_fixed_base_sides(self):
        for level in range(3):
            np.testing.assert_allclose(anchor_sides(AnchorConfig(), level), [50.0, 62.996, 79.370], atol=1e-3)

    def test_standard_base_sides(self):
        cfg = AnchorConfig(base_sizes=DEFAULT_BASE_SIZES, strides=(8, 16, 32, 64, 128))
        np.testing.assert_allclose(anchor_sides(cfg, 0), [32.0, 40.317, 50.797], atol=1e-3)

    def test_invalid_level(self):
        with pytest.raises(InvalidLevel):
            anchor_sides(AnchorConfig(), 3)
        with pytest.raises(InvalidLevel):
            anchor_sides(AnchorConfig(), -1)

    @given(st.integers(1, 20))
    def test_count_per_level(self, n):
        anchors = build_anchors(AnchorConfig(), 1, 16, n)
        assert anchors.shape == (n * n * 3, 4)

    @pytest.mark.parametrize("size", [32, 64, 128])
    def test_count_over_pyramid(self, size):
        expected = sum((size // s) ** 2 for s in (8, 16, 32)) * 3
        assert build_all_anchors(AnchorConfig(), size).shape == (expected, 4)

    def test_first_cell_centers(self):
        anchors = build_anchors(AnchorConfig(), 0, 8, 2)
        centers = (anchors[:, :2] + anchors[:, 2:]) / 2
        np.testing.assert_allclose(centers[:3], [[4.0, 4.0]] * 3)
        np.testing.assert_allclose(centers[3], [12.0, 4.0])
        np.testing.assert_allclose(anchors[0, 2] - anchors[0, 0], 50.0)

    def test_mismatched_levels(self):
        with pytest.raises(ValueError):
            AnchorConfig(base_sizes=(50.0, 50.0), strides=(8, 16, 32))


class TestFocalLoss:
    def test_reduces_to_cross_entropy(self):
        assert focal_loss(FocalLossConfig(gamma=0.0, alpha=1.0), 0.5) == pytest.approx(0.693147, abs=1e-6)

    def test_easy_example_is_down_weighted(self):
        assert focal_loss(FocalLossConfig(gamma=2.0, alpha=0.25), 0.9) == pytest.approx(2.634e-4, abs=1e-7)

    def test_certain_prediction(self):
        assert focal_loss(FocalLossConfig(), 1.0) == 0.0

    def test_zero_probability_is_finite(self):
        assert math.isfinite(focal_loss(FocalLossConfig(), 0.0))

    @given(st.floats(0.0, 5.0), st.floats(0.0, 1.0), st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
    def test_decreasing_in_probability(self, gamma, alpha, p, q):
        cfg = FocalLossConfig(gamma=gamma, alpha=alpha)
        lo, hi = min(p, q), max(p, q)
        assert focal_loss(cfg, lo) >= focal_loss(cfg, hi) - 1e-12

    def test_plain_cross_entropy_over_grid(self):
        cfg = FocalLossConfig(gamma=0.0, alpha=1.0)
        for p in np.linspace(0.01, 1.0, 100):
            assert focal_loss(cfg, float(p)) == pytest.approx(-math.log(p), abs=1e-9)

    def test_tensor_in_tensor_out(self):
        out = focal_loss(FocalLossConfig(), torch.tensor([0.5, 0.9]))
        assert isinstance(out, torch.Tensor) and out.shape == (2,)
        assert out[0] > out[1]


class TestAssignment:
    def two_anchors(self, shift):
        # The second anchor sits exactly on the box so it takes the forced match
        return np.array([[0.0, 0.0, 50.0, 50.0], [shift, 0.0, shift + 50.0, 50.0]])

    def test_no_ground_truth(self):
        assigned = assign_targets(self.two_anchors(10.0), np.zeros((0, 2)))
        assert torch.all(assigned.labels == BG)
        assert assigned.num_foreground == 0

    def test_identical_anchor(self):
        assigned = assign_targets(np.array([[0.0, 0.0, 50.0, 50.0]]), [GroundTruthBox(25.0, 25.0)])
        assert assigned.labels.tolist() == [FG]
        assert torch.allclose(assigned.reg_targets, torch.zeros(1, 4, dtype=torch.float64))

    def test_ten_pixel_shift_is_foreground(self):
        assigned = assign_targets(self.two_anchors(10.0), np.array([[35.0, 25.0]]))
        assert assigned.labels.tolist() == [FG, FG]
        assert assigned.matched_gt.tolist() == [0, 0]

    def test_ambiguous_overlap_is_ignored(self):
        assigned = assign_targets(self.two_anchors(17.0), np.array([[42.0, 25.0]]))
        assert assigned.labels.tolist() == [IGNORE, FG]
        assert assigned.matched_gt.tolist() == [-1, 0]

    def test_low_overlap_is_background(self):
        assigned = assign_targets(self.two_anchors(30.0), np.array([[55.0, 25.0]]))
        assert assigned.labels.tolist() == [BG, FG]
        assert torch.all(assigned.reg_targets[0] == 0)

    def test_every_box_claims_an_anchor(self):
        anchors = build_all_anchors(AnchorConfig(), 64)
        centers = np.array([[3.0, 3.0], [60.0, 20.0]])
        assigned = assign_targets(anchors, centers)
        assert set(assigned.matched_gt[assigned.labels == FG].tolist()) == {0, 1}


class TestBoxCoding:
    def test_zero_deltas_decode_to_anchors(self):
        anchors = torch.as_tensor(build_all_anchors(AnchorConfig(), 32))
        np.testing.assert_allclose(decode_boxes(anchors, torch.zeros_like(anchors)).numpy(), anchors.numpy(),
                                   atol=1e-9)

    def test_decode_inverts_encode(self):
        anchors = torch.tensor([[0.0, 0.0, 50.0, 50.0], [10.0, 10.0, 73.0, 73.0]], dtype=torch.float64)
        boxes = torch.tensor([[5.0, -3.0, 55.0, 47.0], [20.0, 12.0, 70.0, 62.0]], dtype=torch.float64)
        np.testing.assert_allclose(decode_boxes(anchors, encode_boxes(anchors, boxes)).numpy(), boxes.numpy(),
                                   atol=1e-9)


class TestModel:
    def test_output_shapes(self):
        logits, deltas = small_detector()(torch.zeros(2, 3, 32, 32))
        assert logits.shape == (2, 63)
        assert deltas.shape == (2, 63, 4)

    def test_prior_probability(self):
        m = small_detector()
        with torch.no_grad():
            m.cls_logits.weight.zero_()
        scores, boxes = detect_batch(m, np.zeros((1, 32, 32, 3), dtype=np.float32))
        np.testing.assert_allclose(scores, 0.01, rtol=1e-5)
        assert boxes.shape == (1, 63, 4)

    def test_single_patch_output(self):
        m = small_detector()
        out = detector_forward(m, Patch(pixels=np.zeros((32, 32, 3), dtype=np.float32)))
        assert out.scores.shape == (63,)
        assert out.anchors.shape == (63, 4)
        assert np.all((out.scores > 0) & (out.scores < 1))

    def test_size_checks(self):
        with pytest.raises(ShapeError):
            DetectorModel(patch_size=48)
        m = small_detector()
        with pytest.raises(ShapeError):
            m(torch.zeros(1, 3, 48, 48))
        with pytest.raises(ShapeError):
            detect_batch(m, np.zeros((1, 64, 64, 3), dtype=np.float32))
        with pytest.raises(ShapeError):
            detector_forward(m, Patch(pixels=np.zeros((64, 64, 3), dtype=np.float32)))

    def test_seeded_construction(self):
        a, b = small_detector(seed=4), small_detector(seed=4)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)


class TestDetectorLoss:
    def test_single_anchor_by_hand(self):
        anchors = np.array([[0.0, 0.0, 50.0, 50.0]])
        logits = torch.tensor([[1.3]], dtype=torch.float64)
        deltas = torch.zeros(1, 1, 4, dtype=torch.float64)
        # dx = 2.5 / 50 against a zero prediction
        loss = loss_from_outputs(logits, deltas, anchors, [np.array([[27.5, 25.0]])], FocalLossConfig())
        p = 1.0 / (1.0 + math.exp(-1.3))
        assert loss.num_foreground == 1
        assert loss.classification.item() == pytest.approx(focal_loss(FocalLossConfig(), p), abs=1e-9)
        assert loss.regression.item() == pytest.approx(0.5 * 0.05 ** 2 / 0.1, abs=1e-9)

    def test_perfect_predictions(self):
        anchors = np.array([[0.0, 0.0, 50.0, 50.0], [200.0, 200.0, 250.0, 250.0]])
        logits = torch.tensor([[30.0, -30.0]], dtype=torch.float64)
        deltas = torch.zeros(1, 2, 4, dtype=torch.float64)
        loss = loss_from_outputs(logits, deltas, anchors, [np.array([[25.0, 25.0]])], FocalLossConfig())
        assert loss.total.item() < 1e-9

    def test_no_ground_truth_and_low_scores(self):
        anchors = build_all_anchors(AnchorConfig(), 32)
        logits = torch.full((1, len(anchors)), -30.0, dtype=torch.float64)
        deltas = torch.randn(1, len(anchors), 4, dtype=torch.float64)
        loss = loss_from_outputs(logits, deltas, anchors, [np.zeros((0, 2))], FocalLossConfig())
        assert loss.total.item() < 1e-9

    def test_background_only_batch(self):
        loss = detector_loss(small_detector(), np.zeros((2, 32, 32, 3), dtype=np.float32),
                             [np.zeros((0, 2)), np.zeros((0, 2))], FocalLossConfig())
        assert loss.num_foreground == 0
        assert loss.regression.item() == 0.0
        assert math.isfinite(loss.total.item())

    def test_foreground_batch(self):
        loss = detector_loss(small_detector(), np.zeros((1, 32, 32, 3), dtype=np.float32),
                             [np.array([[16.0, 16.0]])], FocalLossConfig())
        assert loss.num_foreground >= 1
        loss.total.backward()

    def test_ground_truth_per_image(self):
        with pytest.raises(ShapeError):
            detector_loss(small_detector(), np.zeros((2, 32, 32, 3), dtype=np.float32), [np.zeros((0, 2))],
                          FocalLossConfig())

    def test_gradient_matches_finite_differences(self):
        anchors = build_all_anchors(AnchorConfig(), 32)
        gen = torch.Generator().manual_seed(0)
        logits = torch.randn(1, len(anchors), dtype=torch.float64, generator=gen).requires_grad_(True)
        deltas = (0.5 * torch.randn(1, len(anchors), 4, dtype=torch.float64, generator=gen)).requires_grad_(True)
        centers = [np.array([[16.0, 16.0]])]
        f = lambda l, d: loss_from_outputs(l, d, anchors, centers, FocalLossConfig()).total
        assert gradcheck(f, (logits, deltas), eps=1e-6, atol=1e-4, rtol=1e-3)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.0, 1.0), st.floats(0.01, 0.99))
    def test_focal_gradient(self, gamma, p):
        cfg = FocalLossConfig(gamma=gamma)
        t = torch.tensor([p], dtype=torch.float64, requires_grad=True)
        assert gradcheck(lambda x: focal_loss(cfg, x), (t,), eps=1e-7, atol=1e-4, rtol=1e-3)

import numpy as np
import pytest

from msfuse import nn
from msfuse.boxes import iou_matrix
from msfuse.detector import (
    ARCHITECTURES,
    AnchorConfig,
    DetectorModel,
    FrozenTargets,
    LossWeights,
    ProposalConfig,
    SampleConfig,
    TrainConfig,
    TrainSample,
    detector_forward,
    finalize_detections,
    generate_anchors,
    joint_loss,
    loss_step,
    make_train_sample,
    prepare_targets,
    roi_pool,
    roi_pool_backward,
    sample_anchors,
    seg_target,
    seg_target_roi,
    train_detector,
)
from msfuse.evaluation import GtEntry
from msfuse.boxes import BBox
from msfuse.imaging import Image, ImagePair
from msfuse.synth import SceneConfig, generate_pair

TINY_ANCHORS = AnchorConfig(stride=8, scales=(16.0, 24.0), ratios=(1.0, 2.0))


def make_pair(size=32, seed=0, condition="day"):
    rng = np.random.default_rng(seed)
    color = Image(rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8))
    thermal = Image(rng.integers(0, 256, size=(size, size, 1), dtype=np.uint8))
    return ImagePair(color=color, thermal=thermal, condition=condition)


class TestAnchors:
    def test_count_and_layout(self):
        cfg = AnchorConfig()
        anchors = generate_anchors(8, 8, cfg)
        assert anchors.shape == (8 * 8 * cfg.per_cell, 4)

    def test_centers_on_stride_grid(self):
        cfg = AnchorConfig(stride=8, scales=(32.0,), ratios=(1.0,))
        anchors = generate_anchors(2, 3, cfg)
        cx = anchors[:, 0] + anchors[:, 2] / 2
        cy = anchors[:, 1] + anchors[:, 3] / 2
        assert np.allclose(cx, [4, 12, 20, 4, 12, 20])
        assert np.allclose(cy, [4, 4, 4, 12, 12, 12])

    def test_shapes_follow_scale_and_ratio(self):
        cfg = AnchorConfig(stride=8, scales=(32.0, 48.0), ratios=(1.0, 2.0))
        anchors = generate_anchors(1, 1, cfg)
        # cell-major, then scale x ratio
        assert np.allclose(anchors[:, 2:], [[32, 32], [16, 32], [48, 48], [24, 48]])

    def test_rejects_empty_grid(self):
        with pytest.raises(ValueError):
            generate_anchors(0, 4, AnchorConfig())


class TestSampleAnchors:
    def test_no_gt_all_negative(self):
        rng = np.random.default_rng(0)
        anchors = generate_anchors(4, 4, TINY_ANCHORS)
        cfg = SampleConfig(anchors_per_image=10)
        out = sample_anchors(anchors, np.zeros((0, 4)), np.zeros((0, 4)), cfg, rng)
        assert len(out.indices) == 10
        assert (out.labels == 0).all()

    def test_positive_fraction_respected(self):
        rng = np.random.default_rng(1)
        anchors = generate_anchors(4, 4, TINY_ANCHORS)
        gt = np.array([[4.0, 4.0, 16.0, 16.0]])
        cfg = SampleConfig(anchors_per_image=12, pos_fraction=1.0 / 6.0)
        out = sample_anchors(anchors, gt, np.zeros((0, 4)), cfg, rng)
        assert out.labels.sum() <= 2
        assert len(out.indices) <= 12

    def test_best_anchor_per_gt_forced_positive(self):
        rng = np.random.default_rng(2)
        anchors = generate_anchors(4, 4, TINY_ANCHORS)
        # a gt overlapping nothing at >= 0.5 IoU still gets one positive
        gt = np.array([[1.0, 1.0, 6.0, 6.0]])
        out = sample_anchors(anchors, gt, np.zeros((0, 4)), SampleConfig(), rng)
        assert out.labels.sum() >= 1

    def test_ignore_regions_never_sampled(self):
        rng = np.random.default_rng(3)
        anchors = generate_anchors(4, 4, TINY_ANCHORS)
        ignore = np.array([[0.0, 0.0, 32.0, 32.0]])
        cfg = SampleConfig(anchors_per_image=200)
        out = sample_anchors(anchors, np.zeros((0, 4)), ignore, cfg, rng)
        # brute force: compute which anchors are allowed
        from msfuse.boxes import ioa_matrix

        banned = ioa_matrix(anchors, ignore).max(axis=1) > cfg.ignore_ioa
        assert not banned[out.indices].any()

    def test_regression_targets_decode_back_to_gt(self):
        from msfuse.boxes import decode_array

        rng = np.random.default_rng(4)
        anchors = generate_anchors(4, 4, TINY_ANCHORS)
        gt = np.array([[4.0, 2.0, 16.0, 24.0]])
        out = sample_anchors(anchors, gt, np.zeros((0, 4)), SampleConfig(), rng)
        pos = out.labels == 1
        decoded = decode_array(anchors[out.indices[pos]], out.reg_targets[pos])
        assert np.allclose(decoded, np.tile(gt, (pos.sum(), 1)), atol=1e-9)


class TestRoiPool:
    def test_constant_map(self):
        fmap = np.full((4, 4, 2), 3.5)
        pooled, _ = roi_pool(fmap, [[0.0, 0.0, 32.0, 32.0]], stride=8, out=2)
        assert (pooled == 3.5).all()

    def test_selects_window_max(self):
        fmap = np.zeros((4, 4, 1))
        fmap[1, 2, 0] = 9.0
        pooled, _ = roi_pool(fmap, [[0.0, 0.0, 32.0, 32.0]], stride=8, out=1)
        assert pooled[0, 0, 0, 0] == 9.0

    def test_tiny_roi_uses_nearest_cell(self):
        fmap = np.arange(16.0).reshape(4, 4, 1)
        pooled, _ = roi_pool(fmap, [[17.0, 17.0, 2.0, 2.0]], stride=8, out=2)
        # roi spans feature coords [2.125, 2.375]: every bin reads cell (2, 2)
        assert (pooled == fmap[2, 2, 0]).all()

    def test_outside_roi_rejected(self):
        fmap = np.zeros((4, 4, 1))
        with pytest.raises(ValueError):
            roi_pool(fmap, [[100.0, 0.0, 8.0, 8.0]], stride=8)

    def test_backward_scatter_matches_argmax(self):
        rng = np.random.default_rng(0)
        fmap = rng.standard_normal((6, 6, 3))
        rois = np.array([[0.0, 0.0, 48.0, 48.0], [8.0, 8.0, 24.0, 32.0]])
        pooled, argmax = roi_pool(fmap, rois, stride=8, out=2)
        dpooled = rng.standard_normal(pooled.shape)
        dfmap = roi_pool_backward(fmap.shape, argmax, dpooled)
        # finite-difference check through the pooling
        h = 1e-6
        for _ in range(25):
            i, j, c = rng.integers(0, 6), rng.integers(0, 6), rng.integers(0, 3)
            fmap[i, j, c] += h
            lp = (roi_pool(fmap, rois, stride=8, out=2)[0] * dpooled).sum()
            fmap[i, j, c] -= 2 * h
            lm = (roi_pool(fmap, rois, stride=8, out=2)[0] * dpooled).sum()
            fmap[i, j, c] += h
            assert dfmap[i, j, c] == pytest.approx((lp - lm) / (2 * h), abs=1e-5)


class TestSegTargets:
    def test_rasterization_against_cell_centers(self):
        gt = np.array([[8.0, 8.0, 16.0, 8.0]])
        mask = seg_target(gt, 4, 4, stride=8)
        want = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                cx, cy = (j + 0.5) * 8, (i + 0.5) * 8
                if 8 <= cx < 24 and 8 <= cy < 16:
                    want[i, j] = 1.0
        assert np.array_equal(mask, want)

    def test_empty_gt(self):
        assert (seg_target(np.zeros((0, 4)), 3, 3, 8) == 0).all()

    def test_roi_variant_full_cover(self):
        gt = np.array([[0.0, 0.0, 100.0, 100.0]])
        masks = seg_target_roi(gt, [[10.0, 10.0, 20.0, 20.0]], out=3)
        assert (masks == 1.0).all()

    def test_roi_variant_half_cover(self):
        gt = np.array([[0.0, 0.0, 10.0, 20.0]])
        masks = seg_target_roi(gt, [[0.0, 0.0, 20.0, 20.0]], out=4)
        # left half of the roi's bin centers fall inside the gt
        assert np.array_equal(masks[0], np.tile([1.0, 1.0, 0.0, 0.0], (4, 1)))


class TestMakeTrainSample:
    def test_partition(self):
        gts = [
            GtEntry(bbox=BBox(0, 0, 25, 55)),  # trainable
            GtEntry(bbox=BBox(0, 0, 20, 40)),  # too short -> ignore
            GtEntry(bbox=BBox(0, 0, 25, 55), occlusion="partial"),  # trainable
            GtEntry(bbox=BBox(0, 0, 25, 55), occlusion="heavy"),  # ignore
            GtEntry(bbox=BBox(0, 0, 25, 55), label="people"),  # ignore
        ]
        sample = make_train_sample(make_pair(64), gts, SampleConfig())
        assert len(sample.gt_boxes) == 2
        assert len(sample.ignore_boxes) == 3

    def test_occlusion_exclusion_flag(self):
        gts = [GtEntry(bbox=BBox(0, 0, 25, 55), occlusion="partial")]
        cfg = SampleConfig(include_occluded=False)
        sample = make_train_sample(make_pair(64), gts, cfg)
        assert len(sample.gt_boxes) == 0
        assert len(sample.ignore_boxes) == 1


class TestJointLoss:
    def test_weighted_sum(self):
        parts = {"rpn": 2.0, "det_color": 3.0, "seg_thermal": 5.0}
        w = LossWeights(rpn=1.0, det_color=0.5, seg_thermal=2.0)
        total, breakdown = joint_loss(parts, w)
        assert total == pytest.approx(2.0 + 1.5 + 10.0)
        assert breakdown["det_color"] == pytest.approx(1.5)

    def test_linearity_in_weights(self):
        parts = {"rpn": 1.0, "det_fused": 2.0, "seg_fused": 3.0, "seg_roi_fused": 4.0}
        t1, _ = joint_loss(parts, LossWeights())
        t2, _ = joint_loss(
            parts,
            LossWeights(rpn=2.0, det_color=2.0, seg_color=2.0, seg_roi_color=2.0),
        )
        assert t2 == pytest.approx(2 * t1)


def tiny_train_sample(seed=0):
    pair = make_pair(32, seed=seed)
    gt = np.array([[6.0, 4.0, 12.0, 24.0]])
    return TrainSample(pair=pair, gt_boxes=gt, ignore_boxes=np.zeros((0, 4)))


def tiny_cfg(arch):
    return TrainConfig(
        arch=arch,
        anchors=TINY_ANCHORS,
        sampling=SampleConfig(anchors_per_image=12),
        rois_per_image=6,
        train_top_k=8,
        epochs=1,
    )


class TestLossStep:
    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_runs_and_is_finite(self, arch):
        rng = np.random.default_rng(0)
        cfg = tiny_cfg(arch)
        model = DetectorModel(arch, rng, cfg.anchors)
        sample = tiny_train_sample()
        targets = prepare_targets(model, sample, cfg, rng)
        nn.zero_grads(model.params())
        total, breakdown = loss_step(model, sample, targets, cfg)
        assert np.isfinite(total)
        assert total == pytest.approx(sum(breakdown.values()))
        grads = np.concatenate([p.grad.reshape(-1) for p in model.params()])
        assert np.isfinite(grads).all()
        assert np.abs(grads).max() > 0

    @pytest.mark.parametrize("arch", ["score2", "halfway", "late"])
    def test_gradients_match_finite_differences(self, arch):
        rng = np.random.default_rng(1)
        cfg = tiny_cfg(arch)
        model = DetectorModel(arch, rng, cfg.anchors)
        sample = tiny_train_sample(seed=1)
        targets = prepare_targets(model, sample, cfg, rng)

        def loss():
            return loss_step(model, sample, targets, cfg, compute_grads=False)[0]

        nn.zero_grads(model.params())
        loss_step(model, sample, targets, cfg)
        err, name, _ = nn.grad_check(
            loss, model.params(), max_entries_per_param=3, rng=rng
        )
        assert err < 1e-4, f"{arch}: {name} gradient off by {err}"

    def test_loss_scales_with_weights(self):
        rng = np.random.default_rng(2)
        cfg = tiny_cfg("score2")
        model = DetectorModel("score2", rng, cfg.anchors)
        sample = tiny_train_sample()
        targets = prepare_targets(model, sample, cfg, rng)
        base, _ = loss_step(model, sample, targets, cfg, compute_grads=False)
        doubled = TrainConfig(
            arch="score2", anchors=cfg.anchors, sampling=cfg.sampling,
            rois_per_image=cfg.rois_per_image, train_top_k=cfg.train_top_k,
            weights=LossWeights(rpn=2, det_color=2, det_thermal=2, seg_color=2,
                                seg_thermal=2, seg_roi_color=2, seg_roi_thermal=2),
        )
        total, _ = loss_step(model, sample, targets, doubled, compute_grads=False)
        assert total == pytest.approx(2 * base)


class TestTraining:
    def test_deterministic(self):
        dataset = [tiny_train_sample(seed=s) for s in range(2)]
        cfg = tiny_cfg("score2")
        m1, log1 = train_detector(dataset, cfg)
        m2, log2 = train_detector(dataset, cfg)
        assert log1 == log2
        for p1, p2 in zip(m1.params(), m2.params()):
            assert np.array_equal(p1.value, p2.value)

    def test_lr_decay_logged(self):
        dataset = [tiny_train_sample()]
        cfg = tiny_cfg("score2")
        cfg.epochs = 2
        cfg.lr_decay_epoch = 1
        _, log = train_detector(dataset, cfg)
        assert log[0]["lr"] == pytest.approx(cfg.lr)
        assert log[1]["lr"] == pytest.approx(cfg.lr * 0.1)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_detector([], tiny_cfg("score2"))

    def test_checkpoint_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        model = DetectorModel("score2", rng, TINY_ANCHORS)
        path = tmp_path / "det.ckpt"
        model.save(path)
        loaded = DetectorModel.load(path)
        assert loaded.arch == "score2"
        assert loaded.anchor_cfg.scales == TINY_ANCHORS.scales
        for p1, p2 in zip(model.params(), loaded.params()):
            assert np.array_equal(p1.value, p2.value)


class TestInference:
    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_output_contract(self, arch):
        rng = np.random.default_rng(0)
        model = DetectorModel(arch, rng, TINY_ANCHORS)
        result = detector_forward(model, make_pair(32), ProposalConfig(top_k=20))
        if arch == "score2":
            assert set(result.outputs) == {"color", "thermal"}
        else:
            assert set(result.outputs) == {"fused"}
        for out in result.outputs.values():
            assert out.scores.shape == (len(result.proposals), 2)
            assert out.offsets.shape == (len(result.proposals), 4)
            assert np.allclose(out.scores.sum(axis=1), 1.0)

    def test_score2_head_routing(self):
        # pinning one head's classifier pins only that stream's scores
        rng = np.random.default_rng(1)
        model = DetectorModel("score2", rng, TINY_ANCHORS)
        pair = make_pair(32)
        head = model.heads["color"]
        head.cls.w.value[...] = 0.0
        head.cls.b.value[:] = [0.0, 1.0]
        result = detector_forward(model, pair, ProposalConfig(top_k=10))
        want = np.exp([0.0, 1.0]) / np.exp([0.0, 1.0]).sum()
        assert np.allclose(result.outputs["color"].scores, want)
        assert not np.allclose(result.outputs["thermal"].scores, want)
        # both heads share the proposal set from the joint RPN
        assert result.outputs["color"].scores.shape == result.outputs["thermal"].scores.shape

    def test_image_size_must_match_stride(self):
        rng = np.random.default_rng(2)
        model = DetectorModel("score2", rng, TINY_ANCHORS)
        with pytest.raises(ValueError):
            detector_forward(model, make_pair(30))

    def test_finalize_thresholds_and_clips(self):
        proposals = np.array([[0.0, 0.0, 10.0, 10.0], [5.0, 5.0, 10.0, 10.0]])
        scores = np.array([[0.2, 0.8], [0.99, 0.01]])
        offsets = np.zeros((2, 4))
        boxes, out_scores = finalize_detections(
            proposals, scores, offsets, 32, 32, ProposalConfig(score_threshold=0.05)
        )
        assert len(boxes) == 1  # second proposal fails the threshold
        assert out_scores[0] == pytest.approx(0.8)

    def test_finalize_empty(self):
        boxes, scores = finalize_detections(
            np.zeros((0, 4)), np.zeros((0, 2)), np.zeros((0, 4)), 32, 32
        )
        assert len(boxes) == 0
        assert len(scores) == 0

    def test_finalize_applies_nms(self):
        b = [0.0, 0.0, 10.0, 10.0]
        proposals = np.array([b, b, [20.0, 20.0, 10.0, 10.0]])
        scores = np.array([[0.1, 0.9], [0.3, 0.7], [0.2, 0.8]])
        boxes, out_scores = finalize_detections(
            proposals, scores, np.zeros((3, 4)), 32, 32, ProposalConfig()
        )
        assert len(boxes) == 2
        assert out_scores.tolist() == [0.9, 0.8]


class TestPrepareTargets:
    def test_rois_avoid_ignore_regions(self):
        rng = np.random.default_rng(0)
        cfg = tiny_cfg("score2")
        model = DetectorModel("score2", rng, cfg.anchors)
        pair = make_pair(32)
        sample = TrainSample(
            pair=pair,
            gt_boxes=np.zeros((0, 4)),
            ignore_boxes=np.array([[0.0, 0.0, 16.0, 32.0]]),
        )
        targets = prepare_targets(model, sample, cfg, rng)
        if len(targets.rois):
            from msfuse.boxes import ioa_matrix

            assert ioa_matrix(targets.rois, sample.ignore_boxes).max() <= 0.5

    def test_gt_boxes_become_positive_rois(self):
        rng = np.random.default_rng(1)
        cfg = tiny_cfg("score2")
        model = DetectorModel("score2", rng, cfg.anchors)
        sample = tiny_train_sample()
        targets = prepare_targets(model, sample, cfg, rng)
        # the gt itself is appended to the roi pool, so a positive must exist
        assert (targets.roi_labels == 1).any()
        pos = targets.roi_labels == 1
        assert iou_matrix(targets.rois[pos], sample.gt_boxes).max(axis=1).min() >= 0.5

"""Tests for proposal integration, prediction matching, and the metric suite."""

from types import SimpleNamespace

import numpy as np
import pytest

from lidarpose.anchors import NUM_ANCHOR_POSES, AnchorBox3D
from lidarpose.evalkit import (
    FinalPose,
    MetricReport,
    cde,
    compute_metrics,
    format_prediction,
    format_table_row,
    head_segment_length,
    integrate_proposals,
    match_predictions,
    mpjpe_2d,
    pose_bbox_2d,
    prediction_header,
    write_predictions,
    write_report,
    xye,
)
from lidarpose.assignment import iou_2d
from lidarpose.geometry import (
    HEAD,
    L_SHOULDER,
    NUM_JOINTS,
    R_SHOULDER,
    Skeleton2D,
    Skeleton3D,
)
from lidarpose.model import Detection

K1 = NUM_ANCHOR_POSES + 1


def make_detection(box_2d, score, pose_2d, pose_3d=None, cls=1):
    """Fabricate a stage-2 detection whose best class carries `score`."""
    probs = np.zeros(K1)
    probs[cls] = score
    probs[0] = 1.0 - score
    if pose_3d is None:
        pose_3d = np.zeros((NUM_JOINTS, 3))
    poses_2d = np.tile(np.asarray(pose_2d, dtype=np.float64), (NUM_ANCHOR_POSES, 1, 1))
    poses_3d = np.tile(np.asarray(pose_3d, dtype=np.float64), (NUM_ANCHOR_POSES, 1, 1))
    return Detection(
        box_2d=np.asarray(box_2d, dtype=np.float64),
        box_3d=None,
        scores=np.log(np.maximum(probs, 1e-9)),
        probs=probs,
        deltas=np.zeros((K1, NUM_JOINTS, 5)),
        poses_2d=poses_2d,
        poses_3d=poses_3d,
    )


def grid_pose(offset=(0.0, 0.0), spread=20.0):
    """A 13-joint 2D pose spread over a box, shifted by offset."""
    t = np.linspace(0.0, 1.0, NUM_JOINTS)
    joints = np.stack([spread * t, spread * t[::-1]], axis=1)
    return joints + np.asarray(offset)


def make_gt(joints2d, box_3d=None, visibility=None):
    if box_3d is None:
        box_3d = AnchorBox3D(center=(0.0, 0.0, 10.0), size=(1.0, 2.0, 1.0))
    return SimpleNamespace(
        skel_2d=Skeleton2D(joints2d, visibility),
        skel_3d=Skeleton3D(np.zeros((NUM_JOINTS, 3)) + [0.0, 0.0, 10.0]),
        box_3d=box_3d,
    )


class TestFinalPose:
    def test_confidence_range_enforced(self):
        joints = grid_pose()
        with pytest.raises(ValueError):
            FinalPose(
                pose_2d=Skeleton2D(joints),
                pose_3d=Skeleton3D(np.zeros((NUM_JOINTS, 3))),
                confidence=1.5,
            )

    def test_report_validation(self):
        with pytest.raises(ValueError):
            MetricReport(
                mpjpe_2d=-1.0, pckh=0.5, cde=0.0, xye=0.0,
                n_gt=0, n_pred=0, n_matched=0, n_skipped_head=0,
            )
        with pytest.raises(ValueError):
            MetricReport(
                mpjpe_2d=0.0, pckh=1.2, cde=0.0, xye=0.0,
                n_gt=0, n_pred=0, n_matched=0, n_skipped_head=0,
            )


class TestIntegration:
    def test_empty_input(self):
        assert integrate_proposals([]) == []

    def test_single_detection_passes_through(self):
        pose = grid_pose()
        det = make_detection([0, 0, 20, 20], 0.8, pose)
        finals = integrate_proposals([det])
        assert len(finals) == 1
        assert finals[0].confidence == pytest.approx(det.best_score)
        assert np.allclose(finals[0].pose_2d.joints, pose)

    def test_two_identical_detections_average_to_same_pose(self):
        pose = grid_pose()
        dets = [
            make_detection([0, 0, 20, 20], 0.6, pose),
            make_detection([0, 0, 20, 20], 0.3, pose),
        ]
        finals = integrate_proposals(dets)
        assert len(finals) == 1
        # Any weighted average of identical poses is that pose.
        assert np.allclose(finals[0].pose_2d.joints, pose)
        assert finals[0].confidence == pytest.approx(0.6 + 0.3)

    def test_three_overlapping_one_disjoint_hand_weighted_mean(self):
        base = grid_pose()
        scores = [0.5, 0.3, 0.2]
        shifts = [0.0, 1.0, 2.0]
        dets = [
            make_detection([0, 0, 20, 20], s, base + off)
            for s, off in zip(scores, shifts)
        ]
        far_pose = grid_pose(offset=(200.0, 0.0))
        dets.append(make_detection([200, 0, 220, 20], 0.4, far_pose))
        finals = integrate_proposals(dets)
        assert len(finals) == 2
        # Hand-computed: weighted mean shift = (0*.5 + 1*.3 + 2*.2) / 1.0.
        expected = base + (0.5 * 0.0 + 0.3 * 1.0 + 0.2 * 2.0)
        grouped = finals[0] if finals[0].confidence > finals[1].confidence else finals[1]
        single = finals[1] if grouped is finals[0] else finals[0]
        assert np.allclose(grouped.pose_2d.joints, expected)
        assert grouped.confidence == pytest.approx(1.0)
        assert np.allclose(single.pose_2d.joints, far_pose)

    def test_weighted_mean_applies_to_3d_too(self):
        p3a = np.full((NUM_JOINTS, 3), 1.0)
        p3b = np.full((NUM_JOINTS, 3), 3.0)
        dets = [
            make_detection([0, 0, 10, 10], 0.3, grid_pose(), p3a),
            make_detection([0, 0, 10, 10], 0.1, grid_pose(), p3b),
        ]
        finals = integrate_proposals(dets)
        assert np.allclose(finals[0].pose_3d.joints, (0.3 * 1.0 + 0.1 * 3.0) / 0.4)

    def test_score_floor_drops_weak_groups(self):
        det = make_detection([0, 0, 10, 10], 0.05, grid_pose())
        assert integrate_proposals([det]) == []
        assert len(integrate_proposals([det], score_floor=0.01)) == 1

    def test_membership_compares_against_group_leader(self):
        # B overlaps leader A; C overlaps B but not A, so C starts a group.
        a = make_detection([0.0, 0.0, 10.0, 10.0], 0.9, grid_pose())
        b = make_detection([2.0, 0.0, 12.0, 10.0], 0.8, grid_pose())
        c = make_detection([5.0, 0.0, 15.0, 10.0], 0.7, grid_pose(offset=(50, 0)))
        assert iou_2d(a.box_2d, b.box_2d) >= 0.5
        assert iou_2d(b.box_2d, c.box_2d) >= 0.5
        assert iou_2d(a.box_2d, c.box_2d) < 0.5
        finals = integrate_proposals([a, b, c])
        assert len(finals) == 2
        confs = sorted(f.confidence for f in finals)
        assert confs[0] == pytest.approx(0.7)
        assert confs[1] == pytest.approx(min(0.9 + 0.8, 1.0))

    def test_confidence_capped_at_one(self):
        dets = [make_detection([0, 0, 10, 10], 0.8, grid_pose()) for _ in range(3)]
        finals = integrate_proposals(dets)
        assert finals[0].confidence == 1.0

    def test_partition_property_random(self):
        # With no floor, every input lands in exactly one group: group masses
        # sum to the total score mass, and group count <= input count.
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(1, 12))
            dets = []
            for _ in range(n):
                x = float(rng.uniform(0, 60))
                y = float(rng.uniform(0, 30))
                w = float(rng.uniform(5, 20))
                h = float(rng.uniform(5, 20))
                s = float(rng.uniform(0.05, 0.3))
                dets.append(make_detection([x, y, x + w, y + h], s, grid_pose()))
            finals = integrate_proposals(dets, score_floor=0.0)
            assert len(finals) <= n
            total = sum(d.best_score for d in dets)
            assert sum(f.confidence for f in finals) == pytest.approx(total)


class TestMatching:
    def test_perfect_overlap_matches(self):
        pose = grid_pose()
        pred = FinalPose(Skeleton2D(pose), Skeleton3D(np.zeros((NUM_JOINTS, 3))), 0.9)
        pairs, up, ug = match_predictions([pred], [Skeleton2D(pose)])
        assert pairs == [(0, 0)]
        assert up == [] and ug == []

    def test_low_iou_leaves_both_unmatched(self):
        pred = FinalPose(
            Skeleton2D(grid_pose(offset=(500, 0))),
            Skeleton3D(np.zeros((NUM_JOINTS, 3))),
            0.9,
        )
        pairs, up, ug = match_predictions([pred], [Skeleton2D(grid_pose())])
        assert pairs == []
        assert up == [0] and ug == [0]

    def test_higher_confidence_takes_contested_gt(self):
        gt = Skeleton2D(grid_pose())
        weak = FinalPose(Skeleton2D(grid_pose((1, 0))), Skeleton3D(np.zeros((NUM_JOINTS, 3))), 0.2)
        strong = FinalPose(Skeleton2D(grid_pose((2, 0))), Skeleton3D(np.zeros((NUM_JOINTS, 3))), 0.9)
        pairs, up, _ = match_predictions([weak, strong], [gt])
        assert pairs == [(1, 0)]
        assert up == [0]

    def test_each_gt_matched_once(self):
        gts = [Skeleton2D(grid_pose()), Skeleton2D(grid_pose((100, 0)))]
        preds = [
            FinalPose(Skeleton2D(grid_pose((d, 0))), Skeleton3D(np.zeros((NUM_JOINTS, 3))), c)
            for d, c in [(0, 0.9), (1, 0.8), (100, 0.7)]
        ]
        pairs, _, ug = match_predictions(preds, gts)
        assert len(pairs) == 2
        assert {j for _, j in pairs} == {0, 1}
        assert ug == []


class TestMpjpe:
    def test_perfect_zero(self):
        pose = grid_pose()
        assert mpjpe_2d(pose, pose) == 0.0

    def test_constant_shift_is_its_magnitude(self):
        pose = grid_pose()
        assert mpjpe_2d(pose + [5.0, 0.0], pose) == pytest.approx(5.0)

    def test_visibility_masks_joints(self):
        pose = grid_pose()
        pred = pose.copy()
        pred[0] += [100.0, 0.0]
        vis = np.ones(NUM_JOINTS, dtype=bool)
        vis[0] = False
        assert mpjpe_2d(pred, pose, vis) == 0.0

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pred = rng.uniform(0, 100, (NUM_JOINTS, 2))
            gt = rng.uniform(0, 100, (NUM_JOINTS, 2))
            total = 0.0
            for j in range(NUM_JOINTS):
                dx = pred[j, 0] - gt[j, 0]
                dy = pred[j, 1] - gt[j, 1]
                total += np.sqrt(dx * dx + dy * dy)
            assert mpjpe_2d(pred, gt) == pytest.approx(total / NUM_JOINTS, rel=1e-12)


class TestCdeXye:
    BOX = AnchorBox3D(center=(1.0, -0.5, 12.0), size=(1.0, 1.8, 1.0))

    def pose_centered(self, center):
        # Joints symmetric around `center`, so the pose AABB center is exact.
        rng = np.random.default_rng(2)
        half = rng.uniform(-0.5, 0.5, (NUM_JOINTS // 2, 3))
        sym = np.concatenate([half, -half, np.zeros((1, 3))])
        return sym + np.asarray(center)

    def test_pose_filling_box_zero(self):
        pose = self.pose_centered(self.BOX.center)
        assert cde(pose, self.BOX) == pytest.approx(0.0, abs=1e-12)
        assert xye(pose, self.BOX) == pytest.approx(0.0, abs=1e-12)

    def test_z_translation_is_cde(self):
        pose = self.pose_centered(self.BOX.center) + [0.0, 0.0, 2.0]
        assert cde(pose, self.BOX) == pytest.approx(2.0)
        assert xye(pose, self.BOX) == pytest.approx(0.0, abs=1e-12)

    def test_x_translation_is_xye(self):
        pose = self.pose_centered(self.BOX.center) + [3.0, 0.0, 0.0]
        assert xye(pose, self.BOX) == pytest.approx(3.0)
        assert cde(pose, self.BOX) == pytest.approx(0.0, abs=1e-12)

    def test_depth_shift_excluded_from_xye(self):
        pose = self.pose_centered(self.BOX.center) + [0.0, 0.0, 4.0]
        assert xye(pose, self.BOX) == pytest.approx(0.0, abs=1e-12)

    def test_joint_permutation_invariance(self):
        rng = np.random.default_rng(3)
        pose = rng.uniform(-2, 2, (NUM_JOINTS, 3)) + [0, 0, 10]
        perm = rng.permutation(NUM_JOINTS)
        assert cde(pose, self.BOX) == cde(pose[perm], self.BOX)
        assert xye(pose, self.BOX) == xye(pose[perm], self.BOX)

    def test_min_max_joint_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            pose = rng.uniform(-3, 3, (NUM_JOINTS, 3)) + [0, 0, 15]
            lo = [min(pose[j, a] for j in range(NUM_JOINTS)) for a in range(3)]
            hi = [max(pose[j, a] for j in range(NUM_JOINTS)) for a in range(3)]
            c = [(l + h) / 2.0 for l, h in zip(lo, hi)]
            assert cde(pose, self.BOX) == pytest.approx(abs(c[2] - 12.0), rel=1e-12)
            expect = np.hypot(c[0] - 1.0, c[1] + 0.5)
            assert xye(pose, self.BOX) == pytest.approx(expect, rel=1e-12)

    def test_pythagorean_decomposition(self):
        # cde and xye are exactly the depth and orthogonal components of the
        # full center error.
        rng = np.random.default_rng(5)
        for _ in range(100):
            pose = rng.uniform(-3, 3, (NUM_JOINTS, 3)) + [0, 0, 15]
            center = (pose.min(axis=0) + pose.max(axis=0)) / 2.0
            full_sq = float(np.sum((center - np.asarray(self.BOX.center)) ** 2))
            d = cde(pose, self.BOX)
            o = xye(pose, self.BOX)
            assert abs(d * d + o * o - full_sq) < 1e-12


class TestComputeMetrics:
    def perfect_scene(self):
        joints2d = grid_pose(offset=(30, 20))
        joints3d = TestCdeXye().pose_centered((0.0, 0.0, 10.0))
        gt = make_gt(joints2d)
        pred = FinalPose(Skeleton2D(joints2d.copy()), Skeleton3D(joints3d), 0.9)
        return [pred], [gt]

    def test_perfect_predictions(self):
        report = compute_metrics([self.perfect_scene()])
        assert report.mpjpe_2d == 0.0
        assert report.pckh == 1.0
        assert report.cde == pytest.approx(0.0, abs=1e-12)
        assert report.xye == pytest.approx(0.0, abs=1e-12)
        assert report.n_matched == report.n_gt == report.n_pred == 1

    def test_all_predictions_beyond_head_segment_zero_pckh(self):
        preds, gts = self.perfect_scene()
        seg = head_segment_length(gts[0].skel_2d.joints)
        shifted = FinalPose(
            Skeleton2D(preds[0].pose_2d.joints + [seg, 0.0]),
            preds[0].pose_3d,
            0.9,
        )
        report = compute_metrics([([shifted], gts)])
        assert report.n_matched == 1
        assert report.pckh == 0.0

    def test_half_correct_counting(self):
        # Two gts: one matched perfectly, one matched with every joint off by
        # more than alpha * head segment -> exactly half the joints correct.
        preds, gts = self.perfect_scene()
        far_joints = grid_pose(offset=(200, 0))
        gt2 = make_gt(far_joints)
        seg = head_segment_length(far_joints)
        bad_pred = FinalPose(
            Skeleton2D(far_joints + [0.6 * seg, 0.0]),
            Skeleton3D(np.zeros((NUM_JOINTS, 3)) + [0, 0, 10]),
            0.8,
        )
        report = compute_metrics([(preds + [bad_pred], gts + [gt2])])
        assert report.n_matched == 2
        assert report.pckh == pytest.approx(0.5)

    def test_zero_head_segment_skipped_with_counter(self):
        joints = grid_pose(offset=(30, 20))
        joints[HEAD] = (joints[L_SHOULDER] + joints[R_SHOULDER]) / 2.0
        gt = make_gt(joints)
        pred = FinalPose(
            Skeleton2D(joints.copy()),
            Skeleton3D(TestCdeXye().pose_centered((0, 0, 10))),
            0.9,
        )
        report = compute_metrics([([pred], [gt])])
        assert report.n_skipped_head == 1
        assert report.pckh == 0.0
        assert report.mpjpe_2d == 0.0

    def test_unmatched_gt_counts_against_pckh_not_mpjpe(self):
        _, gts = self.perfect_scene()
        report = compute_metrics([([], gts)])
        assert report.n_matched == 0
        assert report.pckh == 0.0
        assert report.mpjpe_2d == 0.0
        assert report.n_gt == 1 and report.n_pred == 0

    def test_matches_brute_force_oracle_on_random_scenes(self):
        rng = np.random.default_rng(6)
        scenes = []
        for _ in range(100):
            n_gt = int(rng.integers(0, 4))
            n_pred = int(rng.integers(0, 5))
            gts = []
            for _ in range(n_gt):
                j2 = rng.uniform(0, 80, (NUM_JOINTS, 2))
                box = AnchorBox3D(
                    center=tuple(rng.uniform([-3, -1, 6], [3, 1, 20])),
                    size=(1.0, 1.8, 1.0),
                )
                gts.append(make_gt(j2, box))
            preds = []
            for _ in range(n_pred):
                if gts and rng.random() < 0.7:
                    base = gts[int(rng.integers(0, n_gt))].skel_2d.joints
                    j2 = base + rng.normal(0, 3, (NUM_JOINTS, 2))
                else:
                    j2 = rng.uniform(0, 80, (NUM_JOINTS, 2))
                j3 = rng.uniform([-3, -1, 6], [3, 1, 20], (NUM_JOINTS, 3))
                preds.append(FinalPose(Skeleton2D(j2), Skeleton3D(j3), float(rng.uniform(0.1, 1))))
            scenes.append((preds, gts))

        report = compute_metrics(scenes)

        # Independent accumulation with plain loops.
        esum, en = 0.0, 0
        pc, pt = 0, 0
        csum, xsum, nm = 0.0, 0.0, 0
        for preds, gts in scenes:
            pairs, _, ugt = match_predictions(preds, [g.skel_2d for g in gts])
            nm += len(pairs)
            for i, j in pairs:
                pj = preds[i].pose_2d.joints
                gj = gts[j].skel_2d.joints
                dists = [float(np.hypot(*(pj[q] - gj[q]))) for q in range(NUM_JOINTS)]
                esum += sum(dists)
                en += NUM_JOINTS
                seg = head_segment_length(gj)
                pc += sum(1 for d in dists if d < 0.5 * seg)
                pt += NUM_JOINTS
                csum += cde(preds[i].pose_3d.joints, gts[j].box_3d)
                xsum += xye(preds[i].pose_3d.joints, gts[j].box_3d)
            for j in ugt:
                pt += NUM_JOINTS
        assert report.mpjpe_2d == pytest.approx(esum / en, rel=1e-12)
        assert report.pckh == pytest.approx(pc / pt, rel=1e-12)
        assert report.cde == pytest.approx(csum / nm, rel=1e-12)
        assert report.xye == pytest.approx(xsum / nm, rel=1e-12)
        assert report.n_matched == nm


class TestFileFormats:
    def test_prediction_row_schema(self):
        header = prediction_header()
        cols = header.split(",")
        assert cols[0] == "scene_id"
        assert len(cols) == 2 + 2 * NUM_JOINTS + 3 * NUM_JOINTS

    def test_format_prediction_six_decimals(self):
        pose = FinalPose(
            Skeleton2D(grid_pose()),
            Skeleton3D(np.zeros((NUM_JOINTS, 3)) + [0, 0, 10]),
            0.5,
        )
        row = format_prediction(3, pose)
        fields = row.split(",")
        assert fields[0] == "3"
        assert fields[1] == "0.500000"
        assert all("." in f and len(f.split(".")[1]) == 6 for f in fields[1:])

    def test_write_predictions_golden_stability(self, tmp_path):
        pose = FinalPose(
            Skeleton2D(grid_pose()),
            Skeleton3D(np.zeros((NUM_JOINTS, 3)) + [0, 0, 10]),
            0.25,
        )
        p1 = tmp_path / "a.csv"
        p2 = tmp_path / "b.csv"
        write_predictions(p1, [(0, [pose])])
        write_predictions(p2, [(0, [pose])])
        assert p1.read_bytes() == p2.read_bytes()

    def test_write_report_fields(self, tmp_path):
        report = MetricReport(
            mpjpe_2d=1.5, pckh=0.5, cde=0.25, xye=0.125,
            n_gt=4, n_pred=3, n_matched=2, n_skipped_head=0,
        )
        path = tmp_path / "report.csv"
        write_report(path, report)
        text = path.read_text()
        lines = text.strip().split("\n")
        assert lines[0] == "metric,value,count"
        values = {l.split(",")[0]: l.split(",")[1] for l in lines[1:]}
        assert values["mpjpe_2d"] == "1.500000"
        assert values["pckh"] == "0.500000"
        assert values["cde"] == "0.250000"
        assert values["xye"] == "0.125000"

    def test_table_row_contains_all_metrics(self):
        report = MetricReport(
            mpjpe_2d=45.65, pckh=0.5, cde=0.95, xye=0.39,
            n_gt=10, n_pred=8, n_matched=7, n_skipped_head=0,
        )
        row = format_table_row("rgb+lidar/concat/align", report)
        for token in ("45.65", "0.95", "0.39", "rgb+lidar/concat/align"):
            assert token in row

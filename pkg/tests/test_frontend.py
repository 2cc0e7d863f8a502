import numpy as np
import pytest

from kfvio.dataset import BundleObservations
from kfvio.frontend import (Frontend, convex_hull, convex_hull_overlap,
                            polygon_area)


def bundle(j, lm_uv, cam=0, n_cams=1):
    obs = [np.zeros((0, 3)) for _ in range(n_cams)]
    obs[cam] = np.array([(lm, u, v) for lm, u, v in lm_uv], dtype=float) \
        if lm_uv else np.zeros((0, 3))
    return BundleObservations(j, [0.1 * j] * n_cams, obs)


def square(j, lms, offset=(0.0, 0.0)):
    corners = [(0, 0), (100, 0), (100, 100), (0, 100), (50, 50)]
    return bundle(j, [(lm, c[0] + offset[0], c[1] + offset[1])
                      for lm, c in zip(lms, corners)])


class TestConvexHullOverlap:
    def test_identical_point_sets(self):
        pts = np.array([(0, 0), (4, 0), (4, 4), (0, 4), (2, 2)], dtype=float)
        assert convex_hull_overlap(pts, pts) == pytest.approx(1.0)

    def test_disjoint(self):
        a = np.array([(0, 0), (1, 0), (0, 1)], dtype=float)
        b = a + np.array([10.0, 10.0])
        assert convex_hull_overlap(a, b) == 0.0

    def test_half_overlapping_unit_squares(self):
        a = np.array([(0, 0), (1, 0), (1, 1), (0, 1)], dtype=float)
        b = a + np.array([0.5, 0.0])
        assert convex_hull_overlap(a, b) == pytest.approx(0.5, abs=1e-9)

    def test_degenerate_inputs(self):
        line = np.array([(0, 0), (1, 1), (2, 2)], dtype=float)
        sq = np.array([(0, 0), (1, 0), (1, 1), (0, 1)], dtype=float)
        assert convex_hull_overlap(line, sq) == 0.0
        assert convex_hull_overlap(sq, line) == 0.0
        assert convex_hull_overlap(sq[:2], sq) == 0.0

    def test_hull_and_area(self):
        pts = np.array([(0, 0), (2, 0), (2, 2), (0, 2), (1, 1), (0.5, 0.5)])
        hull = convex_hull(pts)
        assert hull.shape[0] == 4
        assert polygon_area(hull) == pytest.approx(4.0)


class TestAssociation:
    def test_consecutive_bundles_one_track(self):
        fe = Frontend()
        fe.process(bundle(0, [(7, 10, 10)]))
        res = fe.process(bundle(1, [(7, 12, 11)]))
        tids = {tid for tid, _, _, _ in res.observations}
        assert len(tids) == 1
        track = fe.tracks[tids.pop()]
        assert len(track.observations) == 2

    def test_keyframe_bridging(self):
        # landmark skips the last bundle but exists in a retained keyframe
        fe = Frontend(overlap_threshold=2.0)  # every bundle becomes a keyframe
        fe.process(bundle(0, [(7, 10, 10), (8, 40, 40), (9, 80, 15)]))
        fe.process(bundle(1, [(8, 41, 41), (9, 81, 16)]))
        res = fe.process(bundle(2, [(7, 13, 12), (8, 42, 42)]))
        tid7 = [tid for tid, _, u, _ in res.observations if u == 13.0][0]
        assert fe.tracks[tid7].observations[0][0] == 0  # continued from bundle 0

    def test_unreachable_landmark_gets_new_track(self):
        fe = Frontend(n_match_keyframes=2, overlap_threshold=-1.0,
                      ratio_threshold=-1.0)  # never make keyframes after first
        fe.process(bundle(0, [(7, 10, 10)]))            # keyframe (first)
        fe.process(bundle(1, [(1, 5, 5)]))
        fe.process(bundle(2, [(2, 5, 5)]))
        # landmark 7 absent from last bundle; bundle 0 is still a retained
        # keyframe so it can bridge, kill it by pushing two new keyframes
        fe.keyframes = [1, 2]
        res = fe.process(bundle(3, [(7, 11, 11)]))
        tid = res.observations[0][0]
        assert fe.tracks[tid].observations[0][0] == 3   # fresh track

    def test_track_never_resurrects(self):
        fe = Frontend(overlap_threshold=2.0)  # every bundle becomes a keyframe
        fe.process(bundle(0, [(7, 10, 10)]))
        fe.process(bundle(1, [(1, 5, 5)]))
        dead = None
        # after bundle 2, the two most recent keyframes are 1 and 2: the
        # track of landmark 7 (bundle 0 only) is unreachable and must die
        res = fe.process(bundle(2, [(1, 6, 6)]))
        for tr in res.disappeared:
            if tr.landmark_id == 7:
                dead = tr
        assert dead is not None and dead.status == "disappeared"
        res3 = fe.process(bundle(3, [(7, 20, 20)]))
        tid = res3.observations[0][0]
        assert tid != dead.track_id

    def test_sibling_camera_joins_same_track(self):
        fe = Frontend()
        obs = [np.array([(7.0, 10.0, 10.0)]), np.array([(7.0, 30.0, 12.0)])]
        res = fe.process(BundleObservations(0, [0.0, 0.0], obs))
        tids = {tid for tid, _, _, _ in res.observations}
        assert len(tids) == 1
        assert len(fe.tracks[tids.pop()].observations) == 2


class TestKeyframeDecision:
    def test_first_bundle_is_keyframe(self):
        fe = Frontend()
        assert fe.process(square(0, [1, 2, 3, 4, 5])).is_keyframe

    def test_full_overlap_not_keyframe(self):
        fe = Frontend()
        fe.process(square(0, [1, 2, 3, 4, 5]))
        res = fe.process(square(1, [1, 2, 3, 4, 5]))
        assert res.overlap == pytest.approx(1.0)
        assert res.match_ratio == pytest.approx(1.0)
        assert not res.is_keyframe

    def test_zero_matches_is_keyframe(self):
        fe = Frontend()
        fe.process(square(0, [1, 2, 3, 4, 5]))
        res = fe.process(square(1, [6, 7, 8, 9, 10]))
        assert res.overlap == 0.0
        assert res.is_keyframe

    def test_small_overlap_triggers_keyframe(self):
        fe = Frontend(overlap_threshold=0.6, ratio_threshold=0.2)
        fe.process(square(0, [1, 2, 3, 4, 5]))
        # same five landmarks still matched, but re-observed far away:
        # high ratio, tiny hull overlap
        res = fe.process(bundle(1, [(1, 300, 300), (2, 400, 300), (3, 400, 400),
                                    (4, 300, 400), (5, 350, 350),
                                    (6, 0, 0), (7, 100, 0), (8, 100, 100), (9, 0, 100)]))
        assert res.is_keyframe

    def test_standstill_freezes_keyframes(self):
        fe = Frontend()
        lms = list(range(20))
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 400, size=(20, 2))
        for j in range(12):
            res = fe.process(bundle(j, [(lm, pts[i, 0], pts[i, 1])
                                        for i, lm in enumerate(lms)]))
            assert res.is_keyframe == (j == 0)
        assert fe.keyframes == [0]


class TestFramewiseMode:
    def test_every_bundle_keyframe_and_no_bridging(self):
        fe = Frontend(matching="framewise")
        fe.process(bundle(0, [(7, 10, 10)]))
        res = fe.process(bundle(1, [(1, 5, 5)]))
        assert res.is_keyframe
        assert any(tr.landmark_id == 7 for tr in res.disappeared)
        res = fe.process(bundle(2, [(7, 11, 11)]))
        tid = res.observations[0][0]
        assert fe.tracks[tid].observations[0][0] == 2

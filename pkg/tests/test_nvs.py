import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import blank_frame, random_map, random_pose
from oracles import greedy_nms, visible_set
from onlinesplat.core import CameraFrame, Gaussian, GaussianMap, Intrinsics, Pose, look_at
from onlinesplat.nvs import (
    SelectionReport,
    UncertaintyWeights,
    build_candidate_set,
    gaussian_uncertainty,
    information_gain,
    nms_filter,
    rank_by_gain,
    select_views,
    uncertainties,
    visible_gaussians,
)


def _g(scale=(1, 1, 1), grad=0.0, mean=(0, 0, 2), opacity=0.9):
    return Gaussian(np.asarray(mean, float), np.array([1.0, 0, 0, 0]), np.asarray(scale, float), opacity,
                    np.full(3, 0.5), 1.0, grad)


class TestUncertainty:
    def test_shape_only(self):
        assert gaussian_uncertainty(_g(), UncertaintyWeights(0.7, 0.3)) == pytest.approx(0.7)

    def test_shape_and_gradient(self):
        g = _g(scale=(np.sqrt(2), 1, 0.5), grad=1.0)
        assert gaussian_uncertainty(g, UncertaintyWeights(0.7, 0.3)) == pytest.approx(1.7)

    def test_gradient_isolation(self):
        g = _g(grad=0.123)
        assert gaussian_uncertainty(g, UncertaintyWeights(0, 1)) == 0.123

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            UncertaintyWeights(0, 0)
        with pytest.raises(ValueError):
            UncertaintyWeights(-0.1, 1)

    def test_vectorized_agrees(self, rng):
        m = random_map(rng, 20)
        m.grad_accum[:] = rng.uniform(0, 2, 20)
        w = UncertaintyWeights(0.4, 0.6)
        np.testing.assert_allclose(uncertainties(m, w), [gaussian_uncertainty(g, w) for g in m], rtol=1e-12)


class TestVisibility:
    def test_behind_camera(self, intr32):
        m = GaussianMap.from_gaussians([_g(mean=(0, 0, -2))])
        assert visible_gaussians(m, blank_frame(intr32)) == []

    def test_on_axis_opaque(self, intr32):
        m = GaussianMap.from_gaussians([_g(mean=(0, 0, 2.5), scale=(0.5, 0.5, 0.5))])
        vis = visible_gaussians(m, blank_frame(intr32))
        assert len(vis) == 1 and vis[0][0] == 0 and vis[0][1] == pytest.approx(2.5)

    def test_occluded_excluded(self, intr32):
        front = _g(mean=(0, 0, 2.0), scale=(1, 1, 0.05), opacity=0.999)
        back = _g(mean=(0, 0, 4.0), scale=(0.2, 0.2, 0.2))
        vis = visible_gaussians(GaussianMap.from_gaussians([front, back]), blank_frame(intr32))
        assert [i for i, _ in vis] == [0]

    def test_matches_brute_force_oracle(self, rng, intr32):
        for _ in range(5):
            m = random_map(rng, 12)
            pose = random_pose(rng, rot=0.15, trans=0.3)
            got = visible_gaussians(m, blank_frame(intr32, pose))
            expect = visible_set(m, pose, intr32)
            assert {i for i, _ in got} == {i for i, _ in expect}
            zs = dict(expect)
            for i, z in got:
                assert z == pytest.approx(zs[i], abs=1e-9)


class TestInformationGain:
    def test_empty(self, intr32):
        m = GaussianMap.from_gaussians([_g(mean=(0, 0, -2))])
        assert information_gain(m, blank_frame(intr32)) == 0.0

    def test_single_term(self, intr32):
        g = _g(mean=(0, 0, 2.0), scale=(np.sqrt(2), 1, 0.5), grad=1.0)
        m = GaussianMap.from_gaussians([g])
        assert information_gain(m, blank_frame(intr32), UncertaintyWeights(0.7, 0.3)) == pytest.approx(0.425)

    def test_matches_brute_force(self, rng, intr32):
        w = UncertaintyWeights(0.7, 0.3)
        for _ in range(5):
            m = random_map(rng, 12)
            m.grad_accum[:] = rng.uniform(0, 1, len(m))
            pose = random_pose(rng, rot=0.15, trans=0.3)
            unc = [gaussian_uncertainty(g, w) for g in m]
            expect = sum(unc[i] / (z * z) for i, z in visible_set(m, pose, intr32))
            assert abs(information_gain(m, blank_frame(intr32, pose), w) - expect) < 1e-9

    def test_monotone_in_gradient(self, rng, intr32):
        m = random_map(rng, 15)
        m.grad_accum[:] = rng.uniform(0, 1, len(m))
        f = blank_frame(intr32)
        before = information_gain(m, f)
        m.grad_accum *= 3.0
        assert information_gain(m, f) >= before

    def test_closer_is_larger(self, intr32):
        far = GaussianMap.from_gaussians([_g(mean=(0, 0, 3.0), scale=(0.3, 0.3, 0.3), grad=1.0)])
        near = GaussianMap.from_gaussians([_g(mean=(0, 0, 2.0), scale=(0.3, 0.3, 0.3), grad=1.0)])
        assert information_gain(near, blank_frame(intr32)) > information_gain(far, blank_frame(intr32))


class TestNMS:
    def test_example(self):
        assert nms_filter([10, 11, 12, 40], 3) == [10, 40]

    def test_gap_zero(self):
        assert nms_filter([5, 6, 7, 5 + 100], 0) == [5, 6, 7, 105]

    def test_random_lists_match_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            n = int(rng.integers(1, 60))
            ids = rng.permutation(int(rng.integers(n, 3 * n + 1)))[:n].tolist()
            gap = 3
            got = nms_filter(ids, gap)
            assert got == greedy_nms(ids, gap)
            for a in got:
                for b in got:
                    assert a == b or abs(a - b) > gap

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 200), unique=True, max_size=40), st.integers(0, 6))
    def test_survivors_spaced(self, ids, gap):
        got = nms_filter(ids, gap)
        assert got == greedy_nms(ids, gap)
        assert all(abs(a - b) > gap for i, a in enumerate(got) for b in got[i + 1:])


class TestRanking:
    def test_ties_by_lower_id(self):
        assert rank_by_gain([5, 2, 9, 1], [1.0, 1.0, 2.0, 1.0]) == [9, 1, 2, 5]


def _orbit_views(intr, n=24, radius=3.0, center=(0, 0, 0)):
    frames = []
    for i in range(n):
        a = 2 * np.pi * i / n
        eye = np.array([radius * np.cos(a), radius * np.sin(a), 0.5]) + center
        frames.append(CameraFrame(i, look_at(eye, center), intr, np.zeros((intr.height, intr.width, 3)), None,
                                  "non-keyframe"))
    return frames


class TestSelectViews:
    def test_single_candidate(self, rng, intr32):
        m = random_map(rng, 5)
        r = select_views(m, [blank_frame(intr32, fid=4, depth=False)])
        assert r.selected == [4]

    def test_equal_gain_tie_break(self, intr32):
        m = GaussianMap.from_gaussians([_g(mean=(0, 0, -5))])  # invisible everywhere, all gains 0
        cands = [blank_frame(intr32, fid=i, depth=False) for i in [8, 3, 4, 12, 0]]
        r = select_views(m, cands, k=3, gap=3)
        assert r.sorted_order == [0, 3, 4, 8, 12]
        assert r.selected == [0, 4, 8]

    def test_report_invariants_and_round_trip(self, rng):
        intr = Intrinsics.from_fov(24, 24)
        m = random_map(rng, 40, depth=(-1, 1), spread=1.0)
        m.grad_accum[:] = rng.uniform(0, 1, len(m))
        r = select_views(m, _orbit_views(intr), k=4, gap=2, carryover=5)
        assert set(r.selected) <= set(r.survivors_after_nms) <= set(r.candidate_ids)
        assert all(g >= 0 and np.isfinite(g) for g in r.gains)
        assert len(r.carryover) == 5 and r.carryover == r.sorted_order[:5]
        back = SelectionReport.from_dict(r.to_dict())
        assert back == r

    def test_scale_invariance_and_determinism(self, rng):
        intr = Intrinsics.from_fov(24, 24)
        m = random_map(rng, 40, depth=(-1, 1), spread=1.0)
        m.grad_accum[:] = rng.uniform(0, 1, len(m))
        views = _orbit_views(intr)
        a = select_views(m, views, k=5)
        b = select_views(m, views, k=5, w=UncertaintyWeights(0.7, 0.3).scaled(4.0))
        c = select_views(m, views, k=5)
        assert a.sorted_order == b.sorted_order and a.selected == b.selected
        assert a == c

    def test_rejects_bad_input(self, rng, intr32):
        m = random_map(rng, 3)
        with pytest.raises(ValueError):
            select_views(m, [])
        with pytest.raises(ValueError):
            select_views(m, [blank_frame(intr32)], k=0)


class TestCandidateSet:
    def test_first_round(self):
        assert build_candidate_set(range(0, 50), (10, 20)) == list(range(10, 21))

    def test_carryover_union(self):
        got = build_candidate_set([1, 2, 3, 30, 31], (25, 40), previous_carryover=[2, 3])
        assert got == [2, 3, 30, 31]

    def test_cap_uniform_stride(self):
        got = build_candidate_set(range(300), (0, 299), cap=100)
        assert len(got) == 100
        gaps = np.diff(got)
        assert gaps.min() >= 2 and gaps.max() <= 4 and abs(gaps.mean() - 299 / 99) < 0.05

    def test_carryover_kept_under_cap(self):
        carry = [500, 501, 502]
        got = build_candidate_set(range(300), (0, 299), previous_carryover=carry, cap=100)
        assert len(got) == 100 and set(carry) <= set(got)

    def test_bad_span(self):
        with pytest.raises(ValueError):
            build_candidate_set([1], (5, 2))

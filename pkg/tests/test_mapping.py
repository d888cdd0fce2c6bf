import numpy as np
import pytest

from conftest import blank_frame, random_map
from onlinesplat.core import CameraFrame, Gaussian, GaussianMap, Intrinsics, Pose
from onlinesplat.losses import LossWeights, depth_l1, depth_mask, keyframe_loss, nonkeyframe_loss, psnr
from onlinesplat.mapping import (
    LearningRates,
    OptimizerState,
    PointCloud,
    detect_unexplored,
    filter_points,
    insert_gaussians,
    lift_depth,
    optimize_step,
    prune,
    voxel_downsample,
)
from onlinesplat.rasterizer import render


def _grid(n=10, step=0.1):
    g = np.stack(np.meshgrid(*[np.arange(n) * step] * 3, indexing="ij"), -1).reshape(-1, 3)
    return PointCloud(g, np.full_like(g, 0.5))


class TestLiftDepth:
    def test_principal_point(self):
        intr = Intrinsics(10.0, 10.0, 2.0, 2.0, 5, 5)
        d = np.zeros((5, 5))
        d[2, 2] = 1.0
        f = CameraFrame(0, Pose(), intr, np.ones((5, 5, 3)), d)
        pc = lift_depth(f)
        assert len(pc) == 1
        np.testing.assert_allclose(pc.points[0], [0, 0, 1])
        np.testing.assert_array_equal(pc.pixels[0], [2, 2])

    def test_reprojection_round_trip(self, rng, intr32):
        pose = Pose.exp(np.array([0.3, -0.2, 0.5, 0.1, 0.2, -0.3]))
        depth = rng.uniform(0.5, 5.0, (32, 32))
        depth[rng.uniform(size=(32, 32)) < 0.2] = 0
        f = CameraFrame(0, pose, intr32, rng.uniform(size=(32, 32, 3)), depth)
        pc = lift_depth(f)
        assert len(pc) == int((depth > 0).sum())
        cam = pose.inverse().apply(pc.points)
        u = intr32.fx * cam[:, 0] / cam[:, 2] + intr32.cx
        v = intr32.fy * cam[:, 1] / cam[:, 2] + intr32.cy
        np.testing.assert_allclose(u, pc.pixels[:, 1], atol=1e-4)
        np.testing.assert_allclose(v, pc.pixels[:, 0], atol=1e-4)
        np.testing.assert_allclose(cam[:, 2], depth[pc.pixels[:, 0], pc.pixels[:, 1]], atol=1e-6)

    def test_needs_depth(self, intr32):
        with pytest.raises(ValueError):
            lift_depth(blank_frame(intr32, depth=False))


class TestFilterPoints:
    def test_boundaryless_uniform_grid_unchanged(self):
        # every point has the same neighbourhood, so nothing stands out
        a = np.arange(400) * 2 * np.pi / 400
        pts = np.c_[np.cos(a), np.sin(a), np.zeros_like(a)] * 5
        assert len(filter_points(PointCloud(pts, np.zeros_like(pts)))) == 400

    def test_bounded_grid_keeps_interior(self):
        pc = _grid()
        out = filter_points(pc)
        interior = np.all((pc.points > 0.05) & (pc.points < 0.85), axis=1)
        kept = {tuple(p) for p in np.round(out.points, 6)}
        assert all(tuple(p) in kept for p in np.round(pc.points[interior], 6))
        assert len(out) >= 0.99 * len(pc)

    def test_far_point_removed(self):
        pc = _grid()
        pts = np.vstack([pc.points, [[100.0, 0, 0]]])
        out = filter_points(PointCloud(pts, np.zeros_like(pts)))
        assert len(out) == len(pc) and not np.any(out.points[:, 0] > 50)

    def test_labeled_outliers(self, rng):
        inl = rng.uniform(-1, 1, (2000, 3))
        dirs = rng.normal(size=(100, 3))
        outl = dirs / np.linalg.norm(dirs, axis=1, keepdims=True) * 10 * np.sqrt(3)
        pts = np.vstack([inl, outl])
        label = np.r_[np.zeros(2000, bool), np.ones(100, bool)]
        pc = PointCloud(pts, np.zeros_like(pts), np.arange(len(pts))[:, None].repeat(2, 1))
        out = filter_points(pc)
        kept = np.zeros(len(pts), bool)
        kept[out.pixels[:, 0]] = True
        assert (~kept[label]).mean() >= 0.95
        assert (~kept[~label]).mean() <= 0.02

    def test_small_cloud_passes(self):
        pts = np.r_[np.zeros((5, 3)), [[100.0, 0, 0]]]
        assert len(filter_points(PointCloud(pts, np.zeros_like(pts)))) == 6


def loop_tile_psnr(a, b, tile):
    H, W = a.shape[:2]
    out = []
    for y in range(0, H, tile):
        row = []
        for x in range(0, W, tile):
            pa, pb = a[y:y + tile, x:x + tile], b[y:y + tile, x:x + tile]
            mse = sum((pa[i] - pb[i]) ** 2 for i in np.ndindex(pa.shape)) / pa.size
            row.append(100.0 if mse == 0 else min(100.0, 10 * np.log10(1 / mse)))
        out.append(row)
    return np.array(out)


class TestDetectUnexplored:
    def test_identical(self, rng):
        x = rng.uniform(size=(32, 32, 3))
        assert not detect_unexplored(x, x).any()

    def test_background_render(self, rng):
        x = rng.uniform(size=(32, 32, 3))
        assert detect_unexplored(np.zeros_like(x), x, 16, 20.0).all()

    def test_half_covered_matches_loop_oracle(self, rng):
        x = rng.uniform(size=(40, 48, 3))
        r = x.copy()
        r[:, 24:] = 0
        got = detect_unexplored(r, x, 8, 20.0)
        np.testing.assert_array_equal(got, loop_tile_psnr(r, x, 8) < 20.0)
        assert got[:, :3].sum() == 0 and got[:, 3:].all()

    def test_partial_border_tiles(self, rng):
        x = rng.uniform(size=(20, 20, 3))
        got = detect_unexplored(np.zeros_like(x), x, 16)
        assert got.shape == (2, 2) and got.all()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            detect_unexplored(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)))


def _plane_frame(intr, depth=2.0, fid=0):
    rng = np.random.default_rng(fid)
    return CameraFrame(fid, Pose(), intr, rng.uniform(size=(intr.height, intr.width, 3)),
                       np.full((intr.height, intr.width), depth))


class TestInsertGaussians:
    def test_empty_mask(self, intr32):
        m = GaussianMap()
        f = _plane_frame(intr32)
        assert insert_gaussians(m, lift_depth(f), 0, np.zeros((2, 2), bool), anchor_pose=Pose()) == 0
        assert len(m) == 0 and 0 in m.keyframe_anchors

    def test_bootstrap_counts_voxels(self, intr32):
        from scipy.spatial import cKDTree

        m = GaussianMap()
        f = _plane_frame(intr32)
        pc = lift_depth(f)
        n = insert_gaussians(m, pc, 0, np.ones((2, 2), bool), anchor_pose=f.pose)
        spacing = np.median(cKDTree(pc.points).query(pc.points, k=2)[0][:, 1])
        assert n == len(voxel_downsample(pc.points, 2.0 * spacing)) == len(m)
        np.testing.assert_allclose(m.opacities, 0.5)
        np.testing.assert_allclose(m.betas, 1.0)
        np.testing.assert_allclose(m.quats, np.tile([1.0, 0, 0, 0], (n, 1)))
        assert np.all(m.source_kf == 0)
        s = m.scales
        assert np.all(s[:, 0] == s[:, 1]) and np.all(s >= 1e-3) and np.all(s <= 1.0)

    def test_only_unexplored_tiles(self, intr32):
        m = GaussianMap()
        f = _plane_frame(intr32)
        mask = np.array([[True, False], [False, False]])
        insert_gaussians(m, lift_depth(f), 0, mask, anchor_pose=f.pose)
        cam = m.means
        u = intr32.fx * cam[:, 0] / cam[:, 2] + intr32.cx
        v = intr32.fy * cam[:, 1] / cam[:, 2] + intr32.cy
        assert np.all(u < 16) and np.all(v < 16)

    def test_second_pass_over_covered_region(self, intr32):
        m = GaussianMap()
        f = _plane_frame(intr32)
        insert_gaussians(m, lift_depth(f), 0, np.ones((2, 2), bool), anchor_pose=f.pose)
        explored = np.zeros((2, 2), bool)
        assert insert_gaussians(m, lift_depth(f), 0, explored) == 0

    def test_unknown_anchor(self, intr32):
        with pytest.raises(KeyError):
            insert_gaussians(GaussianMap(), lift_depth(_plane_frame(intr32)), 3, np.ones((2, 2), bool))


class TestOptimizeStep:
    def test_zero_weights_leave_parameters(self, rng, intr32):
        m = random_map(rng, 8)
        f = CameraFrame(0, Pose(), intr32, rng.uniform(size=(32, 32, 3)), rng.uniform(2, 4, (32, 32)))
        before = m.copy()
        optimize_step(m, [f], LossWeights(0, 0, 0, 0), OptimizerState())
        for a in ("means", "quats", "log_scales", "opacity_logits", "colors", "log_betas"):
            np.testing.assert_array_equal(getattr(m, a), getattr(before, a))

    def test_color_mismatch_converges(self):
        intr = Intrinsics.from_fov(24, 24)
        def blob(color):
            return Gaussian(np.array([0, 0, 2.0]), np.array([1.0, 0, 0, 0]), np.full(3, 2.0), 0.99, np.array(color))

        m = GaussianMap.from_gaussians([blob([0.2, 0.2, 0.2])])
        target = render(GaussianMap.from_gaussians([blob([0.8, 0.5, 0.1])]), blank_frame(intr))
        f = CameraFrame(0, Pose(), intr, target.color, None, "non-keyframe")
        state = OptimizerState(LearningRates(mean=0, color=0.02, opacity_logit=0, log_scale=0, rotation=0, log_beta=0))
        w = LossWeights(1.0, 0, 0, 0)
        losses = [optimize_step(m, [f], w, state) for _ in range(50)]
        assert losses[-1] < 0.2 * losses[0]

    def test_depth_term_difference(self, rng, intr32):
        m = random_map(rng, 8)
        kf = CameraFrame(0, Pose(), intr32, rng.uniform(size=(32, 32, 3)), rng.uniform(2, 4, (32, 32)))
        w = LossWeights()
        a = optimize_step(m.copy(), [kf], w, OptimizerState())
        b = optimize_step(m.copy(), [kf.as_nonkeyframe()], w, OptimizerState())
        out = render(m, kf)
        assert a - b == pytest.approx(w.depth * depth_l1(out.depth, kf.depth, depth_mask(kf.depth, out.alpha)),
                                      abs=1e-12)

    def test_invariants_hold_after_many_steps(self, rng, intr32):
        m = random_map(rng, 10)
        frames = [CameraFrame(i, Pose.exp(np.r_[rng.normal(scale=0.1, size=3), rng.normal(scale=0.05, size=3)]),
                              intr32, rng.uniform(size=(32, 32, 3)), rng.uniform(2, 4, (32, 32))) for i in range(3)]
        state = OptimizerState()
        for _ in range(30):
            optimize_step(m, frames, LossWeights(), state)
        m.validate()
        assert np.all(m.scales > 0) and np.all(m.betas > 0)
        assert np.all((m.opacities >= 0) & (m.opacities <= 1))
        assert state.step == 30 and state.cursor == 30

    def test_needs_frames(self, rng):
        with pytest.raises(ValueError):
            optimize_step(random_map(rng, 2), [], LossWeights(), OptimizerState())


class TestPrune:
    def test_nothing_below_floor(self, rng):
        m = random_map(rng, 10, opacity=(0.5, 0.5))
        assert prune(m)[0] == 0 and len(m) == 10

    def test_one_removed(self, rng):
        m = random_map(rng, 10, opacity=(0.5, 0.5))
        m.opacity_logits[4] = np.log(0.001 / 0.999)
        removed, remap = prune(m)
        assert removed == 1 and len(m) == 9 and remap[4] == -1 and remap[5] == 4

    def test_loop_oracle(self, rng):
        m = random_map(rng, 200, opacity=(0.0001, 0.02))
        ops = m.opacities.copy()
        expect = [i for i in range(200) if ops[i] < 0.005]
        state = OptimizerState()
        state.resize(200)
        state.m["color"][:] = np.arange(200)[:, None]
        removed, remap = prune(m, 0.005, state)
        assert removed == len(expect)
        assert [i for i in range(200) if remap[i] == -1] == expect
        survivors = [i for i in range(200) if remap[i] >= 0]
        np.testing.assert_array_equal(state.m["color"][:, 0], survivors)

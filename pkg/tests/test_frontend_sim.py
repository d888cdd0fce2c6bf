import numpy as np
import pytest

from onlinesplat.core import Intrinsics, Pose
from onlinesplat.frontend_sim import (
    SceneSpec,
    TrajectorySpec,
    assign_roles,
    drift,
    generate_scene,
    generate_trajectory,
    mean_flow,
    observe,
    reference_probes,
    select_keyframes,
)
from onlinesplat.mapping import lift_depth
from onlinesplat.rasterizer import RenderSettings, render_pose

INTR = Intrinsics.from_fov(48, 48, 60.0)


class TestScene:
    def test_single(self):
        m = generate_scene(SceneSpec(gaussian_count=1))
        assert len(m) == 1
        m.validate()

    def test_deterministic(self):
        a, b = generate_scene(SceneSpec(seed=3)), generate_scene(SceneSpec(seed=3))
        for f in ("means", "quats", "log_scales", "opacity_logits", "colors", "log_betas"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_seed_changes_scene(self):
        assert not np.array_equal(generate_scene(SceneSpec(seed=1)).means, generate_scene(SceneSpec(seed=2)).means)

    @pytest.mark.parametrize("palette", ["random", "textured-clusters"])
    def test_bounds(self, palette):
        spec = SceneSpec(gaussian_count=500, extent=5.0, palette=palette)
        m = generate_scene(spec)
        m.validate()
        assert np.all(np.abs(m.means) <= 2.5)
        lo, hi = spec.scale_range
        assert np.all(m.scales >= lo * 0.5 - 1e-12) and np.all(m.scales <= hi * 1.5 + 1e-12)
        assert np.all((m.colors >= 0) & (m.colors <= 1))

    def test_has_high_beta_cluster(self):
        assert np.any(generate_scene(SceneSpec()).betas >= 3.0 - 1e-12)

    @pytest.mark.parametrize("kw", [dict(gaussian_count=0), dict(extent=0), dict(palette="plaid")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SceneSpec(**kw)


class TestTrajectory:
    def test_orbit_quarter_turns(self):
        poses = generate_trajectory(TrajectorySpec(frames=4, revolutions=1.0, radius=2.0, height=0.0))
        expect = [(2, 0, 0), (0, 2, 0), (-2, 0, 0), (0, -2, 0)]
        for p, e in zip(poses, expect):
            np.testing.assert_allclose(p.translation, e, atol=1e-12)
            np.testing.assert_allclose(p.rotation_matrix[:, 2], -np.asarray(e) / 2, atol=1e-12)

    @pytest.mark.parametrize("kind", ["orbit", "lawnmower"])
    def test_looks_at_center(self, kind):
        for p in generate_trajectory(TrajectorySpec(kind=kind, frames=40)):
            c = p.inverse().apply(np.zeros(3))
            assert abs(c[0]) < 1e-9 and abs(c[1]) < 1e-9 and c[2] > 0

    def test_random_walk_deterministic(self):
        s = TrajectorySpec(kind="random-walk", frames=30, seed=5)
        a, b = generate_trajectory(s), generate_trajectory(s)
        assert all(x.same_as(y) for x, y in zip(a, b))

    def test_zero_noise_drift_is_identity(self):
        s = TrajectorySpec(frames=20, rotation_noise=0, translation_noise=0)
        t = generate_trajectory(s)
        assert all(x.same_as(y) for x, y in zip(drift(t, s), t))

    def test_drift_grows(self):
        n = 40
        err_n, err_2n = [], []
        for seed in range(20):
            s = TrajectorySpec(frames=2 * n + 1, seed=seed)
            t = generate_trajectory(s)
            d = drift(t, s)
            err_n.append(d[n].distance_to(t[n]))
            err_2n.append(d[2 * n].distance_to(t[2 * n]))
        assert np.mean(err_2n) > np.mean(err_n)

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrajectorySpec(frames=1)
        with pytest.raises(ValueError):
            TrajectorySpec(rotation_noise=-1)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneSpec(gaussian_count=300))


class TestObserve:
    def test_zero_noise_equals_render(self, scene):
        pose = generate_trajectory(TrajectorySpec(frames=10))[0]
        f = observe(scene, pose, INTR)
        raw = render_pose(scene, pose, INTR)
        np.testing.assert_array_equal(f.image, raw.color)
        valid = f.depth > 0
        np.testing.assert_array_equal(f.depth[valid], raw.depth[valid])
        assert f.is_keyframe

    def test_rgb_noise_folded_normal(self, scene):
        pose = generate_trajectory(TrajectorySpec(frames=10))[3]
        # mid-grey background keeps clamping away from the noise
        s = RenderSettings(background=(0.5, 0.5, 0.5))
        clean = observe(scene, pose, INTR, settings=s)
        noisy = observe(scene, pose, INTR, rgb_noise_std=0.01, rng=np.random.default_rng(0), settings=s)
        mad = np.abs(noisy.image - clean.image).mean()
        expect = 0.01 * np.sqrt(2 / np.pi)
        assert abs(mad - expect) < 0.2 * expect

    def test_background_depth_zero_under_noise(self):
        m = generate_scene(SceneSpec(gaussian_count=1))
        f = observe(m, Pose.exp(np.array([0, 0, -6.0, 0, 0, 0])), INTR, depth_noise_std=0.1,
                    rng=np.random.default_rng(1))
        assert f.depth[0, 0] == 0 and np.all(f.depth >= 0)

    def test_lift_matches_rendered_depth(self, scene):
        pose = generate_trajectory(TrajectorySpec(frames=10))[5]
        f = observe(scene, pose, INTR)
        pc = lift_depth(f)
        cam = pose.inverse().apply(pc.points)
        np.testing.assert_allclose(cam[:, 2], f.depth[pc.pixels[:, 0], pc.pixels[:, 1]], atol=1e-9)


def _frames(scene, poses):
    return [observe(scene, p, INTR, frame_id=i) for i, p in enumerate(poses)]


class TestKeyframes:
    def test_static_camera(self, scene):
        pose = generate_trajectory(TrajectorySpec(frames=10))[0]
        roles = select_keyframes(_frames(scene, [pose] * 6), 8.0, reference_probes(scene))
        assert roles == ["keyframe"] + ["non-keyframe"] * 5

    def test_threshold_zero(self, scene):
        poses = generate_trajectory(TrajectorySpec(frames=30))[:6]
        assert set(select_keyframes(_frames(scene, poses), 0.0, reference_probes(scene))) == {"keyframe"}

    def test_count_monotone_in_threshold(self, scene):
        poses = generate_trajectory(TrajectorySpec(frames=120))
        frames = _frames(scene, poses)
        counts = [select_keyframes(frames, t, reference_probes(scene)).count("keyframe") for t in (4, 8, 16)]
        assert counts[0] > counts[1] > counts[2] >= 1

    def test_lifted_probes(self, scene):
        poses = generate_trajectory(TrajectorySpec(frames=60))[:20]
        roles = select_keyframes(_frames(scene, poses), 8.0)
        assert roles[0] == "keyframe" and 1 < roles.count("keyframe") < 20

    def test_flow_zero_for_same_pose(self, scene):
        p = generate_trajectory(TrajectorySpec(frames=10))[0]
        assert mean_flow(scene.means, p, p, INTR) == 0.0

    def test_assign_roles_drops_depth(self, scene):
        poses = generate_trajectory(TrajectorySpec(frames=10))[:3]
        out = assign_roles(_frames(scene, poses), ["keyframe", "non-keyframe", "keyframe"])
        assert out[1].depth is None and out[0].depth is not None and out[2].is_keyframe

    def test_empty(self):
        with pytest.raises(ValueError):
            select_keyframes([])

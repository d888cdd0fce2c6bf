"""Synthetic stand-in for the tracking / depth frontend.

A hidden reference map is rendered from a camera trajectory to produce posed
RGB-D frames. Pose drift is produced by a toy tracker that integrates the
true relative motion plus per-frame noise, so its error grows with time and
restarts from wherever the previous estimate was corrected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from onlinesplat.core import (
    KEYFRAME,
    NON_KEYFRAME,
    CameraFrame,
    GaussianMap,
    Intrinsics,
    Pose,
    look_at,
    quat_normalize,
)
from onlinesplat.rasterizer import DEFAULT_SETTINGS, RenderSettings, project_map, render_pose

REFERENCE_ANCHOR = 0


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    gaussian_count: int = 500
    extent: float = 4.0
    beta_range: tuple = (0.8, 2.0)
    palette: str = "textured-clusters"
    scale_range: tuple = (0.08, 0.3)
    opacity_range: tuple = (0.7, 0.98)
    clusters: int = 8
    high_beta: float = 3.0
    # share of Gaussians laid out as a flat textured ground sheet
    ground_fraction: float = 0.4

    def __post_init__(self):
        if self.gaussian_count < 1:
            raise ValueError("gaussian_count must be at least 1")
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if self.palette not in ("random", "textured-clusters"):
            raise ValueError(f"unknown palette {self.palette!r}")
        if not (0 < self.beta_range[0] <= self.beta_range[1]):
            raise ValueError("beta range must be positive and ordered")


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "orbit"
    frames: int = 300
    frame_rate: float = 30.0
    radius: float = 3.0
    height: float = 2.0
    revolutions: float = 1.5
    rotation_noise: float = 0.002
    translation_noise: float = 0.003
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("orbit", "lawnmower", "random-walk"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.frames < 2:
            raise ValueError("a trajectory needs at least two frames")
        if self.rotation_noise < 0 or self.translation_noise < 0:
            raise ValueError("noise levels must be nonnegative")


def _random_quats(rng, n):
    return quat_normalize(rng.normal(size=(n, 4)))


def generate_scene(spec: SceneSpec) -> GaussianMap:
    """Deterministic reference map for ``spec``; always contains a high-beta cluster."""
    rng = np.random.default_rng(spec.seed)
    n = spec.gaussian_count
    half = spec.extent / 2.0
    lo_s, hi_s = spec.scale_range
    means = np.empty((n, 3))
    colors = np.empty((n, 3))
    scales = np.exp(rng.uniform(np.log(lo_s), np.log(hi_s), size=(n, 3)))
    quats = _random_quats(rng, n)
    betas = rng.uniform(*spec.beta_range, size=n)
    opac = rng.uniform(*spec.opacity_range, size=n)

    n_ground = int(round(spec.ground_fraction * n)) if n >= 4 else 0
    n_obj = n - n_ground
    if n_ground:
        g = slice(0, n_ground)
        xy = rng.uniform(-half, half, size=(n_ground, 2))
        means[g, :2] = xy
        means[g, 2] = -0.25 * half + rng.normal(0, 0.01 * half, n_ground)
        # flat splats, aligned with the ground
        scales[g, 2] = lo_s * 0.5
        scales[g, :2] = np.clip(scales[g, :2] * 1.5, lo_s, hi_s * 1.5)
        yaw = rng.uniform(0, np.pi, n_ground)
        quats[g] = np.stack([np.cos(yaw / 2), np.zeros(n_ground), np.zeros(n_ground), np.sin(yaw / 2)], axis=1)
        checker = (np.floor(xy[:, 0] / (half / 2)) + np.floor(xy[:, 1] / (half / 2))) % 2
        base = np.where(checker[:, None] > 0, [0.75, 0.7, 0.6], [0.35, 0.3, 0.25])
        colors[g] = base + rng.normal(0, 0.03, (n_ground, 3))
        opac[g] = np.maximum(opac[g], 0.9)

    obj = slice(n_ground, n)
    k = max(1, min(spec.clusters, n_obj))
    centers = rng.uniform(-0.6 * half, 0.6 * half, size=(k, 3))
    centers[:, 2] = rng.uniform(-0.1 * half, 0.5 * half, size=k)
    labels = np.arange(n_obj) % k
    spread = 0.12 * spec.extent
    means[obj] = centers[labels] + rng.normal(0, spread, size=(n_obj, 3))
    if spec.palette == "textured-clusters":
        base = rng.uniform(0.15, 0.95, size=(k, 3))
        colors[obj] = base[labels] + rng.normal(0, 0.05, size=(n_obj, 3))
    else:
        colors[obj] = rng.uniform(0, 1, size=(n_obj, 3))
    # cluster 0 exercises sharp generalized-exponential falloff
    sharp = np.zeros(n, dtype=bool)
    sharp[n_ground:][labels == 0] = True
    if n_obj == 0:
        sharp[0] = True
    betas[sharp] = spec.high_beta

    means = np.clip(means, -half, half)
    colors = np.clip(colors, 0.0, 1.0)
    gmap = GaussianMap()
    gmap.keyframe_anchors[REFERENCE_ANCHOR] = Pose.identity()
    gmap.add(means, colors, scales, opac, REFERENCE_ANCHOR, quats=quats, betas=betas)
    return gmap


def generate_trajectory(spec: TrajectorySpec, target=(0.0, 0.0, 0.0)) -> list[Pose]:
    """True camera poses; every camera looks at ``target``."""
    n = spec.frames
    target = np.asarray(target, dtype=np.float64)
    if spec.kind == "orbit":
        ang = 2 * np.pi * spec.revolutions * np.arange(n) / n
        eyes = np.stack([spec.radius * np.cos(ang), spec.radius * np.sin(ang), np.full(n, spec.height)], axis=1)
    elif spec.kind == "lawnmower":
        rows = max(2, int(round(np.sqrt(n / 8))))
        per_row = int(np.ceil(n / rows))
        eyes = []
        for r in range(rows):
            xs = np.linspace(-spec.radius, spec.radius, per_row)
            if r % 2:
                xs = xs[::-1]
            y = -spec.radius + 2 * spec.radius * r / (rows - 1)
            eyes.extend([(x, y, spec.height + spec.radius) for x in xs])
        eyes = np.array(eyes[:n])
    else:
        rng = np.random.default_rng(spec.seed)
        steps = rng.normal(0, 0.02 * spec.radius, size=(n, 3))
        steps[0] = 0
        eyes = np.array([spec.radius, 0.0, spec.height]) + np.cumsum(steps, axis=0)
    return [look_at(e, target) for e in (eyes + 0.0)]


class Tracker:
    """Integrates true relative motion with per-frame noise (toy visual odometry)."""

    def __init__(self, spec: TrajectorySpec, n_frames: Optional[int] = None, seed: Optional[int] = None):
        n = n_frames if n_frames is not None else spec.frames
        rng = np.random.default_rng(spec.seed + 7919 if seed is None else seed)
        self.noise = np.concatenate(
            [rng.normal(0, spec.translation_noise, (n, 3)), rng.normal(0, spec.rotation_noise, (n, 3))], axis=1
        )
        self.noise[0] = 0.0
        self.zero = spec.translation_noise == 0 and spec.rotation_noise == 0

    def track(self, k: int, prev_estimate: Pose, prev_true: Pose, true: Pose) -> Pose:
        """Estimate of frame ``k`` given the estimate of frame ``k - 1``."""
        if self.zero and prev_estimate.same_as(prev_true):
            return true
        rel = prev_true.inverse().compose(true)
        return prev_estimate.compose(rel).compose(Pose.exp(self.noise[k]))


def drift(trajectory: Sequence[Pose], spec: TrajectorySpec, seed: Optional[int] = None) -> list[Pose]:
    """Open-loop tracked poses for ``trajectory``; identical to it when noise is zero."""
    if spec.rotation_noise == 0 and spec.translation_noise == 0:
        return list(trajectory)
    tracker = Tracker(spec, len(trajectory), seed)
    est = [trajectory[0]]
    for k in range(1, len(trajectory)):
        est.append(tracker.track(k, est[-1], trajectory[k - 1], trajectory[k]))
    return est


def observe(
    reference: GaussianMap,
    pose: Pose,
    intrinsics: Intrinsics,
    depth_noise_std: float = 0.0,
    rgb_noise_std: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    frame_id: int = 0,
    settings: RenderSettings = DEFAULT_SETTINGS,
    valid_alpha: float = 0.9,
    timestamp: Optional[float] = None,
) -> CameraFrame:
    """Render an RGB-D keyframe of the reference map, with optional iid noise.

    Pixels whose accumulated opacity is below ``valid_alpha`` count as
    background and get depth 0 (no valid measurement).
    """
    if rng is None:
        rng = np.random.default_rng(frame_id)
    out = render_pose(reference, pose, intrinsics, settings)
    img = out.color
    if rgb_noise_std > 0:
        img = np.clip(img + rng.normal(0, rgb_noise_std, img.shape), 0.0, 1.0)
    depth = out.depth.copy()
    valid = (out.alpha >= valid_alpha) & (depth > 0)
    if depth_noise_std > 0:
        depth = depth + rng.normal(0, depth_noise_std, depth.shape)
    depth = np.where(valid, np.maximum(depth, 0.0), 0.0)
    return CameraFrame(frame_id, pose, intrinsics, img, depth, KEYFRAME, timestamp)


def _visible_projection(points: np.ndarray, pose: Pose, intr: Intrinsics, znear: float = 0.01):
    cam = pose.inverse().apply(points)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    ok = (z > znear) & (u >= -0.5) & (u <= intr.width - 0.5) & (v >= -0.5) & (v <= intr.height - 0.5)
    return np.stack([u, v], axis=1), ok


def mean_flow(points: np.ndarray, a: Pose, b: Pose, intr: Intrinsics) -> float:
    """Mean image displacement of the points visible in both views; infinite when none are shared."""
    ua, oka = _visible_projection(points, a, intr)
    ub, okb = _visible_projection(points, b, intr)
    both = oka & okb
    if not both.any():
        return float("inf")
    return float(np.linalg.norm(ua[both] - ub[both], axis=1).mean())


def select_keyframes(
    frames: Sequence[CameraFrame],
    flow_threshold_px: float = 8.0,
    probe_points: Optional[np.ndarray] = None,
    max_probes: int = 2000,
) -> list[str]:
    """Frame 0 plus every frame whose mean flow since the last keyframe exceeds the threshold.

    Flow is the displacement of projected probe points (the reference scene's
    Gaussian centers for synthetic data). Without probes, points lifted from
    the last keyframe's depth are used.
    """
    if not frames:
        raise ValueError("select_keyframes needs at least one frame")
    roles = [KEYFRAME]
    last = frames[0]
    probes = probe_points if probe_points is not None else _probes_from(last, max_probes)
    for f in frames[1:]:
        flow = mean_flow(probes, last.pose, f.pose, f.intrinsics) if len(probes) else float("inf")
        if flow > flow_threshold_px:
            roles.append(KEYFRAME)
            last = f
            if probe_points is None:
                probes = _probes_from(last, max_probes)
        else:
            roles.append(NON_KEYFRAME)
    return roles


def _probes_from(frame: CameraFrame, max_probes: int) -> np.ndarray:
    from onlinesplat.mapping import lift_depth

    if frame.depth is None:
        return np.zeros((0, 3))
    pts = lift_depth(frame).points
    if len(pts) > max_probes:
        pts = pts[np.linspace(0, len(pts) - 1, max_probes).astype(int)]
    return pts


def assign_roles(frames: Sequence[CameraFrame], roles: Sequence[str]) -> list[CameraFrame]:
    """Apply roles; non-keyframes lose their depth maps."""
    return [f if r == KEYFRAME else f.as_nonkeyframe() for f, r in zip(frames, roles)]


def reference_probes(reference: GaussianMap) -> np.ndarray:
    return reference.means.copy()


def visible_reference(reference: GaussianMap, pose: Pose, intr: Intrinsics) -> np.ndarray:
    return project_map(reference, pose, intr, DEFAULT_SETTINGS).index

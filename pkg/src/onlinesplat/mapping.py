"""Incremental map construction and Gaussian optimization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from onlinesplat.core import (
    OPACITY_LOGIT_CLAMP,
    CameraFrame,
    GaussianMap,
    Pose,
    quat_exp,
    quat_multiply,
)
from onlinesplat.losses import LossWeights, frame_loss, psnr
from onlinesplat.rasterizer import (
    DEFAULT_SETTINGS,
    RenderSettings,
    backward_from_context,
    render_with_context,
)

DEFAULT_TILE = 16
DEFAULT_PSNR_THRESHOLD = 20.0
INIT_OPACITY = 0.5


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray
    # (row, col) of the source pixel for every point; empty when unknown
    pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise ValueError("points and colors must have equal length")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask: np.ndarray) -> "PointCloud":
        px = self.pixels[mask] if len(self.pixels) == len(self.points) else self.pixels
        return PointCloud(self.points[mask], self.colors[mask], px)


def lift_depth(frame: CameraFrame) -> PointCloud:
    """Unproject every pixel with positive depth into world coordinates."""
    if frame.depth is None:
        raise ValueError("lift_depth needs a frame with depth")
    intr = frame.intrinsics
    rows, cols = np.nonzero(frame.depth > 0)
    d = frame.depth[rows, cols]
    cam = np.stack([(cols - intr.cx) / intr.fx * d, (rows - intr.cy) / intr.fy * d, d], axis=1)
    return PointCloud(frame.pose.apply(cam), frame.image[rows, cols], np.stack([rows, cols], axis=1))


def filter_points(pc: PointCloud, k: int = 8, n_std: float = 2.0) -> PointCloud:
    """Statistical outlier removal on the mean distance to the ``k`` nearest neighbours."""
    if len(pc) < 16:
        return pc
    tree = cKDTree(pc.points)
    dist, _ = tree.query(pc.points, k=k + 1)
    mean_d = dist[:, 1:].mean(axis=1)
    # relative slack so a perfectly uniform cloud is not split by roundoff
    keep = mean_d <= (mean_d.mean() + n_std * mean_d.std()) * (1 + 1e-9)
    return pc.subset(keep)


def detect_unexplored(
    rendered: np.ndarray,
    original: np.ndarray,
    tile: int = DEFAULT_TILE,
    threshold_db: float = DEFAULT_PSNR_THRESHOLD,
) -> np.ndarray:
    """Boolean grid, True for tiles whose PSNR falls below ``threshold_db``.

    Border tiles that do not fill a whole ``tile`` x ``tile`` block are scored
    on the pixels they have.
    """
    if rendered.shape != original.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {original.shape}")
    H, W = rendered.shape[:2]
    ty, tx = math.ceil(H / tile), math.ceil(W / tile)
    mask = np.zeros((ty, tx), dtype=bool)
    for i in range(ty):
        for j in range(tx):
            sl = (slice(i * tile, (i + 1) * tile), slice(j * tile, (j + 1) * tile))
            mask[i, j] = psnr(rendered[sl], original[sl]) < threshold_db
    return mask


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Index of the first point falling in every occupied voxel, in input order."""
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    keys = np.floor(points / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return np.sort(first)


def insert_gaussians(
    gmap: GaussianMap,
    pc: PointCloud,
    frame_id: int,
    mask: np.ndarray,
    *,
    tile: int = DEFAULT_TILE,
    anchor_pose: Optional[Pose] = None,
    opacity: float = INIT_OPACITY,
    voxel_factor: float = 2.0,
) -> int:
    """Seed Gaussians from the points whose pixels fall in unexplored tiles.

    Candidates are voxel-subsampled (voxel edge = ``voxel_factor`` times the
    median nearest-neighbour spacing); each new Gaussian is isotropic with a scale
    equal to the mean distance to its three nearest new neighbours.
    """
    if frame_id not in gmap.keyframe_anchors:
        if anchor_pose is None:
            raise KeyError(f"keyframe {frame_id} has no anchor pose")
        gmap.keyframe_anchors[frame_id] = anchor_pose
    mask = np.asarray(mask, dtype=bool)
    if len(pc) == 0 or not mask.any():
        return 0
    if len(pc.pixels) != len(pc):
        raise ValueError("point cloud carries no source pixels")
    rows, cols = pc.pixels[:, 0] // tile, pc.pixels[:, 1] // tile
    inside = (rows < mask.shape[0]) & (cols < mask.shape[1])
    sel = np.zeros(len(pc), dtype=bool)
    sel[inside] = mask[rows[inside], cols[inside]]
    pts, cols_rgb = pc.points[sel], pc.colors[sel]
    if len(pts) == 0:
        return 0

    if len(pts) >= 2:
        nn, _ = cKDTree(pts).query(pts, k=2)
        spacing = float(np.median(nn[:, 1]))
    else:
        spacing = 0.0
    if spacing > 0:
        keep = voxel_downsample(pts, voxel_factor * spacing)
        pts, cols_rgb = pts[keep], cols_rgb[keep]

    n = len(pts)
    if n >= 2:
        kk = min(3, n - 1)
        dist, _ = cKDTree(pts).query(pts, k=kk + 1)
        scale = dist[:, 1:].mean(axis=1)
    else:
        scale = np.full(n, max(spacing, 1e-2))
    scale = np.clip(scale, 1e-3, 1.0)
    gmap.add(pts, np.clip(cols_rgb, 0, 1), scale, opacity, frame_id)
    return n


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

PARAM_GROUPS = ("mean", "rotation", "log_scale", "opacity_logit", "color", "log_beta")


@dataclass
class LearningRates:
    mean: float = 1.6e-4
    color: float = 2.5e-3
    opacity_logit: float = 5e-2
    log_scale: float = 5e-3
    rotation: float = 1e-3
    log_beta: float = 2e-3

    def scaled_for(self, extent: float) -> "LearningRates":
        """Position rate scaled by the scene extent."""
        return LearningRates(self.mean * extent, self.color, self.opacity_logit, self.log_scale, self.rotation, self.log_beta)


_SHAPES = {"mean": 3, "rotation": 3, "log_scale": 3, "opacity_logit": 0, "color": 3, "log_beta": 0}


class OptimizerState:
    """Adam moments per parameter group, kept aligned with the map's rows."""

    def __init__(self, lr: Optional[LearningRates] = None, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.lr = lr or LearningRates()
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0
        self.cursor = 0
        self.m = {k: self._zeros(0, k) for k in PARAM_GROUPS}
        self.v = {k: self._zeros(0, k) for k in PARAM_GROUPS}
        # per-row step counts for bias correction of late-inserted rows
        self.t = np.zeros(0, dtype=np.int64)

    @staticmethod
    def _zeros(n: int, key: str) -> np.ndarray:
        return np.zeros((n, _SHAPES[key])) if _SHAPES[key] else np.zeros(n)

    def resize(self, n: int) -> None:
        cur = len(self.t)
        if n < cur:
            raise ValueError("optimizer state can only grow; use compact() after pruning")
        if n == cur:
            return
        for k in PARAM_GROUPS:
            self.m[k] = np.concatenate([self.m[k], self._zeros(n - cur, k)])
            self.v[k] = np.concatenate([self.v[k], self._zeros(n - cur, k)])
        self.t = np.concatenate([self.t, np.zeros(n - cur, dtype=np.int64)])

    def compact(self, keep: np.ndarray) -> None:
        for k in PARAM_GROUPS:
            self.m[k] = self.m[k][keep]
            self.v[k] = self.v[k][keep]
        self.t = self.t[keep]

    def update(self, gmap: GaussianMap, grads, rows: Optional[np.ndarray] = None) -> None:
        """One Adam step on the rows touched by the render (all rows if None)."""
        self.resize(len(gmap))
        self.step += 1
        if rows is None:
            rows = np.arange(len(gmap))
        if rows.size == 0:
            return
        self.t[rows] += 1
        t = self.t[rows]
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        g_all = grads.as_dict()
        steps = {}
        for k in PARAM_GROUPS:
            g = g_all[k][rows]
            m = b1 * self.m[k][rows] + (1 - b1) * g
            v = b2 * self.v[k][rows] + (1 - b2) * g * g
            self.m[k][rows] = m
            self.v[k][rows] = v
            shape = (-1, 1) if m.ndim == 2 else (-1,)
            mhat = m / c1.reshape(shape)
            vhat = v / c2.reshape(shape)
            steps[k] = -getattr(self.lr, k) * mhat / (np.sqrt(vhat) + self.eps)

        gmap.means[rows] += steps["mean"]
        gmap.log_scales[rows] += steps["log_scale"]
        gmap.colors[rows] = np.clip(gmap.colors[rows] + steps["color"], 0.0, 1.0)
        gmap.log_betas[rows] += steps["log_beta"]
        gmap.opacity_logits[rows] = np.clip(
            gmap.opacity_logits[rows] + steps["opacity_logit"], -OPACITY_LOGIT_CLAMP, OPACITY_LOGIT_CLAMP
        )
        dq = steps["rotation"]
        moved = np.any(dq != 0, axis=1)
        if moved.any():
            r = rows[moved]
            q = quat_multiply(gmap.quats[r], quat_exp(dq[moved]))
            gmap.quats[r] = q / np.linalg.norm(q, axis=1, keepdims=True)


def optimize_step(
    gmap: GaussianMap,
    frames: Sequence[CameraFrame],
    weights: LossWeights,
    state: OptimizerState,
    settings: RenderSettings = DEFAULT_SETTINGS,
) -> float:
    """Render the next frame (round robin), backpropagate its loss, take one Adam step."""
    if not frames:
        raise ValueError("optimize_step needs at least one training frame")
    frame = frames[state.cursor % len(frames)]
    state.cursor += 1
    out, ctx = render_with_context(gmap, frame.pose, frame.intrinsics, settings)
    res = frame_loss(out, frame, weights)
    grads = backward_from_context(gmap, ctx, res.d_color, res.d_depth, accumulate=True)
    state.update(gmap, grads, rows=ctx.proj.index)
    return res.value


def prune(gmap: GaussianMap, opacity_floor: float = 0.005, state: Optional[OptimizerState] = None):
    """Remove Gaussians below ``opacity_floor``; returns ``(count, old->new remap)``."""
    keep = gmap.opacities >= opacity_floor
    removed = int((~keep).sum())
    if state is not None:
        state.resize(len(gmap))
        state.compact(keep)
    remap = gmap.keep(keep)
    return removed, remap

"""Rigid map deformation after keyframe pose corrections.

A pose update maps keyframe id -> (old pose, new pose). Every Gaussian moves
with the correction of the keyframe it was created from.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from onlinesplat.core import GaussianMap, Pose, quat_multiply

PoseUpdate = dict  # keyframe id -> (old Pose, new Pose)

GBA_EVERY = 30


def correction(old: Pose, new: Pose) -> Pose:
    """World-frame transform taking content seen from ``old`` to ``new``."""
    return new.compose(old.inverse())


def rigid_deform(gmap: GaussianMap, updates: PoseUpdate) -> GaussianMap:
    """Apply per-anchor corrections in place; scale, opacity, color and beta are untouched."""
    anchors = set(np.unique(gmap.source_kf).tolist())
    missing = anchors - set(updates)
    if missing:
        raise KeyError(f"no pose update for anchor keyframes {sorted(missing)}")
    for kf, (old, new) in updates.items():
        if kf not in gmap.keyframe_anchors:
            continue
        gmap.keyframe_anchors[kf] = new
        if old.same_as(new):
            continue
        rows = np.nonzero(gmap.source_kf == kf)[0]
        if rows.size == 0:
            continue
        delta = correction(old, new)
        gmap.means[rows] = delta.apply(gmap.means[rows])
        q = quat_multiply(delta.rotation, gmap.quats[rows])
        gmap.quats[rows] = q / np.linalg.norm(q, axis=1, keepdims=True)
    return gmap


def invert_updates(updates: PoseUpdate) -> PoseUpdate:
    return {k: (new, old) for k, (old, new) in updates.items()}


def simulate_gba(
    true_poses: Sequence[Pose],
    drifted_poses: Sequence[Pose],
    rho: float = 1.0,
    ids: Optional[Sequence[int]] = None,
) -> PoseUpdate:
    """Stand-in for global bundle adjustment: move every drifted pose a fraction
    ``rho`` along the SE(3) geodesic toward its true pose."""
    if len(true_poses) != len(drifted_poses):
        raise ValueError("true and drifted pose lists differ in length")
    if ids is None:
        ids = range(len(true_poses))
    elif len(ids) != len(true_poses):
        raise ValueError("ids must parallel the pose lists")
    updates: PoseUpdate = {}
    for i, t, d in zip(ids, true_poses, drifted_poses):
        if rho == 0.0 or d.same_as(t):
            updates[int(i)] = (d, d)
        else:
            updates[int(i)] = (d, d.interpolate(t, rho))
    return updates

"""Uncertainty-driven selection of non-keyframes for extra training."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from onlinesplat.core import CameraFrame, Gaussian, GaussianMap
from onlinesplat.rasterizer import DEFAULT_SETTINGS, RenderSettings, render_with_context

VISIBILITY_MIN_CONTRIBUTION = 0.01
DEFAULT_TOP_K = 10
DEFAULT_NMS_GAP = 3
DEFAULT_CANDIDATE_CAP = 100
DEFAULT_CARRYOVER = 20


@dataclass(frozen=True)
class UncertaintyWeights:
    shape: float = 0.7
    gradient: float = 0.3

    def __post_init__(self):
        if self.shape < 0 or self.gradient < 0:
            raise ValueError("uncertainty weights must be nonnegative")
        if self.shape + self.gradient <= 0:
            raise ValueError("uncertainty weights must not both be zero")

    def scaled(self, factor: float) -> "UncertaintyWeights":
        return UncertaintyWeights(self.shape * factor, self.gradient * factor)


@dataclass
class SelectionReport:
    candidate_ids: list
    gains: list
    sorted_order: list
    survivors_after_nms: list
    selected: list
    carryover: list
    gap: int = DEFAULT_NMS_GAP
    k: int = DEFAULT_TOP_K

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionReport":
        return cls(**d)

    def gain_of(self, frame_id: int) -> float:
        return self.gains[self.candidate_ids.index(frame_id)]


def gaussian_uncertainty(g: Gaussian, w: UncertaintyWeights = UncertaintyWeights()) -> float:
    """Shape term (largest covariance eigenvalue) plus gradient term."""
    return float(w.shape * np.max(g.scale**2) + w.gradient * g.grad_accum)


def uncertainties(gmap: GaussianMap, w: UncertaintyWeights = UncertaintyWeights()) -> np.ndarray:
    return w.shape * gmap.max_eigenvalues() + w.gradient * gmap.grad_accum


def visible_gaussians(
    gmap: GaussianMap,
    frame: CameraFrame,
    settings: RenderSettings = DEFAULT_SETTINGS,
    min_contribution: float = VISIBILITY_MIN_CONTRIBUTION,
) -> list[tuple[int, float]]:
    """Gaussians whose center projects inside the image and whose blending
    weight at that center pixel exceeds ``min_contribution``.

    The blending weight includes the transmittance left by splats in front,
    so occluded Gaussians are not counted.
    """
    _, ctx = render_with_context(gmap, frame.pose, frame.intrinsics, settings)
    proj = ctx.proj
    u, v = proj.mean2d[:, 0], proj.mean2d[:, 1]
    H, W = frame.intrinsics.height, frame.intrinsics.width
    inside = (u >= -0.5) & (u < W - 0.5) & (v >= -0.5) & (v < H - 0.5)
    vis = inside & (ctx.center_weight > min_contribution)
    return [(int(i), float(z)) for i, z in zip(proj.index[vis], proj.depth[vis])]


def information_gain(
    gmap: GaussianMap,
    frame: CameraFrame,
    w: UncertaintyWeights = UncertaintyWeights(),
    settings: RenderSettings = DEFAULT_SETTINGS,
    _unc: np.ndarray = None,
) -> float:
    """Sum of visible-Gaussian uncertainties weighted by inverse squared depth."""
    vis = visible_gaussians(gmap, frame, settings)
    if not vis:
        return 0.0
    unc = uncertainties(gmap, w) if _unc is None else _unc
    idx = np.array([i for i, _ in vis])
    z = np.array([d for _, d in vis])
    return float(np.sum(unc[idx] / (z * z)))


def nms_filter(sorted_ids: Sequence[int], gap: int = DEFAULT_NMS_GAP) -> list[int]:
    """Greedy suppression: keep an id only if it is more than ``gap`` frames
    away from every id kept before it."""
    kept: list[int] = []
    for fid in sorted_ids:
        if all(abs(fid - k) > gap for k in kept):
            kept.append(fid)
    return kept


def rank_by_gain(ids: Sequence[int], gains: Sequence[float]) -> list[int]:
    """Descending gain, ties broken by the lower frame id."""
    return [ids[i] for i in sorted(range(len(ids)), key=lambda i: (-gains[i], ids[i]))]


def select_views(
    gmap: GaussianMap,
    candidates: Sequence[CameraFrame],
    k: int = DEFAULT_TOP_K,
    gap: int = DEFAULT_NMS_GAP,
    w: UncertaintyWeights = UncertaintyWeights(),
    settings: RenderSettings = DEFAULT_SETTINGS,
    carryover: int = DEFAULT_CARRYOVER,
) -> SelectionReport:
    if not candidates:
        raise ValueError("select_views needs at least one candidate")
    if k < 1:
        raise ValueError("k must be at least 1")
    unc = uncertainties(gmap, w)
    ids = [int(f.id) for f in candidates]
    gains = [information_gain(gmap, f, w, settings, _unc=unc) for f in candidates]
    order = rank_by_gain(ids, gains)
    survivors = nms_filter(order, gap)
    return SelectionReport(
        candidate_ids=ids,
        gains=gains,
        sorted_order=order,
        survivors_after_nms=survivors,
        selected=survivors[:k],
        carryover=order[:carryover],
        gap=gap,
        k=k,
    )


def build_candidate_set(
    all_nonkeyframes: Iterable[int],
    recent_keyframe_span: tuple[int, int],
    previous_carryover: Iterable[int] = (),
    cap: int = DEFAULT_CANDIDATE_CAP,
) -> list[int]:
    """Non-keyframe ids inside ``[first, last]`` of the recent keyframe window,
    plus the previous round's carryover.

    When the union exceeds ``cap`` the window part is thinned with a uniform
    temporal stride; carryover ids are always kept.
    """
    lo, hi = recent_keyframe_span
    if lo > hi:
        raise ValueError("keyframe span must be ordered")
    carry = sorted(set(int(i) for i in previous_carryover))
    carry_set = set(carry)
    window = sorted({int(i) for i in all_nonkeyframes if lo <= i <= hi} - carry_set)
    room = max(cap - len(carry), 0)
    if len(carry) > cap:
        carry = [carry[i] for i in _uniform_indices(len(carry), cap)]
    if len(window) > room:
        window = [window[i] for i in _uniform_indices(len(window), room)]
    return sorted(window + carry)


def _uniform_indices(n: int, k: int) -> list[int]:
    if k <= 0:
        return []
    if k == 1:
        return [0]
    return sorted(set(np.round(np.linspace(0, n - 1, k)).astype(int).tolist()))

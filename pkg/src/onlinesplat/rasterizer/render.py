"""Forward and reverse-mode generalized-exponential splatting."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from onlinesplat.core import CameraFrame, Gaussian, GaussianMap, Intrinsics, Pose
from onlinesplat.rasterizer import _reference
from onlinesplat.rasterizer.projection import (
    GaussianGradients,
    Projected,
    RenderSettings,
    project_backward,
    project_map,
)

try:
    from onlinesplat.rasterizer import _kernels
except ImportError:  # extension not built
    _kernels = None

if os.environ.get("ONLINESPLAT_BACKEND", "").lower() == "python":
    _kernels = None

BACKEND = "cython" if _kernels is not None else "python"
DEFAULT_SETTINGS = RenderSettings()


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _kernels is not None else [])


def _resolve(backend: Optional[str]) -> str:
    backend = backend or BACKEND
    if backend == "cython" and _kernels is None:
        raise RuntimeError("compiled rasterizer is not available")
    if backend not in ("cython", "python"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    gaussian_index: int
    beta: float
    opacity: float = 1.0

    @property
    def conic(self) -> np.ndarray:
        return np.linalg.inv(self.cov2d)


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    per_pixel_contrib_counts: np.ndarray


@dataclass
class RenderContext:
    """Everything the backward pass needs from one forward pass."""

    proj: Projected
    intrinsics: Intrinsics
    settings: RenderSettings
    backend: str
    state: dict
    center_weight: np.ndarray


def project(
    g: Gaussian, frame: CameraFrame, settings: RenderSettings = DEFAULT_SETTINGS, index: int = 0
) -> Optional[Splat2D]:
    """Project one Gaussian; ``None`` when it is culled."""
    m = GaussianMap.from_gaussians([g])
    proj = project_map(m, frame.pose, frame.intrinsics, settings)
    if len(proj) == 0:
        return None
    return Splat2D(proj.mean2d[0], proj.cov2d[0], float(proj.depth[0]), index, float(proj.beta[0]), float(proj.opacity[0]))


def ges_weight(splat: Splat2D, pixel) -> float:
    """``exp(-(q/2)^beta)`` with ``q`` the Mahalanobis form under ``cov2d``."""
    d = np.asarray(pixel, dtype=np.float64) - splat.mean2d
    q = float(d @ np.linalg.solve(splat.cov2d, d))
    if q <= 0.0:
        return 1.0
    return float(np.exp(-((0.5 * q) ** splat.beta)))


def render_with_context(
    gmap: GaussianMap,
    pose: Pose,
    intr: Intrinsics,
    settings: RenderSettings = DEFAULT_SETTINGS,
    backend: Optional[str] = None,
) -> tuple[RenderOutput, RenderContext]:
    backend = _resolve(backend)
    proj = project_map(gmap, pose, intr, settings)
    H, W = intr.height, intr.width
    bg = settings.background_array
    if backend == "cython":
        offsets, ids = _kernels.bin_tiles(proj.bbox, H, W, settings.tile_size)
        color, depth, final_T, n_contrib, last, cw = _kernels.forward(
            np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
            np.ascontiguousarray(proj.opacity), np.ascontiguousarray(proj.beta),
            np.ascontiguousarray(proj.color), np.ascontiguousarray(proj.depth),
            np.ascontiguousarray(proj.qmax), proj.bbox, proj.center_px, offsets, ids, H, W, settings.tile_size, bg,
            settings.alpha_min, settings.alpha_max, settings.transmittance_min,
        )
        state = {"offsets": offsets, "ids": ids, "final_T": final_T, "last": last}
    else:
        res = _reference.forward(
            proj, H, W, bg, settings.alpha_min, settings.alpha_max, settings.transmittance_min
        )
        color, depth, final_T, n_contrib, cw = (
            res["color"], res["depth"], res["final_T"], res["n_contrib"], res["center_weight"],
        )
        state = res
    out = RenderOutput(color=color, depth=depth, alpha=1.0 - final_T, per_pixel_contrib_counts=n_contrib)
    ctx = RenderContext(proj, intr, settings, backend, state, cw)
    return out, ctx


def render(
    gmap: GaussianMap,
    frame: CameraFrame,
    settings: RenderSettings = DEFAULT_SETTINGS,
    backend: Optional[str] = None,
) -> RenderOutput:
    return render_with_context(gmap, frame.pose, frame.intrinsics, settings, backend)[0]


def render_pose(
    gmap: GaussianMap, pose: Pose, intr: Intrinsics, settings: RenderSettings = DEFAULT_SETTINGS
) -> RenderOutput:
    return render_with_context(gmap, pose, intr, settings)[0]


def backward_from_context(
    gmap: GaussianMap,
    ctx: RenderContext,
    d_color: np.ndarray,
    d_depth: Optional[np.ndarray] = None,
    accumulate: bool = True,
) -> GaussianGradients:
    intr = ctx.intrinsics
    H, W = intr.height, intr.width
    d_color = np.asarray(d_color, dtype=np.float64)
    if d_color.shape != (H, W, 3):
        raise ValueError(f"color adjoint has shape {d_color.shape}, expected {(H, W, 3)}")
    if d_depth is None:
        d_depth = np.zeros((H, W))
    d_depth = np.asarray(d_depth, dtype=np.float64)
    if d_depth.shape != (H, W):
        raise ValueError(f"depth adjoint has shape {d_depth.shape}, expected {(H, W)}")
    proj, s = ctx.proj, ctx.settings
    if len(proj) == 0:
        return GaussianGradients.zeros(len(gmap))
    bg = s.background_array
    if ctx.backend == "cython":
        st = ctx.state
        parts = _kernels.backward(
            np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
            np.ascontiguousarray(proj.opacity), np.ascontiguousarray(proj.beta),
            np.ascontiguousarray(proj.color), np.ascontiguousarray(proj.depth),
            np.ascontiguousarray(proj.qmax), proj.bbox, st["offsets"], st["ids"], st["final_T"], st["last"],
            np.ascontiguousarray(d_color), np.ascontiguousarray(d_depth),
            H, W, s.tile_size, bg, s.alpha_min, s.alpha_max,
        )
    else:
        parts = _reference.backward(
            proj, ctx.state, d_color, d_depth, bg, s.alpha_min, s.alpha_max, s.transmittance_min
        )
    grads = project_backward(proj, gmap, intr, *parts)
    if accumulate:
        gmap.accumulate_position_gradients(grads.mean, proj.index)
    return grads


def render_backward(
    gmap: GaussianMap,
    frame: CameraFrame,
    d_color: np.ndarray,
    d_depth: Optional[np.ndarray] = None,
    settings: RenderSettings = DEFAULT_SETTINGS,
    backend: Optional[str] = None,
    ctx: Optional[RenderContext] = None,
    accumulate: bool = True,
) -> GaussianGradients:
    """Gradients of a pixel loss, given its color/depth adjoints, on every Gaussian.

    Recomputes the forward pass unless its ``ctx`` is supplied. The position
    gradient magnitudes are folded into ``grad_accum`` when ``accumulate``.
    """
    H, W = frame.intrinsics.height, frame.intrinsics.width
    if np.shape(d_color) != (H, W, 3):
        raise ValueError(f"color adjoint has shape {np.shape(d_color)}, expected {(H, W, 3)}")
    if d_depth is not None and np.shape(d_depth) != (H, W):
        raise ValueError(f"depth adjoint has shape {np.shape(d_depth)}, expected {(H, W)}")
    if ctx is None:
        _, ctx = render_with_context(gmap, frame.pose, frame.intrinsics, settings, backend)
    return backward_from_context(gmap, ctx, d_color, d_depth, accumulate)

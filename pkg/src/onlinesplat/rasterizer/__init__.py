"""Differentiable generalized-exponential splatting.

The per-pixel compositing loops run in a compiled extension when it is built;
otherwise a vectorized numpy implementation is used. Set
``ONLINESPLAT_BACKEND=python`` to force the fallback.
"""

from onlinesplat.rasterizer.projection import GaussianGradients, Projected, RenderSettings, project_map
from onlinesplat.rasterizer.render import (
    BACKEND,
    DEFAULT_SETTINGS,
    RenderContext,
    RenderOutput,
    Splat2D,
    available_backends,
    backward_from_context,
    ges_weight,
    project,
    render,
    render_backward,
    render_pose,
    render_with_context,
)

__all__ = [
    "BACKEND",
    "DEFAULT_SETTINGS",
    "GaussianGradients",
    "Projected",
    "RenderContext",
    "RenderOutput",
    "RenderSettings",
    "Splat2D",
    "available_backends",
    "backward_from_context",
    "ges_weight",
    "project",
    "project_map",
    "render",
    "render_backward",
    "render_pose",
    "render_with_context",
]

"""Training objectives and image-quality metrics.

Every differentiable loss returns its value together with the per-pixel
adjoints that :func:`onlinesplat.rasterizer.render_backward` consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from onlinesplat.core import CameraFrame
from onlinesplat.rasterizer import RenderOutput

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 100.0
DEPTH_ALPHA_MIN = 0.5


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.95
    ssim: float = 0.2
    depth: float = 0.2
    smooth: float = 0.1

    def __post_init__(self):
        for name in ("l1", "ssim", "depth", "smooth"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass
class LossResult:
    value: float
    d_color: np.ndarray
    d_depth: np.ndarray
    terms: dict = field(default_factory=dict)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def l1(rendered, target) -> float:
    rendered, target = np.asarray(rendered, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check_shapes(rendered, target)
    return float(np.abs(rendered - target).mean())


def l1_grad(rendered, target) -> tuple[float, np.ndarray]:
    _check_shapes(rendered, target)
    diff = rendered - target
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def _gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


_TAPS = _gaussian_taps()
_R = SSIM_WINDOW // 2


def _blur_valid(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian over windows that lie fully inside the image."""
    y = correlate1d(x, _TAPS, axis=0, mode="constant")
    y = correlate1d(y, _TAPS, axis=1, mode="constant")
    return y[_R:-_R, _R:-_R]


def _blur_valid_adjoint(g: np.ndarray, shape) -> np.ndarray:
    full = np.zeros(shape)
    full[_R:-_R, _R:-_R] = g
    y = correlate1d(full, _TAPS, axis=0, mode="constant")
    return correlate1d(y, _TAPS, axis=1, mode="constant")


def _as_channels(img: np.ndarray) -> np.ndarray:
    return img[..., None] if img.ndim == 2 else img


def ssim_grad(rendered, target, want_grad: bool = True):
    """Mean SSIM (Gaussian window, sigma 1.5) and its gradient w.r.t. ``rendered``.

    The local statistics are evaluated only where the whole 11x11 window fits,
    so no boundary convention enters the value.
    """
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    _check_shapes(x, y)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    xs, ys = _as_channels(x), _as_channels(y)
    n_ch = xs.shape[2]
    total = 0.0
    grad = np.zeros_like(xs) if want_grad else None
    for ch in range(n_ch):
        a, b = xs[..., ch], ys[..., ch]
        mu_x, mu_y = _blur_valid(a), _blur_valid(b)
        exx, eyy, exy = _blur_valid(a * a), _blur_valid(b * b), _blur_valid(a * b)
        vx = exx - mu_x * mu_x
        vy = eyy - mu_y * mu_y
        cxy = exy - mu_x * mu_y
        num1 = 2 * mu_x * mu_y + SSIM_C1
        num2 = 2 * cxy + SSIM_C2
        den1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
        den2 = vx + vy + SSIM_C2
        smap = num1 * num2 / (den1 * den2)
        count = smap.size
        total += smap.mean()
        if want_grad:
            g = 1.0 / (count * n_ch)
            # partials of the SSIM map w.r.t. the blurred moments of x
            d_mux = g * smap * (2 * mu_y / num1 - 2 * mu_y / num2 - 2 * mu_x / den1 + 2 * mu_x / den2)
            d_exx = g * smap * (-1.0 / den2)
            d_exy = g * smap * (2.0 / num2)
            grad[..., ch] = (
                _blur_valid_adjoint(d_mux, a.shape)
                + 2 * a * _blur_valid_adjoint(d_exx, a.shape)
                + b * _blur_valid_adjoint(d_exy, a.shape)
            )
    value = total / n_ch
    if want_grad:
        return float(value), grad.reshape(x.shape)
    return float(value)


def ssim(rendered, target) -> float:
    return ssim_grad(rendered, target, want_grad=False)


def depth_mask(target_depth: np.ndarray, rendered_alpha: np.ndarray) -> np.ndarray:
    return (target_depth > 0) & (rendered_alpha > DEPTH_ALPHA_MIN)


def depth_l1(rendered_depth, target_depth, valid_mask) -> float:
    return depth_l1_grad(rendered_depth, target_depth, valid_mask)[0]


def depth_l1_grad(rendered_depth, target_depth, valid_mask) -> tuple[float, np.ndarray]:
    rd = np.asarray(rendered_depth, dtype=np.float64)
    td = np.asarray(target_depth, dtype=np.float64)
    mask = np.asarray(valid_mask, dtype=bool)
    _check_shapes(rd, td)
    _check_shapes(rd, mask)
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(rd)
    diff = np.where(mask, rd - td, 0.0)
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def smoothness(depth) -> float:
    return smoothness_grad(depth)[0]


def smoothness_grad(depth) -> tuple[float, np.ndarray]:
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] < 2 or d.shape[1] < 2:
        raise ValueError("smoothness needs a 2D map of at least 2x2")
    dx = d[:, :-1] - d[:, 1:]
    dy = d[:-1, :] - d[1:, :]
    value = np.abs(dx).mean() + np.abs(dy).mean()
    sx = np.sign(dx) / dx.size
    sy = np.sign(dy) / dy.size
    grad = np.zeros_like(d)
    grad[:, :-1] += sx
    grad[:, 1:] -= sx
    grad[:-1, :] += sy
    grad[1:, :] -= sy
    return float(value), grad


def psnr(rendered, target, cap: float = PSNR_CAP) -> float:
    rendered, target = np.asarray(rendered, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check_shapes(rendered, target)
    mse = float(np.mean((rendered - target) ** 2))
    if mse <= 0.0:
        return cap
    return float(min(cap, 10.0 * np.log10(1.0 / mse)))


def _image_terms(out: RenderOutput, frame: CameraFrame, w: LossWeights):
    terms = {}
    value = 0.0
    d_color = np.zeros_like(out.color)
    d_depth = np.zeros_like(out.depth)
    if w.l1:
        v, g = l1_grad(out.color, frame.image)
        terms["l1"] = v
        value += w.l1 * v
        d_color += w.l1 * g
    if w.ssim:
        v, g = ssim_grad(out.color, frame.image)
        terms["ssim"] = 1.0 - v
        value += w.ssim * (1.0 - v)
        d_color -= w.ssim * g
    if w.smooth:
        v, g = smoothness_grad(out.depth)
        terms["smooth"] = v
        value += w.smooth * v
        d_depth += w.smooth * g
    return value, d_color, d_depth, terms


def keyframe_loss(out: RenderOutput, frame: CameraFrame, w: LossWeights = LossWeights()) -> LossResult:
    """Photometric, SSIM, depth and smoothness terms for a frame with depth."""
    if frame.depth is None:
        raise ValueError("keyframe loss needs a target depth map")
    value, d_color, d_depth, terms = _image_terms(out, frame, w)
    if w.depth:
        mask = depth_mask(frame.depth, out.alpha)
        v, g = depth_l1_grad(out.depth, frame.depth, mask)
        terms["depth"] = v
        value += w.depth * v
        d_depth += w.depth * g
    return LossResult(float(value), d_color, d_depth, terms)


def nonkeyframe_loss(out: RenderOutput, frame: CameraFrame, w: LossWeights = LossWeights()) -> LossResult:
    """Same as :func:`keyframe_loss` without the depth term."""
    value, d_color, d_depth, terms = _image_terms(out, frame, w)
    return LossResult(float(value), d_color, d_depth, terms)


def frame_loss(out: RenderOutput, frame: CameraFrame, w: LossWeights = LossWeights()) -> LossResult:
    if frame.is_keyframe:
        return keyframe_loss(out, frame, w)
    return nonkeyframe_loss(out, frame, w)

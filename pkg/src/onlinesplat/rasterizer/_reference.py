"""Pure-numpy rasterization kernels.

Used when the compiled extension is unavailable, and as a second route in the
tests. Splats are composited one at a time over their footprint, with the
per-pixel state (transmittance, termination flag) held in image-sized arrays.
"""

from __future__ import annotations

import numpy as np


def _splat_alpha(mean2d, conic, opacity, beta, bbox, alpha_min, alpha_max):
    """Alpha over the splat's footprint plus the intermediates the backward pass needs."""
    x0, x1, y0, y1 = (int(v) for v in bbox)
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    dx = xs[None, :] - mean2d[0]
    dy = ys[:, None] - mean2d[1]
    q = conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy
    half = 0.5 * q
    with np.errstate(divide="ignore"):
        p = np.where(half > 0, np.exp(beta * np.log(np.where(half > 0, half, 1.0))), 0.0)
    w = np.exp(-p)
    raw = opacity * w
    alpha = np.minimum(raw, alpha_max)
    live = raw >= alpha_min
    return (slice(y0, y1 + 1), slice(x0, x1 + 1)), dx, dy, q, p, w, raw, alpha, live


def forward(proj, height, width, background, alpha_min, alpha_max, t_min):
    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    T = np.ones((height, width))
    done = np.zeros((height, width), dtype=bool)
    n_contrib = np.zeros((height, width), dtype=np.int32)
    m = len(proj)
    center_weight = np.zeros(m)
    saved = []
    for j in range(m):
        x0, x1, y0, y1 = proj.bbox[j]
        if x0 > x1 or y0 > y1:
            saved.append(None)
            continue
        win, dx, dy, q, p, w, raw, alpha, live = _splat_alpha(
            proj.mean2d[j], proj.conic[j], proj.opacity[j], proj.beta[j], proj.bbox[j], alpha_min, alpha_max
        )
        Tw = T[win]
        active = live & ~done[win]
        test_T = Tw * (1.0 - alpha)
        stop = active & (test_T < t_min)
        done[win] |= stop
        active &= ~stop
        weight = np.where(active, alpha * Tw, 0.0)
        color[win] += weight[..., None] * proj.color[j]
        depth[win] += weight * proj.depth[j]
        n_contrib[win] += active
        cx, cy = proj.center_px[j]
        if x0 <= cx <= x1 and y0 <= cy <= y1:
            center_weight[j] = weight[cy - y0, cx - x0]
        saved.append((win, dx, dy, q, p, w, raw, alpha, active, Tw.copy()))
        T[win] = np.where(active, test_T, Tw)
    color += T[..., None] * background
    return {
        "color": color,
        "depth": depth,
        "final_T": T,
        "n_contrib": n_contrib,
        "center_weight": center_weight,
        "saved": saved,
    }


def backward(proj, ctx, d_color_img, d_depth_img, background, alpha_min, alpha_max, t_min):
    m = len(proj)
    d_mean2d = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_opacity = np.zeros(m)
    d_color = np.zeros((m, 3))
    d_depth = np.zeros(m)
    d_beta = np.zeros(m)
    behind_c = ctx["final_T"][..., None] * background
    behind_d = np.zeros_like(ctx["final_T"])
    for j in range(m - 1, -1, -1):
        rec = ctx["saved"][j]
        if rec is None:
            continue
        win, dx, dy, q, p, w, raw, alpha, active, Tw = rec
        if not active.any():
            continue
        gC = d_color_img[win]
        gD = d_depth_img[win]
        bc = behind_c[win]
        bd = behind_d[win]
        one_minus = 1.0 - alpha
        weight = np.where(active, alpha * Tw, 0.0)
        c = proj.color[j]
        z = proj.depth[j]
        dl_dalpha = (gC * (c[None, None, :] * Tw[..., None] - bc / one_minus[..., None])).sum(-1)
        dl_dalpha += gD * (z * Tw - bd / one_minus)
        dl_dalpha = np.where(active, dl_dalpha, 0.0)
        d_color[j] = (gC * weight[..., None]).sum(axis=(0, 1))
        d_depth[j] = (gD * weight).sum()

        # clamped alpha carries no gradient to the splat parameters
        g = np.where(raw <= alpha_max, dl_dalpha, 0.0)
        o = proj.opacity[j]
        beta = proj.beta[j]
        d_opacity[j] = (g * w).sum()
        dl_dp = -g * o * w
        pos = q > 0
        safe_q = np.where(pos, q, 1.0)
        dl_dq = np.where(pos, dl_dp * beta * p / safe_q, 0.0)
        d_beta[j] = np.where(pos, dl_dp * p * np.log(0.5 * safe_q), 0.0).sum()
        a, b, cc = proj.conic[j]
        d_conic[j, 0] = (dl_dq * dx * dx).sum()
        d_conic[j, 1] = (dl_dq * 2.0 * dx * dy).sum()
        d_conic[j, 2] = (dl_dq * dy * dy).sum()
        d_mean2d[j, 0] = (dl_dq * -2.0 * (a * dx + b * dy)).sum()
        d_mean2d[j, 1] = (dl_dq * -2.0 * (b * dx + cc * dy)).sum()

        behind_c[win] = bc + weight[..., None] * c
        behind_d[win] = bd + weight * z
    return d_mean2d, d_conic, d_opacity, d_color, d_depth, d_beta

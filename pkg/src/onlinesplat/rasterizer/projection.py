"""EWA projection of a Gaussian map into one camera, and its reverse-mode pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from onlinesplat.core import OPACITY_LOGIT_CLAMP, GaussianMap, Intrinsics, Pose


@dataclass(frozen=True)
class RenderSettings:
    """Rasterization constants. The defaults mirror common splatting practice."""

    background: tuple = (0.0, 0.0, 0.0)
    low_pass: float = 0.3
    alpha_max: float = 0.999
    transmittance_min: float = 1e-4
    # splats contribute only where alpha >= alpha_min; this also sizes the
    # screen-space footprint of every splat
    alpha_min: float = 1e-6
    cull_sigma: float = 3.0
    znear: float = 0.01
    # centers beyond this multiple of the half-FOV tangent are culled; the
    # linearized projection is meaningless for splats beside the camera
    guard_band: float = 1.3
    max_condition: float = 1e8
    tile_size: int = 16

    @property
    def background_array(self) -> np.ndarray:
        return np.asarray(self.background, dtype=np.float64).reshape(3)


@dataclass
class Projected:
    """Projected splats that survived culling, sorted front to back.

    ``index`` maps each row back to the Gaussian map.
    """

    index: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    beta: np.ndarray
    color: np.ndarray
    bbox: np.ndarray
    center_px: np.ndarray
    # cached for the backward pass
    mean_cam: np.ndarray
    jac: np.ndarray
    world_to_cam: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    cov3d: np.ndarray
    n_total: int
    # largest quadratic form at which a splat can still reach alpha_min
    qmax: np.ndarray = None

    def __len__(self) -> int:
        return self.index.shape[0]


def _empty(n_total: int, W: np.ndarray) -> Projected:
    z = np.zeros
    return Projected(
        index=z(0, dtype=np.int64), mean2d=z((0, 2)), cov2d=z((0, 2, 2)), conic=z((0, 3)),
        depth=z(0), opacity=z(0), beta=z(0), color=z((0, 3)), bbox=z((0, 4), dtype=np.int32),
        center_px=z((0, 2), dtype=np.int32), mean_cam=z((0, 3)), jac=z((0, 2, 3)),
        world_to_cam=W, rot=z((0, 3, 3)), scale=z((0, 3)), cov3d=z((0, 3, 3)), n_total=n_total,
        qmax=z(0),
    )


def project_map(gmap: GaussianMap, pose: Pose, intr: Intrinsics, settings: RenderSettings) -> Projected:
    n = len(gmap)
    W = pose.rotation_matrix.T  # world -> camera rotation
    if n == 0:
        return _empty(0, W)

    mean_cam = (gmap.means - pose.translation) @ W.T
    z = mean_cam[:, 2]
    ok = z > settings.znear
    zs = np.where(ok, z, 1.0)
    ok &= np.abs(mean_cam[:, 0] / zs) <= settings.guard_band * intr.width / (2 * intr.fx)
    ok &= np.abs(mean_cam[:, 1] / zs) <= settings.guard_band * intr.height / (2 * intr.fy)
    idx = np.nonzero(ok)[0]
    if idx.size == 0:
        return _empty(n, W)

    mc = mean_cam[idx]
    x, y, z = mc[:, 0], mc[:, 1], mc[:, 2]
    fx, fy = intr.fx, intr.fy
    u = fx * x / z + intr.cx
    v = fy * y / z + intr.cy

    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / (z * z)

    R = gmap.rotation_matrices()[idx]
    s = gmap.scales[idx]
    cov3 = (R * (s * s)[:, None, :]) @ np.swapaxes(R, 1, 2)
    M = J @ W
    cov2 = M @ cov3 @ np.swapaxes(M, 1, 2)
    cov2[:, 0, 0] += settings.low_pass
    cov2[:, 1, 1] += settings.low_pass

    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(half_tr * half_tr - det, 0.0))
    lmax = half_tr + disc
    lmin = half_tr - disc
    well_cond = (det > 0) & (lmin > 0) & (lmax <= settings.max_condition * np.maximum(lmin, 1e-300))

    sig = np.sqrt(np.maximum(lmax, 0.0))
    margin = settings.cull_sigma * sig
    on_screen = (
        (u + margin >= -0.5) & (u - margin <= intr.width - 0.5)
        & (v + margin >= -0.5) & (v - margin <= intr.height - 0.5)
    )
    keep = well_cond & on_screen
    sel = np.nonzero(keep)[0]
    if sel.size == 0:
        return _empty(n, W)

    order = sel[np.argsort(z[sel], kind="stable")]
    gidx = idx[order]
    a, b, c, det = a[order], b[order], c[order], det[order]
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    opac = gmap.opacities[gidx]
    beta = gmap.betas[gidx]
    u, v = u[order], v[order]

    # footprint: the region where opacity * weight can reach alpha_min
    ratio = np.log(np.maximum(opac, 1e-300) / settings.alpha_min)
    qmax = np.where(ratio > 0, 2.0 * np.power(np.maximum(ratio, 0.0), 1.0 / beta), 0.0)
    rx = np.sqrt(qmax * a)
    ry = np.sqrt(qmax * c)
    x0 = np.ceil(u - rx) - 1
    x1 = np.floor(u + rx) + 1
    y0 = np.ceil(v - ry) - 1
    y1 = np.floor(v + ry) + 1
    bbox = np.stack(
        [
            np.clip(x0, 0, intr.width),
            np.clip(x1, -1, intr.width - 1),
            np.clip(y0, 0, intr.height),
            np.clip(y1, -1, intr.height - 1),
        ],
        axis=1,
    ).astype(np.int32)
    bbox[ratio <= 0] = (1, 0, 1, 0)
    center = np.stack(
        [np.clip(np.rint(u), 0, intr.width - 1), np.clip(np.rint(v), 0, intr.height - 1)], axis=1
    ).astype(np.int32)

    return Projected(
        index=gidx,
        mean2d=np.stack([u, v], axis=1),
        cov2d=cov2[order],
        conic=conic,
        depth=mc[order, 2].copy(),
        opacity=opac,
        beta=beta,
        color=gmap.colors[gidx],
        bbox=bbox,
        center_px=center,
        mean_cam=mc[order],
        jac=J[order],
        world_to_cam=W,
        rot=R[order],
        scale=s[order],
        cov3d=cov3[order],
        n_total=n,
        qmax=qmax,
    )


@dataclass
class GaussianGradients:
    """Loss gradients on the unconstrained parameters of every Gaussian.

    ``rotation`` is the gradient w.r.t. a local tangent perturbation
    ``q <- q * exp(delta)``.
    """

    mean: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    log_beta: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GaussianGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)), np.zeros(n))

    def as_dict(self) -> dict:
        return {
            "mean": self.mean, "rotation": self.rotation, "log_scale": self.log_scale,
            "opacity_logit": self.opacity_logit, "color": self.color, "log_beta": self.log_beta,
        }

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.as_dict().values())


def project_backward(
    proj: Projected,
    gmap: GaussianMap,
    intr: Intrinsics,
    d_mean2d: np.ndarray,
    d_conic: np.ndarray,
    d_opacity: np.ndarray,
    d_color: np.ndarray,
    d_depth: np.ndarray,
    d_beta: np.ndarray,
) -> GaussianGradients:
    """Chain per-splat screen-space gradients back to map parameters."""
    grads = GaussianGradients.zeros(proj.n_total)
    m = len(proj)
    if m == 0:
        return grads

    # conic = inverse(cov2d); the off-diagonal conic entry appears twice
    A = np.empty((m, 2, 2))
    A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2]
    GA = np.empty((m, 2, 2))
    GA[:, 0, 0] = d_conic[:, 0]
    GA[:, 0, 1] = GA[:, 1, 0] = 0.5 * d_conic[:, 1]
    GA[:, 1, 1] = d_conic[:, 2]
    Gcov2 = -A @ GA @ A

    W = proj.world_to_cam
    J = proj.jac
    M = J @ W
    Gcov3 = np.swapaxes(M, 1, 2) @ Gcov2 @ M
    GM = 2.0 * Gcov2 @ M @ proj.cov3d
    GJ = GM @ W.T

    x, y, z = proj.mean_cam[:, 0], proj.mean_cam[:, 1], proj.mean_cam[:, 2]
    fx, fy = intr.fx, intr.fy
    du, dv = d_mean2d[:, 0], d_mean2d[:, 1]
    z2 = z * z
    z3 = z2 * z
    dmc = np.empty((m, 3))
    dmc[:, 0] = du * fx / z - GJ[:, 0, 2] * fx / z2
    dmc[:, 1] = dv * fy / z - GJ[:, 1, 2] * fy / z2
    dmc[:, 2] = (
        -du * fx * x / z2 - dv * fy * y / z2
        - GJ[:, 0, 0] * fx / z2 + GJ[:, 0, 2] * 2 * fx * x / z3
        - GJ[:, 1, 1] * fy / z2 + GJ[:, 1, 2] * 2 * fy * y / z3
        + d_depth
    )
    dmean = dmc @ W  # W^T applied to row vectors

    R = proj.rot
    s2 = proj.scale**2
    local = np.swapaxes(R, 1, 2) @ Gcov3 @ R  # R^T G R
    dlog_s = 2.0 * s2 * np.diagonal(local, axis1=1, axis2=2)
    Mloc = 2.0 * local * s2[:, None, :]  # R^T dL/dR = 2 (R^T G R) diag(s^2)
    drot = np.stack(
        [Mloc[:, 2, 1] - Mloc[:, 1, 2], Mloc[:, 0, 2] - Mloc[:, 2, 0], Mloc[:, 1, 0] - Mloc[:, 0, 1]], axis=1
    )

    o = proj.opacity
    logits = gmap.opacity_logits[proj.index]
    dlogit = np.where(np.abs(logits) <= OPACITY_LOGIT_CLAMP, d_opacity * o * (1.0 - o), 0.0)

    gi = proj.index
    grads.mean[gi] = dmean
    grads.rotation[gi] = drot
    grads.log_scale[gi] = dlog_s
    grads.opacity_logit[gi] = dlogit
    grads.color[gi] = d_color
    grads.log_beta[gi] = d_beta * proj.beta
    return grads

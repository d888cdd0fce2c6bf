"""Geometry and scene primitives: quaternions, SE(3) poses, cameras, Gaussians.

Quaternions are scalar-first ``(w, x, y, z)``. A :class:`Pose` maps camera
coordinates into world coordinates (world <- camera); cameras follow the
OpenCV convention (+z forward, +y down).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

KEYFRAME = "keyframe"
NON_KEYFRAME = "non-keyframe"

OPACITY_LOGIT_CLAMP = 12.0


# ---------------------------------------------------------------------------
# quaternion / rotation helpers (vectorized over leading axes)
# ---------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for (possibly batched) unit quaternions."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) for a single rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return q if q[0] >= 0 else -q


def quat_exp(v: np.ndarray) -> np.ndarray:
    """Quaternion of the rotation vector ``v`` (axis * angle)."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x/2)/x, with a series for tiny angles
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * v], axis=-1)


def quat_log(q: np.ndarray) -> np.ndarray:
    """Rotation vector of a unit quaternion (shortest arc)."""
    q = np.asarray(q, dtype=np.float64)
    q = np.where(q[..., :1] < 0, -q, q)
    w = np.clip(q[..., :1], -1.0, 1.0)
    xyz = q[..., 1:]
    n = np.linalg.norm(xyz, axis=-1, keepdims=True)
    small = n < 1e-12
    angle = 2.0 * np.arctan2(n, w)
    k = np.where(small, 2.0 / np.where(w == 0, 1.0, w), angle / np.where(small, 1.0, n))
    return k * xyz


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    t2 = theta * theta
    return np.eye(3) + (1 - np.cos(theta)) / t2 * K + (theta - np.sin(theta)) / (t2 * theta) * K @ K


def _so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    half = 0.5 * theta
    coef = (1.0 - half * np.cos(half) / np.sin(half)) / (theta * theta)
    return np.eye(3) - 0.5 * K + coef * K @ K


# ---------------------------------------------------------------------------
# SE(3)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform world <- camera."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("pose rotation must be a nonzero finite quaternion")
        if abs(n - 1.0) > 1e-15:
            q = q / n
        q.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def exp(cls, xi: np.ndarray) -> "Pose":
        """SE(3) exponential of ``xi = (rho, phi)`` (translation part first)."""
        xi = np.asarray(xi, dtype=np.float64)
        rho, phi = xi[:3], xi[3:]
        return cls(quat_exp(phi), _so3_left_jacobian(phi) @ rho)

    def log(self) -> np.ndarray:
        phi = quat_log(self.rotation)
        rho = _so3_left_jacobian_inv(phi) @ self.translation
        return np.concatenate([rho, phi])

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        q = quat_multiply(self.rotation, other.rotation)
        t = self.rotation_matrix @ other.translation + self.translation
        return Pose(q, t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.rotation)
        return Pose(qi, -(quat_to_matrix(qi) @ self.translation))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Transform one point ``(3,)`` or a batch ``(N, 3)``."""
        x = np.asarray(x, dtype=np.float64)
        return x @ self.rotation_matrix.T + self.translation

    def interpolate(self, other: "Pose", rho: float) -> "Pose":
        """Point a fraction ``rho`` along the SE(3) geodesic to ``other``."""
        if rho == 0.0:
            return self
        delta = self.inverse().compose(other).log()
        return self.compose(Pose.exp(rho * delta))

    def angle_to(self, other: "Pose") -> float:
        rel = quat_multiply(quat_conjugate(self.rotation), other.rotation)
        return float(np.linalg.norm(quat_log(rel)))

    def distance_to(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.translation - other.translation))

    def same_as(self, other: "Pose", tol: float = 0.0) -> bool:
        """Exact equality, or rotation angle and translation both within ``tol``."""
        if tol == 0.0:
            return np.array_equal(self.rotation, other.rotation) and np.array_equal(
                self.translation, other.translation
            )
        return self.angle_to(other) <= tol and self.distance_to(other) <= tol

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(d["rotation"], d["translation"])

    def __repr__(self):
        return f"Pose(q={np.round(self.rotation, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def transform_point(p: Pose, x: np.ndarray) -> np.ndarray:
    return p.apply(x)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose at ``eye`` whose optical axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    return Pose(matrix_to_quat(R), eye)


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float = 60.0) -> "Intrinsics":
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, factor: float) -> "Intrinsics":
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        return Intrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor, w, h)


@dataclass
class CameraFrame:
    """One posed observation. Keyframes carry depth, non-keyframes never do."""

    id: int
    pose: Pose
    intrinsics: Intrinsics
    image: np.ndarray
    depth: Optional[np.ndarray] = None
    role: str = KEYFRAME
    timestamp: Optional[float] = None

    def __post_init__(self):
        if self.role not in (KEYFRAME, NON_KEYFRAME):
            raise ValueError(f"unknown frame role {self.role!r}")
        h, w = self.intrinsics.shape
        if self.image.shape != (h, w, 3):
            raise ValueError(f"image shape {self.image.shape} does not match intrinsics {(h, w)}")
        if self.role == KEYFRAME and self.depth is None:
            raise ValueError("keyframes must carry a depth map")
        if self.role == NON_KEYFRAME and self.depth is not None:
            raise ValueError("non-keyframes must not carry depth")
        if self.depth is not None and self.depth.shape != (h, w):
            raise ValueError("depth shape does not match intrinsics")

    @property
    def is_keyframe(self) -> bool:
        return self.role == KEYFRAME

    def as_nonkeyframe(self) -> "CameraFrame":
        return CameraFrame(self.id, self.pose, self.intrinsics, self.image, None, NON_KEYFRAME, self.timestamp)

    def with_pose(self, pose: Pose) -> "CameraFrame":
        return CameraFrame(self.id, pose, self.intrinsics, self.image, self.depth, self.role, self.timestamp)


# ---------------------------------------------------------------------------
# Gaussians
# ---------------------------------------------------------------------------


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussian:
    """A single splatting primitive, in its constrained (exposed) form."""

    mean: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    beta: float = 1.0
    grad_accum: float = 0.0
    source_keyframe: int = 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.rotation = quat_normalize(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if np.any(self.scale <= 0):
            raise ValueError("scales must be strictly positive")
        if self.beta <= 0:
            raise ValueError("beta must be strictly positive")
        self.opacity = float(np.clip(self.opacity, 0.0, 1.0))


def covariance(g: Gaussian) -> np.ndarray:
    """``R diag(s^2) R^T``."""
    R = quat_to_matrix(g.rotation)
    return (R * g.scale**2) @ R.T


def max_eigenvalue(g: Gaussian) -> float:
    # closed form: the eigenvalues of R diag(s^2) R^T are s^2
    return float(np.max(g.scale**2))


class GaussianMap:
    """Growable scene model stored as parameter arrays.

    Parameters live on their unconstrained scale (log scale, opacity logit,
    log beta) so that optimizer steps cannot break the type invariants.
    """

    _ARRAYS = (
        "means", "quats", "log_scales", "opacity_logits", "colors",
        "log_betas", "grad_accum", "grad_count", "source_kf",
    )

    def __init__(self):
        self.means = np.zeros((0, 3))
        self.quats = np.zeros((0, 4))
        self.log_scales = np.zeros((0, 3))
        self.opacity_logits = np.zeros(0)
        self.colors = np.zeros((0, 3))
        self.log_betas = np.zeros(0)
        self.grad_accum = np.zeros(0)
        self.grad_count = np.zeros(0, dtype=np.int64)
        self.source_kf = np.zeros(0, dtype=np.int64)
        self.keyframe_anchors: dict[int, Pose] = {}

    def __len__(self) -> int:
        return self.means.shape[0]

    # -- constrained views ---------------------------------------------------

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(np.clip(self.opacity_logits, -OPACITY_LOGIT_CLAMP, OPACITY_LOGIT_CLAMP))

    @property
    def betas(self) -> np.ndarray:
        return np.exp(self.log_betas)

    def rotation_matrices(self) -> np.ndarray:
        return quat_to_matrix(self.quats)

    def covariances(self) -> np.ndarray:
        R = self.rotation_matrices()
        return (R * self.scales[:, None, :] ** 2) @ np.swapaxes(R, 1, 2)

    def max_eigenvalues(self) -> np.ndarray:
        return np.max(self.scales**2, axis=1)

    # -- construction ---------------------------------------------------------

    def add(
        self,
        means,
        colors,
        scales,
        opacities,
        source_keyframe,
        *,
        quats=None,
        betas=None,
    ) -> np.ndarray:
        """Append Gaussians; returns the indices of the new entries."""
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        n = means.shape[0]
        colors = np.broadcast_to(np.asarray(colors, dtype=np.float64), (n, 3))
        scales = np.asarray(scales, dtype=np.float64)
        if scales.ndim == 1 and scales.size == n and n != 3:
            # one isotropic scale per Gaussian
            scales = scales[:, None]
        scales = np.broadcast_to(scales, (n, 3))
        if np.any(scales <= 0):
            raise ValueError("scales must be strictly positive")
        opacities = np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,))
        if quats is None:
            quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        quats = quat_normalize(np.broadcast_to(np.asarray(quats, dtype=np.float64), (n, 4)))
        betas = np.ones(n) if betas is None else np.broadcast_to(np.asarray(betas, dtype=np.float64), (n,))
        if np.any(betas <= 0):
            raise ValueError("beta must be strictly positive")
        src = np.broadcast_to(np.asarray(source_keyframe, dtype=np.int64), (n,))
        missing = set(np.unique(src).tolist()) - set(self.keyframe_anchors)
        if missing:
            raise KeyError(f"no keyframe anchor registered for {sorted(missing)}")
        start = len(self)
        op = np.clip(opacities, 1e-12, 1 - 1e-12)
        self.means = np.concatenate([self.means, means])
        self.quats = np.concatenate([self.quats, quats])
        self.log_scales = np.concatenate([self.log_scales, np.log(scales)])
        self.opacity_logits = np.concatenate(
            [self.opacity_logits, np.clip(logit(op), -OPACITY_LOGIT_CLAMP, OPACITY_LOGIT_CLAMP)]
        )
        self.colors = np.concatenate([self.colors, colors])
        self.log_betas = np.concatenate([self.log_betas, np.log(betas)])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(n)])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(n, dtype=np.int64)])
        self.source_kf = np.concatenate([self.source_kf, src])
        return np.arange(start, start + n)

    def add_gaussian(self, g: Gaussian) -> int:
        idx = self.add(g.mean, g.color, g.scale, g.opacity, g.source_keyframe, quats=g.rotation, betas=g.beta)
        self.grad_accum[idx] = g.grad_accum
        return int(idx[0])

    @classmethod
    def from_gaussians(cls, gaussians, anchors: Optional[dict] = None) -> "GaussianMap":
        m = cls()
        m.keyframe_anchors = dict(anchors) if anchors else {}
        for g in gaussians:
            m.keyframe_anchors.setdefault(int(g.source_keyframe), Pose.identity())
            m.add_gaussian(g)
        return m

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i].copy(),
            rotation=self.quats[i].copy(),
            scale=self.scales[i],
            opacity=float(self.opacities[i]),
            color=self.colors[i].copy(),
            beta=float(self.betas[i]),
            grad_accum=float(self.grad_accum[i]),
            source_keyframe=int(self.source_kf[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self.gaussian(i)

    def copy(self) -> "GaussianMap":
        m = GaussianMap()
        for name in self._ARRAYS:
            setattr(m, name, getattr(self, name).copy())
        m.keyframe_anchors = dict(self.keyframe_anchors)
        return m

    def keep(self, mask: np.ndarray) -> np.ndarray:
        """Drop entries where ``mask`` is False; returns the old->new remap (-1 if removed)."""
        mask = np.asarray(mask, dtype=bool)
        remap = np.full(len(self), -1, dtype=np.int64)
        remap[mask] = np.arange(int(mask.sum()))
        for name in self._ARRAYS:
            setattr(self, name, getattr(self, name)[mask])
        return remap

    def reset_grad_accum(self) -> None:
        self.grad_accum[:] = 0.0
        self.grad_count[:] = 0

    def accumulate_position_gradients(self, dmu: np.ndarray, touched: np.ndarray) -> None:
        """Fold ``||dmu||`` into the running means of the Gaussians in ``touched``."""
        idx = np.asarray(touched, dtype=np.int64)
        if idx.size == 0:
            return
        mag = np.linalg.norm(dmu[idx], axis=1)
        n = self.grad_count[idx]
        self.grad_accum[idx] = (self.grad_accum[idx] * n + mag) / (n + 1)
        self.grad_count[idx] = n + 1

    def validate(self) -> None:
        if not np.all(np.isfinite(self.means)):
            raise ValueError("non-finite means")
        if not np.all(np.isfinite(self.log_scales)):
            raise ValueError("non-finite scales")
        if not np.allclose(np.linalg.norm(self.quats, axis=1), 1.0, atol=1e-9):
            raise ValueError("rotations are not unit quaternions")
        if np.any(np.abs(self.opacity_logits) > OPACITY_LOGIT_CLAMP):
            raise ValueError("opacity logit outside clamp range")
        missing = set(np.unique(self.source_kf).tolist()) - set(self.keyframe_anchors)
        if missing:
            raise ValueError(f"gaussians reference unknown keyframes {sorted(missing)}")

    def extent(self) -> float:
        """Diagonal of the bounding box of the means (1.0 for empty maps)."""
        if len(self) < 2:
            return 1.0
        d = float(np.linalg.norm(self.means.max(axis=0) - self.means.min(axis=0)))
        return d if d > 0 else 1.0

"""Pinhole camera with radial/tangential distortion and TOF range measurements.

Projection chain for a board point ``x_w`` seen under pose ``(R, t)``::

    x_c = R x_w + t                       (rigid transform, mm)
    x_n = (x_c[0] / x_c[2], x_c[1] / x_c[2])
    x_d = h(x_n, kc)                      (radial k1, k2; tangential k3, k4)
    x_p = (fx * x_d[0] + cx, fy * x_d[1] + cy)

and the range a TOF camera reports for the same point is ``d = ||x_c||``.

Every function accepts a single point or a stacked ``(..., 3)`` / ``(..., 2)``
array and broadcasts over the leading axes.  The ``*_jacobian`` helpers return
analytic derivatives used by the least-squares solvers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoConvergence, PointBehindCamera

_MIN_DEPTH_AXIS = 1e-9
_UNDISTORT_MAX_ITER = 20
_UNDISTORT_STEP_TOL = 1e-12
_ORTHONORMAL_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    """Focal lengths and principal point in pixels; skew is always zero."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(vals)):
            raise ValueError(f"intrinsics must be finite, got {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=float)

    @classmethod
    def from_array(cls, a) -> Intrinsics:
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class Distortion:
    """Radial (k1, k2) and tangential (k3, k4) lens coefficients."""

    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0

    def __post_init__(self) -> None:
        if not all(np.isfinite(self.to_array())):
            raise ValueError("distortion coefficients must be finite")

    def to_array(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.k3, self.k4], dtype=float)

    @classmethod
    def from_array(cls, a) -> Distortion:
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.to_array())


@dataclass(frozen=True, eq=False)
class Pose:
    """Board-to-camera rigid transform: axis-angle ``rvec`` (rad), ``t`` (mm)."""

    rvec: np.ndarray
    t: np.ndarray

    def __post_init__(self) -> None:
        rvec = np.array(self.rvec, dtype=float).reshape(3)
        t = np.array(self.t, dtype=float).reshape(3)
        if not (np.all(np.isfinite(rvec)) and np.all(np.isfinite(t))):
            raise ValueError("pose must be finite")
        R = rodrigues(rvec)
        for arr in (rvec, t, R):
            arr.flags.writeable = False
        object.__setattr__(self, "rvec", rvec)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "_R", R)

    @property
    def R(self) -> np.ndarray:
        return self._R

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.rvec, self.t])

    @classmethod
    def from_array(cls, a) -> Pose:
        a = np.asarray(a, dtype=float)
        return cls(a[:3], a[3:6])

    @classmethod
    def from_matrix(cls, R: np.ndarray, t) -> Pose:
        return cls(rodrigues_inv(R), t)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.rvec, other.rvec) and np.array_equal(self.t, other.t))

    def __hash__(self) -> int:
        return hash((self.rvec.tobytes(), self.t.tobytes()))

    def __repr__(self) -> str:
        return f"Pose(rvec={self.rvec.tolist()}, t={self.t.tolist()})"


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v]_x`` so that ``skew(v) @ u == cross(v, u)``."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(rvec) -> np.ndarray:
    """Rotation matrix for an axis-angle vector."""
    rvec = np.asarray(rvec, dtype=float).reshape(3)
    theta = float(np.linalg.norm(rvec))
    if theta < 1e-12:
        # first-order series is orthonormal to ~theta^2, below double precision here
        return np.eye(3) + skew(rvec)
    k = rvec / theta
    K = skew(k)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def rodrigues_inv(R) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, angle in ``[0, pi]``.

    Raises:
        ValueError: if ``R`` is not orthonormal with determinant +1.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError("expected a finite 3x3 matrix")
    if np.linalg.norm(R.T @ R - np.eye(3)) > _ORTHONORMAL_TOL or np.linalg.det(R) < 0:
        raise ValueError("matrix is not a proper rotation")

    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(vee))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = float(np.arctan2(s, c))
    if theta < 1e-12:
        return vee.copy()
    if c > -0.5:
        return vee * (theta / s)
    # near a half turn sin(theta) is small; read the axis off the symmetric part
    B = 0.5 * (R + R.T) - c * np.eye(3)
    col = int(np.argmax(np.diag(B)))
    axis = B[:, col] / np.linalg.norm(B[:, col])
    if axis @ vee < 0:
        axis = -axis
    return axis * theta


def rodrigues_batch(rvecs: np.ndarray) -> np.ndarray:
    """``rodrigues`` over a stack of axis-angle vectors, shape ``(N, 3, 3)``."""
    rvecs = np.asarray(rvecs, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(rvecs, axis=1)
    small = theta < 1e-12
    k = rvecs / np.where(small, 1.0, theta)[:, None]
    Kx = _skew_batch(k)
    s = np.sin(theta)[:, None, None]
    c = (1.0 - np.cos(theta))[:, None, None]
    R = np.eye(3) + s * Kx + c * (Kx @ Kx)
    if small.any():
        R[small] = np.eye(3) + _skew_batch(rvecs[small])
    return R


def rotate_jacobian_batch(rvecs: np.ndarray, points: np.ndarray, R: np.ndarray | None = None) -> np.ndarray:
    """``rotate_jacobian`` for every (pose, point) pair, shape ``(N, M, 3, 3)``."""
    rvecs = np.asarray(rvecs, dtype=float).reshape(-1, 3)
    P = np.atleast_2d(np.asarray(points, dtype=float))
    R = rodrigues_batch(rvecs) if R is None else R
    theta2 = np.einsum("ni,ni->n", rvecs, rvecs)
    small = theta2 < 1e-16
    outer = rvecs[:, :, None] * rvecs[:, None, :]
    inner = (outer + (np.swapaxes(R, 1, 2) - np.eye(3)) @ _skew_batch(rvecs)) / np.where(small, 1.0, theta2)[:, None, None]
    Px = _skew_batch(P)
    J = -np.einsum("nij,mjk,nkl->nmil", R, Px, inner, optimize=True)
    if small.any():
        J[small] = -Px
    return J


def rotate_jacobian(rvec, points: np.ndarray) -> np.ndarray:
    """Derivative of ``R(rvec) @ p`` with respect to ``rvec`` for each point.

    Returns an array of shape ``(M, 3, 3)``.
    """
    rvec = np.asarray(rvec, dtype=float).reshape(3)
    P = np.atleast_2d(np.asarray(points, dtype=float))
    theta2 = float(rvec @ rvec)
    Px = _skew_batch(P)
    if theta2 < 1e-16:
        return -Px
    R = rodrigues(rvec)
    # d(Rp)/dv = -R [p]_x (v v^T + (R^T - I)[v]_x) / |v|^2
    inner = (np.outer(rvec, rvec) + (R.T - np.eye(3)) @ skew(rvec)) / theta2
    return -np.einsum("ij,mjk,kl->mil", R, Px, inner)


def _skew_batch(P: np.ndarray) -> np.ndarray:
    S = np.zeros(P.shape[:-1] + (3, 3))
    S[..., 0, 1] = -P[..., 2]
    S[..., 0, 2] = P[..., 1]
    S[..., 1, 0] = P[..., 2]
    S[..., 1, 2] = -P[..., 0]
    S[..., 2, 0] = -P[..., 1]
    S[..., 2, 1] = P[..., 0]
    return S


# ---------------------------------------------------------------------------
# Projection chain
# ---------------------------------------------------------------------------


def world_to_camera(x_w, pose: Pose) -> np.ndarray:
    x_w = np.asarray(x_w, dtype=float)
    return x_w @ pose.R.T + pose.t


def normalize(x_c) -> np.ndarray:
    """Perspective division onto the ``z = 1`` plane."""
    x_c = np.asarray(x_c, dtype=float)
    z = x_c[..., 2]
    if np.any(~(z > _MIN_DEPTH_AXIS)):
        raise PointBehindCamera("point has non-positive depth-axis coordinate")
    return x_c[..., :2] / z[..., None]


def distort(x_n, kc: Distortion) -> np.ndarray:
    x_n = np.asarray(x_n, dtype=float)
    k1, k2, k3, k4 = kc.to_array()
    x = x_n[..., 0]
    y = x_n[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = x * (radial + 2.0 * k3 * y) + k4 * (r2 + 2.0 * x * x)
    yd = y * (radial + 2.0 * k4 * x) + k3 * (r2 + 2.0 * y * y)
    return np.stack([xd, yd], axis=-1)


def distort_jacobian(x_n, kc: Distortion) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of ``distort`` w.r.t. the point ``(..., 2, 2)`` and ``kc`` ``(..., 2, 4)``."""
    x_n = np.asarray(x_n, dtype=float)
    k1, k2, k3, k4 = kc.to_array()
    x = x_n[..., 0]
    y = x_n[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    g = 2.0 * (k1 + 2.0 * k2 * r2)  # d(radial)/dx = g * x

    J_pt = np.empty(x.shape + (2, 2))
    J_pt[..., 0, 0] = radial + g * x * x + 2.0 * k3 * y + 6.0 * k4 * x
    J_pt[..., 0, 1] = g * x * y + 2.0 * k3 * x + 2.0 * k4 * y
    J_pt[..., 1, 0] = g * x * y + 2.0 * k4 * y + 2.0 * k3 * x
    J_pt[..., 1, 1] = radial + g * y * y + 2.0 * k4 * x + 6.0 * k3 * y

    J_k = np.empty(x.shape + (2, 4))
    J_k[..., 0, 0] = x * r2
    J_k[..., 0, 1] = x * r2 * r2
    J_k[..., 0, 2] = 2.0 * x * y
    J_k[..., 0, 3] = r2 + 2.0 * x * x
    J_k[..., 1, 0] = y * r2
    J_k[..., 1, 1] = y * r2 * r2
    J_k[..., 1, 2] = r2 + 2.0 * y * y
    J_k[..., 1, 3] = 2.0 * x * y
    return J_pt, J_k


def undistort(x_d, kc: Distortion) -> np.ndarray:
    """Invert ``distort`` by Newton iteration started at the distorted point.

    A solution is accepted only on the monotone branch of the radial
    polynomial (positive radial factor and positive radial slope); a fold in
    the lens model otherwise admits spurious pre-images.

    Raises:
        NoConvergence: iteration cap hit, non-finite iterate, or the solution
            lies beyond the fold of the distortion model.
    """
    x_d = np.asarray(x_d, dtype=float)
    if kc.is_zero:
        return x_d.copy()
    k1, k2 = kc.k1, kc.k2
    flat = x_d.reshape(-1, 2)
    x = flat.copy()
    active = np.ones(len(x), dtype=bool)
    for _ in range(_UNDISTORT_MAX_ITER):
        if not active.any():
            break
        xa = x[active]
        f = distort(xa, kc) - flat[active]
        J, _ = distort_jacobian(xa, kc)
        step = np.linalg.solve(J, f[..., None])[..., 0]
        if not np.all(np.isfinite(step)):
            raise NoConvergence("undistortion produced a non-finite iterate")
        x[active] = xa - step
        idx = np.flatnonzero(active)
        active[idx[np.linalg.norm(step, axis=1) < _UNDISTORT_STEP_TOL]] = False
    if active.any():
        raise NoConvergence(f"undistortion did not converge for {int(active.sum())} point(s)")
    r2 = np.sum(x * x, axis=1)
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    slope = 1.0 + 3.0 * k1 * r2 + 5.0 * k2 * r2 * r2
    if np.any(radial <= 0) or np.any(slope <= 0):
        raise NoConvergence("distortion model is not invertible at this point")
    return x.reshape(x_d.shape)


def pixel_from_distorted(x_d, K: Intrinsics) -> np.ndarray:
    x_d = np.asarray(x_d, dtype=float)
    return np.stack([K.fx * x_d[..., 0] + K.cx, K.fy * x_d[..., 1] + K.cy], axis=-1)


def distorted_from_pixel(x_p, K: Intrinsics) -> np.ndarray:
    x_p = np.asarray(x_p, dtype=float)
    return np.stack([(x_p[..., 0] - K.cx) / K.fx, (x_p[..., 1] - K.cy) / K.fy], axis=-1)


def project(x_w, pose: Pose, K: Intrinsics, kc: Distortion) -> np.ndarray:
    return pixel_from_distorted(distort(normalize(world_to_camera(x_w, pose)), kc), K)


def depth_of(x_w, pose: Pose) -> np.ndarray | float:
    """Camera-centre-to-point range via ``sqrt(|x_w|^2 + |t|^2 + 2 t.R x_w)``."""
    x_w = np.asarray(x_w, dtype=float)
    t = pose.t
    val = np.sum(x_w * x_w, axis=-1) + t @ t + 2.0 * (x_w @ pose.R.T) @ t
    d = np.sqrt(np.maximum(val, 0.0))
    return float(d) if np.ndim(d) == 0 else d


def pixel_rays(x_p, K: Intrinsics, kc: Distortion) -> np.ndarray:
    """Unit viewing rays through pixels (camera frame)."""
    x_n = undistort(distorted_from_pixel(x_p, K), kc)
    v = np.concatenate([x_n, np.ones(x_n.shape[:-1] + (1,))], axis=-1)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def back_project(x_p, d, K: Intrinsics, kc: Distortion) -> np.ndarray:
    """Camera-frame point at range ``d`` along the ray through pixel ``x_p``."""
    d = np.asarray(d, dtype=float)
    if np.any(~(d > 0)):
        raise ValueError("depth must be positive")
    return pixel_rays(x_p, K, kc) * d[..., None]


# ---------------------------------------------------------------------------
# Analytic derivatives used by the calibration objectives
# ---------------------------------------------------------------------------


def project_with_jacobian(
    x_w: np.ndarray, pose: Pose, K: Intrinsics, kc: Distortion
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Project board points and differentiate the pixels.

    Returns:
        pixels ``(M, 2)``, d/d(fx, fy, cx, cy) ``(M, 2, 4)``,
        d/d(k1..k4) ``(M, 2, 4)`` and d/d(rvec, t) ``(M, 2, 6)``.
    """
    x_w = np.atleast_2d(np.asarray(x_w, dtype=float))
    x_c = world_to_camera(x_w, pose)
    x_n = normalize(x_c)
    x_d = distort(x_n, kc)
    pix = pixel_from_distorted(x_d, K)

    m = len(x_w)
    J_K = np.zeros((m, 2, 4))
    J_K[:, 0, 0] = x_d[:, 0]
    J_K[:, 1, 1] = x_d[:, 1]
    J_K[:, 0, 2] = 1.0
    J_K[:, 1, 3] = 1.0

    J_dn, J_dk = distort_jacobian(x_n, kc)
    F = np.array([K.fx, K.fy])
    J_kc = J_dk * F[None, :, None]

    z = x_c[:, 2]
    J_nc = np.zeros((m, 2, 3))
    J_nc[:, 0, 0] = 1.0 / z
    J_nc[:, 1, 1] = 1.0 / z
    J_nc[:, 0, 2] = -x_c[:, 0] / (z * z)
    J_nc[:, 1, 2] = -x_c[:, 1] / (z * z)

    J_pc = F[None, :, None] * np.einsum("mij,mjk->mik", J_dn, J_nc)  # (M, 2, 3)
    J_pose = np.empty((m, 2, 6))
    J_pose[:, :, :3] = np.einsum("mij,mjk->mik", J_pc, rotate_jacobian(pose.rvec, x_w))
    J_pose[:, :, 3:] = J_pc
    return pix, J_K, J_kc, J_pose


def depth_with_jacobian(x_w: np.ndarray, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Ranges of board points and their derivative w.r.t. (rvec, t), shape ``(M, 6)``."""
    x_w = np.atleast_2d(np.asarray(x_w, dtype=float))
    x_c = world_to_camera(x_w, pose)
    d = np.linalg.norm(x_c, axis=1)
    u = x_c / d[:, None]
    J = np.empty((len(x_w), 6))
    J[:, :3] = np.einsum("mj,mjk->mk", u, rotate_jacobian(pose.rvec, x_w))
    J[:, 3:] = u
    return d, J


def back_project_jacobian_K(
    x_p: np.ndarray, d: np.ndarray, K: Intrinsics, kc: Distortion
) -> tuple[np.ndarray, np.ndarray]:
    """Back-projected points and their derivative w.r.t. (fx, fy, cx, cy), ``(M, 3, 4)``."""
    x_p = np.atleast_2d(np.asarray(x_p, dtype=float))
    d = np.atleast_1d(np.asarray(d, dtype=float))
    x_d = distorted_from_pixel(x_p, K)
    x_n = undistort(x_d, kc)
    J_dn, _ = distort_jacobian(x_n, kc)
    J_nd = np.linalg.inv(J_dn)

    m = len(x_p)
    J_dK = np.zeros((m, 2, 4))
    J_dK[:, 0, 0] = -x_d[:, 0] / K.fx
    J_dK[:, 1, 1] = -x_d[:, 1] / K.fy
    J_dK[:, 0, 2] = -1.0 / K.fx
    J_dK[:, 1, 3] = -1.0 / K.fy
    J_nK = np.einsum("mij,mjk->mik", J_nd, J_dK)

    v = np.concatenate([x_n, np.ones((m, 1))], axis=1)
    nv = np.linalg.norm(v, axis=1)
    vh = v / nv[:, None]
    # d(d * v/|v|)/dv = d (I - vh vh^T) / |v|, only the first two columns of v move
    P = (np.eye(3)[None] - vh[:, :, None] * vh[:, None, :]) * (d / nv)[:, None, None]
    J = np.einsum("mij,mjk->mik", P[:, :, :2], J_nK)
    return vh * d[:, None], J


def project_batch(
    x_w: np.ndarray, rvecs: np.ndarray, ts: np.ndarray, K: Intrinsics, kc: Distortion, with_jac: bool = True
) -> dict[str, np.ndarray]:
    """Pixels and ranges of one board seen under N poses, with optional derivatives.

    Returns a dict with ``pix (N, M, 2)`` and ``depth (N, M)``; when
    ``with_jac`` also ``J_K (N, M, 2, 4)``, ``J_kc (N, M, 2, 4)``,
    ``J_pose (N, M, 2, 6)`` and ``J_depth (N, M, 6)``.

    Raises:
        PointBehindCamera: any point lands at or behind the camera plane.
    """
    x_w = np.atleast_2d(np.asarray(x_w, dtype=float))
    rvecs = np.asarray(rvecs, dtype=float).reshape(-1, 3)
    ts = np.asarray(ts, dtype=float).reshape(-1, 3)
    R = rodrigues_batch(rvecs)
    x_c = np.einsum("nij,mj->nmi", R, x_w) + ts[:, None, :]
    z = x_c[..., 2]
    if np.any(~(z > _MIN_DEPTH_AXIS)):
        raise PointBehindCamera("point has non-positive depth-axis coordinate")
    x_n = x_c[..., :2] / z[..., None]
    x_d = distort(x_n, kc)
    F = np.array([K.fx, K.fy])
    pix = x_d * F + np.array([K.cx, K.cy])
    depth = np.linalg.norm(x_c, axis=-1)
    out = {"pix": pix, "depth": depth}
    if not with_jac:
        return out

    n, m = z.shape
    J_K = np.zeros((n, m, 2, 4))
    J_K[..., 0, 0] = x_d[..., 0]
    J_K[..., 1, 1] = x_d[..., 1]
    J_K[..., 0, 2] = 1.0
    J_K[..., 1, 3] = 1.0
    J_dn, J_dk = distort_jacobian(x_n, kc)
    J_kc = J_dk * F[:, None]

    J_nc = np.zeros((n, m, 2, 3))
    J_nc[..., 0, 0] = 1.0 / z
    J_nc[..., 1, 1] = 1.0 / z
    J_nc[..., 0, 2] = -x_c[..., 0] / (z * z)
    J_nc[..., 1, 2] = -x_c[..., 1] / (z * z)
    J_pc = F[:, None] * (J_dn @ J_nc)  # (N, M, 2, 3)
    J_rot = rotate_jacobian_batch(rvecs, x_w, R)  # (N, M, 3, 3)
    J_pose = np.concatenate([J_pc @ J_rot, J_pc], axis=-1)

    u = x_c / depth[..., None]
    J_depth = np.concatenate([np.einsum("nmj,nmjk->nmk", u, J_rot), u], axis=-1)
    out.update(J_K=J_K, J_kc=J_kc, J_pose=J_pose, J_depth=J_depth)
    return out

"""Linear initializers and a Levenberg-Marquardt engine for calibration.

The initializers follow the classic planar-target recipe: a normalized DLT
homography per view, a closed-form intrinsics estimate from the homographies
(with the skew term removed from the unknowns), and a per-view pose read off
``K^-1 H``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .camera_model import Intrinsics, Pose, rodrigues_inv
from .errors import DegenerateConfiguration, NumericalFailure

logger = logging.getLogger(__name__)

ResidualFn = Callable[[np.ndarray], np.ndarray]
JacobianFn = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Homographies
# ---------------------------------------------------------------------------


def _hartley_transform(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    dist = np.linalg.norm(pts - c, axis=1).mean()
    if dist <= 0:
        raise DegenerateConfiguration("all points coincide")
    s = np.sqrt(2.0) / dist
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _is_collinear(pts: np.ndarray) -> bool:
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    return sv[1] <= 1e-9 * max(sv[0], 1e-300)


def apply_homography(H: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    q = pts @ H[:, :2].T + H[:, 2]
    return q[..., :2] / q[..., 2:3]


def estimate_homography(board_pts, image_pts) -> np.ndarray:
    """Normalized DLT homography mapping board-plane (X, Y) to pixels.

    Raises:
        DegenerateConfiguration: fewer than 4 correspondences or either point
            set is collinear.
    """
    src = np.asarray(board_pts, dtype=float)[:, :2]
    dst = np.asarray(image_pts, dtype=float)
    if len(src) < 4 or len(src) != len(dst):
        raise DegenerateConfiguration("need at least 4 matching correspondences")
    if _is_collinear(src) or _is_collinear(dst):
        raise DegenerateConfiguration("correspondences are collinear")

    Ts = _hartley_transform(src)
    Td = _hartley_transform(dst)
    s = src @ Ts[:2, :2].T + Ts[:2, 2]
    d = dst @ Td[:2, :2].T + Td[:2, 2]

    n = len(s)
    A = np.zeros((2 * n, 9))
    ones = np.ones(n)
    A[0::2, 0:3] = np.column_stack([s, ones])
    A[0::2, 6:9] = -d[:, [0]] * np.column_stack([s, ones])
    A[1::2, 3:6] = np.column_stack([s, ones])
    A[1::2, 6:9] = -d[:, [1]] * np.column_stack([s, ones])
    _, sv, vt = np.linalg.svd(A)
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if not np.all(np.isfinite(H)) or np.linalg.matrix_rank(H) < 3:
        raise DegenerateConfiguration("homography is singular")
    if abs(H[2, 2]) > 1e-12 * np.abs(H).max():
        H = H / H[2, 2]
    return H


# ---------------------------------------------------------------------------
# Intrinsics and pose from homographies
# ---------------------------------------------------------------------------


def _conic_row(H: np.ndarray, i: int, j: int) -> np.ndarray:
    hi, hj = H[:, i], H[:, j]
    return np.array(
        [
            hi[0] * hj[0],
            hi[1] * hj[1],
            hi[0] * hj[2] + hi[2] * hj[0],
            hi[1] * hj[2] + hi[2] * hj[1],
            hi[2] * hj[2],
        ]
    )


def intrinsics_from_homographies(Hs) -> Intrinsics:
    """Zero-skew closed-form intrinsics from two or more plane homographies.

    Solves for the image of the absolute conic restricted to the five entries
    that survive with zero skew, ``(B11, B22, B13, B23, B33)``.

    Raises:
        DegenerateConfiguration: rank-deficient conic system (e.g. parallel
            boards) or a solution that does not correspond to real focal
            lengths.
    """
    Hs = [np.asarray(H, dtype=float) for H in Hs]
    if len(Hs) < 2:
        raise DegenerateConfiguration("need at least two homographies")

    # condition the pixel side; T keeps K upper triangular with zero skew
    centers = np.array([H[:2, 2] / H[2, 2] for H in Hs])
    c = centers.mean(axis=0)
    spread = max(np.abs(centers - c).max(), 1.0)
    scale = max(np.mean([np.abs(H[:2, :2] / H[2, 2]).max() for H in Hs]), spread)
    s = 1.0 / scale
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])

    rows = []
    for H in Hs:
        Hn = T @ H
        Hn = Hn / np.linalg.norm(Hn)
        rows.append(_conic_row(Hn, 0, 1))
        rows.append(_conic_row(Hn, 0, 0) - _conic_row(Hn, 1, 1))
    V = np.array(rows)
    _, sv, vt = np.linalg.svd(V)
    if len(sv) < 5 or sv[3] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("absolute-conic system is rank deficient")
    b = vt[-1]
    if b[0] < 0:
        b = -b
    B11, B22, B13, B23, B33 = b
    if B11 <= 0 or B22 <= 0:
        raise DegenerateConfiguration("conic estimate is not positive definite")
    cx = -B13 / B11
    cy = -B23 / B22
    lam = B33 - B13 * B13 / B11 - B23 * B23 / B22
    if lam <= 0:
        raise DegenerateConfiguration("conic estimate gives imaginary focal lengths")
    fx = np.sqrt(lam / B11)
    fy = np.sqrt(lam / B22)
    Kn = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    K = np.linalg.inv(T) @ Kn
    return Intrinsics(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]))


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Closest proper rotation in Frobenius norm (orthogonal Procrustes)."""
    u, _, vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))])
    return u @ D @ vt


def decompose_homography(H, K: Intrinsics) -> Pose:
    """Board pose from a plane homography, with the board in front of the camera."""
    H = np.asarray(H, dtype=float)
    A = np.linalg.solve(K.matrix, H)
    n1 = np.linalg.norm(A[:, 0])
    if not np.isfinite(n1) or n1 < 1e-300:
        raise DegenerateConfiguration("homography has a null first column")
    lam = 1.0 / n1
    if A[2, 2] * lam < 0:
        lam = -lam
    r1 = lam * A[:, 0]
    r2 = lam * A[:, 1]
    t = lam * A[:, 2]
    R = nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    return Pose(rodrigues_inv(R), t)


def compose_homography(pose: Pose, K: Intrinsics) -> np.ndarray:
    """Distortion-free homography of the ``z = 0`` board plane under ``pose``."""
    R = pose.R
    H = K.matrix @ np.column_stack([R[:, 0], R[:, 1], pose.t])
    return H / H[2, 2]


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LmOptions:
    max_iterations: int = 100
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    gradient_tol: float = 1e-10
    step_tol: float = 1e-12
    cost_tol: float = 1e-15
    schedule: str = "gain-ratio"

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for name in ("initial_damping", "damping_up", "damping_down", "gradient_tol", "step_tol", "cost_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.schedule not in ("gain-ratio", "fixed"):
            raise ValueError(f"unknown damping schedule {self.schedule!r}")


@dataclass
class LmReport:
    """Outcome of one ``lm_solve`` call.

    ``cost_trace`` holds the cost before the first iteration followed by the
    cost after every accepted step, so it is non-increasing by construction.
    """

    initial_cost: float
    final_cost: float
    iterations: int
    reason: str
    cost_trace: list[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.reason != "max-iter"

    def to_dict(self) -> dict:
        return {
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "iterations": self.iterations,
            "reason": self.reason,
            "cost_trace": list(self.cost_trace),
        }


def _checked(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NumericalFailure(f"non-finite {what}")
    return arr


def lm_solve(
    residual_fn: ResidualFn,
    jacobian_fn: JacobianFn,
    x0,
    opts: LmOptions | None = None,
) -> tuple[np.ndarray, LmReport]:
    """Minimize ``||residual_fn(x)||^2`` with Marquardt-scaled damping.

    The damped normal equations use ``J^T J + mu * diag(J^T J)`` so the step is
    invariant to the very different scales of focal lengths, rotations and
    translations in a calibration vector.

    Raises:
        NumericalFailure: the residual or Jacobian is non-finite at an
            evaluated point that would otherwise be accepted, or at ``x0``.
    """
    opts = opts or LmOptions()
    x = np.array(x0, dtype=float)
    r = _checked(residual_fn(x), "residual")
    cost = float(r @ r)
    report = LmReport(initial_cost=cost, final_cost=cost, iterations=0, reason="max-iter", cost_trace=[cost])
    if cost == 0.0:
        report.reason = "cost"
        return x, report

    J = _checked(jacobian_fn(x), "jacobian")
    if J.shape != (r.size, x.size):
        raise ValueError(f"jacobian shape {J.shape} does not match ({r.size}, {x.size})")
    mu = opts.initial_damping

    for it in range(1, opts.max_iterations + 1):
        report.iterations = it
        g = J.T @ r
        if np.abs(g).max() <= opts.gradient_tol:
            report.reason = "gradient"
            break
        A = J.T @ J
        diag = np.diag(A).copy()
        diag = np.maximum(diag, 1e-12 * max(diag.max(), 1e-300))

        accepted = False
        nu = 2.0
        while True:
            try:
                step = np.linalg.solve(A + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(A + mu * np.diag(diag), -g, rcond=None)[0]
            if np.linalg.norm(step) <= opts.step_tol * (np.linalg.norm(x) + opts.step_tol):
                report.reason = "step"
                break
            x_new = x + step
            r_new = np.asarray(residual_fn(x_new), dtype=float)
            cost_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new < cost:
                accepted = True
                break
            if opts.schedule == "fixed":
                mu *= opts.damping_up
            else:
                mu *= nu
                nu *= 2.0
            if mu > 1e16:
                report.reason = "step"
                break

        if not accepted:
            break
        predicted = -(2.0 * g @ step + step @ A @ step)
        rel_drop = (cost - cost_new) / cost
        if opts.schedule == "fixed":
            mu = max(mu / opts.damping_down, 1e-15)
        else:
            rho = (cost - cost_new) / predicted if predicted > 0 else 0.0
            mu = max(mu * max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3), 1e-15)
        x, r, cost = x_new, r_new, cost_new
        report.cost_trace.append(cost)
        if cost == 0.0 or rel_drop < opts.cost_tol:
            report.reason = "cost"
            break
        J = _checked(jacobian_fn(x), "jacobian")
    else:
        report.reason = "max-iter"

    report.final_cost = cost
    logger.debug("lm_solve: %s after %d iterations, cost %.3e", report.reason, report.iterations, cost)
    return x, report


def check_jacobian(residual_fn: ResidualFn, jacobian_fn: JacobianFn, x, step: float = 1e-6) -> float:
    """Largest relative disagreement between the analytic Jacobian and central differences.

    Each column is differenced with a step of ``step * max(1, |x_k|)`` and its
    error is normalized by that column's largest analytic entry, so parameters
    of very different scale are judged on equal footing.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    J = np.asarray(jacobian_fn(x), dtype=float)
    Jn = np.empty_like(J)
    for k in range(x.size):
        h = step * max(1.0, abs(x[k]))
        e = np.zeros_like(x)
        e[k] = h
        Jn[:, k] = (np.asarray(residual_fn(x + e)) - np.asarray(residual_fn(x - e))) / (2.0 * h)
    col_scale = np.abs(J).max(axis=0)
    floor = 1e-8 * max(col_scale.max(), 1e-300)
    col_scale = np.maximum(col_scale, floor)
    return float((np.abs(J - Jn).max(axis=0) / col_scale).max())

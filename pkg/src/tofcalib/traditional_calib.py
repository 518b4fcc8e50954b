"""Checkerboard calibration from 2-D corners only.

Pipeline: homography per image, closed-form intrinsics, pose per image from
its homography, per-image pose refinement, then a joint bundle over
intrinsics, distortion and all poses minimizing squared reprojection error.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera_model import Distortion, Intrinsics, Pose, project, project_batch, project_with_jacobian
from .dataset import CalibParams, CalibrationDataset
from .errors import DegenerateConfiguration
from .solvers import (
    LmOptions,
    LmReport,
    decompose_homography,
    estimate_homography,
    intrinsics_from_homographies,
    lm_solve,
)

logger = logging.getLogger(__name__)

N_SHARED = 8  # fx, fy, cx, cy, k1..k4


def _stack(V: CalibParams) -> tuple[np.ndarray, np.ndarray]:
    return np.array([p.rvec for p in V.poses]), np.array([p.t for p in V.poses])


def place_pose_blocks(J: np.ndarray, J_pose: np.ndarray) -> None:
    """Write per-image pose derivatives ``(N, R, 6)`` into the block diagonal of ``J``.

    ``J`` has ``N * R`` rows, image-major, and its pose columns start at ``N_SHARED``.
    """
    n, r, _ = J_pose.shape
    Jv = J.reshape(n, r, J.shape[1])
    cols = N_SHARED + 6 * np.arange(n)[:, None, None] + np.arange(6)
    Jv[np.arange(n)[:, None, None], np.arange(r)[None, :, None], cols] = J_pose


def reprojection_residuals(V: CalibParams, dataset: CalibrationDataset) -> np.ndarray:
    """Projected minus measured corners, image-major, corner-minor, (x, y) last."""
    rv, ts = _stack(V)
    pix = project_batch(dataset.board.world_points, rv, ts, V.K, V.kc, with_jac=False)["pix"]
    meas = np.stack([im.corners_px for im in dataset.images])
    return (pix - meas).ravel()


def reprojection_jacobian(V: CalibParams, dataset: CalibrationDataset) -> np.ndarray:
    """Analytic derivative of :func:`reprojection_residuals` w.r.t. ``V.to_vector()``."""
    rv, ts = _stack(V)
    b = project_batch(dataset.board.world_points, rv, ts, V.K, V.kc)
    n, m = b["pix"].shape[:2]
    J = np.zeros((2 * m * n, N_SHARED + 6 * n))
    J[:, 0:4] = b["J_K"].reshape(-1, 4)
    J[:, 4:8] = b["J_kc"].reshape(-1, 4)
    place_pose_blocks(J, b["J_pose"].reshape(n, 2 * m, 6))
    return J


def init_params(dataset: CalibrationDataset) -> CalibParams:
    """Zero distortion, closed-form intrinsics and homography poses.

    Raises:
        DegenerateConfiguration: fewer than two images or four corners, or a
            degenerate set of board orientations.
    """
    if dataset.n_images < 2:
        raise DegenerateConfiguration("need at least two images to initialize intrinsics")
    if dataset.board.n_corners < 4:
        raise DegenerateConfiguration("need at least four corners per image")
    X = dataset.board.world_points
    Hs = [estimate_homography(X[:, :2], im.corners_px) for im in dataset.images]
    K = intrinsics_from_homographies(Hs)
    poses = tuple(decompose_homography(H, K) for H in Hs)
    return CalibParams(K, Distortion(), poses)


def reinit_poses(dataset: CalibrationDataset, K: Intrinsics) -> tuple[Pose, ...]:
    """Poses from each image's homography under fixed intrinsics."""
    X = dataset.board.world_points
    return tuple(decompose_homography(estimate_homography(X[:, :2], im.corners_px), K) for im in dataset.images)


def local_optimize(
    image_corners: np.ndarray,
    world_points: np.ndarray,
    K: Intrinsics,
    kc: Distortion,
    pose0: Pose,
    opts: LmOptions | None = None,
) -> Pose:
    """Refine one image's pose against its corners with intrinsics held fixed."""
    image_corners = np.asarray(image_corners, dtype=float)
    world_points = np.asarray(world_points, dtype=float)

    def residual(p: np.ndarray) -> np.ndarray:
        return (project(world_points, Pose.from_array(p), K, kc) - image_corners).ravel()

    def jacobian(p: np.ndarray) -> np.ndarray:
        _, _, _, J_pose = project_with_jacobian(world_points, Pose.from_array(p), K, kc)
        return J_pose.reshape(-1, 6)

    p, _ = lm_solve(residual, jacobian, pose0.to_array(), opts)
    return Pose.from_array(p)


def global_optimize(
    dataset: CalibrationDataset, V0: CalibParams, opts: LmOptions | None = None
) -> tuple[CalibParams, LmReport]:
    """Joint minimization of the total squared reprojection error over all of ``V``."""

    def residual(v: np.ndarray) -> np.ndarray:
        return reprojection_residuals(CalibParams.from_vector(v), dataset)

    def jacobian(v: np.ndarray) -> np.ndarray:
        return reprojection_jacobian(CalibParams.from_vector(v), dataset)

    v, report = lm_solve(residual, jacobian, V0.to_vector(), opts)
    return CalibParams.from_vector(v), report


@dataclass
class TraditionalResult:
    params: CalibParams
    init: CalibParams
    report: LmReport
    stage_costs: dict[str, float] = field(default_factory=dict)


def calibrate_traditional(dataset: CalibrationDataset, opts: LmOptions | None = None) -> TraditionalResult:
    """Initialization, one pass of per-image local optimization, then the global bundle."""
    V0 = init_params(dataset)
    costs = {"init": _cost(V0, dataset)}
    X = dataset.board.world_points
    poses = tuple(
        local_optimize(im.corners_px, X, V0.K, V0.kc, pose, opts) for im, pose in zip(dataset.images, V0.poses)
    )
    V_local = V0.with_(poses=poses)
    costs["local"] = _cost(V_local, dataset)
    V, report = global_optimize(dataset, V_local, opts)
    costs["global"] = report.final_cost
    logger.debug("traditional calibration costs: %s", costs)
    return TraditionalResult(params=V, init=V0, report=report, stage_costs=costs)


def _cost(V: CalibParams, dataset: CalibrationDataset) -> float:
    r = reprojection_residuals(V, dataset)
    return float(r @ r)

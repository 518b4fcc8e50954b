"""Accuracy measures against synthetic groundtruth."""

from __future__ import annotations

import numpy as np

from .camera_model import back_project
from .dataset import CalibParams, CalibrationDataset
from .errors import MissingGroundtruth


def reconstruct_board_points(V: CalibParams, dataset: CalibrationDataset, depths) -> list[np.ndarray]:
    """Board-frame corners recovered from measured pixels and the given ranges."""
    out = []
    for j, (pose, im) in enumerate(zip(V.poses, dataset.images)):
        x_c = back_project(im.corners_px, np.asarray(depths[j]), V.K, V.kc)
        out.append((x_c - pose.t) @ pose.R)
    return out


def mean_3d_error(V: CalibParams, dataset: CalibrationDataset) -> float:
    """Mean distance (mm) between true board corners and corners rebuilt under ``V``.

    Each measured corner is back-projected with the estimated intrinsics and
    distortion at its groundtruth range, then mapped into the board frame with
    the estimated pose of its image.

    Raises:
        MissingGroundtruth: the dataset carries no groundtruth depths.
    """
    gt = dataset.groundtruth
    if gt is None or not gt.depths:
        raise MissingGroundtruth("mean 3D error needs groundtruth corner depths")
    if V.n_images != dataset.n_images:
        raise ValueError(f"parameters cover {V.n_images} images, dataset has {dataset.n_images}")
    X = dataset.board.world_points
    rebuilt = reconstruct_board_points(V, dataset, gt.depths)
    return float(np.mean([np.linalg.norm(P - X, axis=1) for P in rebuilt]))


def relative_focal_error(f_est, f_gt) -> float:
    """Componentwise mean of ``|f_est - f_gt| / f_gt`` over (fx, fy)."""
    f_est = np.asarray(f_est, dtype=float)
    f_gt = np.asarray(f_gt, dtype=float)
    if np.any(f_gt <= 0):
        raise ValueError("groundtruth focal lengths must be positive")
    return float(np.sum(np.abs(f_est - f_gt)) / np.sum(f_gt))

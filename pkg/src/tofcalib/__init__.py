"""Calibration of time-of-flight depth cameras from checkerboard corners and range.

The 2-D-only pipeline (:func:`calibrate_traditional`) estimates intrinsics,
lens distortion and board poses from corner pixels.  The depth-assisted
pipeline (:func:`depth_based_calib`) refines it with plane-denoised corner
ranges, square-size constraints on the focal lengths, and a joint objective
over pixels and ranges.
"""

__version__ = "0.1.0"

from .camera_model import Distortion, Intrinsics, Pose, back_project, depth_of, project, undistort
from .dataset import BoardGeometry, CalibParams, CalibrationDataset, DepthMap, GroundTruth, ImageData
from .depth_calib import DepthCalibDiagnostics, DepthCalibOptions, StageFailure, depth_based_calib
from .depth_denoise import RansacOptions, planarize_dataset, planarize_depth
from .errors import CalibrationError
from .metrics import mean_3d_error, relative_focal_error
from .solvers import LmOptions, LmReport, lm_solve
from .synthetic import SynthConfig, add_noise, generate, render_dataset, subset
from .traditional_calib import TraditionalResult, calibrate_traditional

__all__ = [
    "BoardGeometry",
    "CalibParams",
    "CalibrationDataset",
    "CalibrationError",
    "DepthCalibDiagnostics",
    "DepthCalibOptions",
    "DepthMap",
    "Distortion",
    "GroundTruth",
    "ImageData",
    "Intrinsics",
    "LmOptions",
    "LmReport",
    "Pose",
    "RansacOptions",
    "StageFailure",
    "SynthConfig",
    "TraditionalResult",
    "add_noise",
    "back_project",
    "calibrate_traditional",
    "depth_based_calib",
    "depth_of",
    "generate",
    "lm_solve",
    "mean_3d_error",
    "planarize_dataset",
    "planarize_depth",
    "project",
    "relative_focal_error",
    "render_dataset",
    "subset",
    "undistort",
]

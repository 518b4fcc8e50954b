"""Joint calibration from corner pixels and plane-denoised corner ranges.

Stages, in order:

1. 2-D-only calibration for a starting point.
2. Planarize every image's depth under the current intrinsics.
3. Re-estimate the intrinsics so that back-projected neighbouring corners are
   one square apart, re-planarizing after each update, until at least half of
   the images have a mean neighbour-distance error within 20% of the square
   size (or the iteration cap is hit).
4. Re-initialize every pose from its homography under the new intrinsics and
   refine it per image.
5. Fit distortion alone with everything else held fixed.
6. Joint bundle over all parameters with per-image variance-normalized pixel
   and range residuals.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .camera_model import (
    Distortion,
    Intrinsics,
    Pose,
    back_project,
    back_project_jacobian_K,
    project_batch,
)
from .dataset import CalibParams, CalibrationDataset
from .depth_denoise import RansacOptions, planarize_dataset
from .errors import CalibrationError, NoConvergence, NumericalFailure
from .solvers import LmOptions, LmReport, lm_solve
from .traditional_calib import (
    N_SHARED,
    TraditionalResult,
    calibrate_traditional,
    place_pose_blocks,
    reinit_poses,
)

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-3
CONVERGED_FRACTION = 0.5
SQUARE_TOLERANCE = 0.2


@dataclass(frozen=True, eq=False)
class VarianceWeights:
    """Per-image noise scales: ``sigma_x`` in pixels, ``sigma_d`` in mm."""

    sigma_x: np.ndarray
    sigma_d: np.ndarray

    def __post_init__(self) -> None:
        sx = np.asarray(self.sigma_x, dtype=float)
        sd = np.asarray(self.sigma_d, dtype=float)
        if sx.shape != sd.shape or np.any(~(sx > 0)) or np.any(~(sd > 0)):
            raise ValueError("variance weights must be positive and of equal length")
        object.__setattr__(self, "sigma_x", sx)
        object.__setattr__(self, "sigma_d", sd)

    @classmethod
    def uniform(cls, n: int, sigma_x: float = 1.0, sigma_d: float = 1.0) -> VarianceWeights:
        return cls(np.full(n, sigma_x), np.full(n, sigma_d))

    def to_dict(self) -> dict:
        return {"sigma_x_px": self.sigma_x.tolist(), "sigma_d_mm": self.sigma_d.tolist()}


@dataclass
class KUpdateState:
    iteration: int
    errors: np.ndarray  # per-image mean |neighbour distance - square size|, mm
    converged: bool
    K: Intrinsics

    @property
    def median_error(self) -> float:
        return float(np.median(self.errors))

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "errors_mm": np.asarray(self.errors).tolist(),
            "median_error_mm": self.median_error,
            "converged": self.converged,
            "K": [self.K.fx, self.K.fy, self.K.cx, self.K.cy],
        }


@dataclass(frozen=True)
class DepthCalibOptions:
    max_k_iterations: int = 10
    ransac: RansacOptions = field(default_factory=RansacOptions)
    lm: LmOptions = field(default_factory=LmOptions)


@dataclass
class DepthCalibDiagnostics:
    stage_costs: dict[str, float] = field(default_factory=dict)
    k_trace: list[KUpdateState] = field(default_factory=list)
    k_converged: bool = False
    planarize_fallbacks: list[int] = field(default_factory=list)
    reports: dict[str, LmReport] = field(default_factory=dict)
    weights: VarianceWeights | None = None
    warnings: list[str] = field(default_factory=list)
    failed_stage: str | None = None

    @property
    def converged(self) -> bool:
        return self.failed_stage is None and not self.warnings

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "failed_stage": self.failed_stage,
            "warnings": list(self.warnings),
            "stage_costs": dict(self.stage_costs),
            "k_update": {"converged": self.k_converged, "trace": [s.to_dict() for s in self.k_trace]},
            "planarize_fallback_images": list(self.planarize_fallbacks),
            "weights": None if self.weights is None else self.weights.to_dict(),
            "lm_reports": {k: v.to_dict() for k, v in self.reports.items()},
        }


class StageFailure(CalibrationError):
    """A pipeline stage raised; ``diagnostics`` holds everything recorded so far."""

    def __init__(self, stage: str, cause: Exception, diagnostics: DepthCalibDiagnostics):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.diagnostics = diagnostics


# ---------------------------------------------------------------------------
# Intrinsics from square sizes
# ---------------------------------------------------------------------------


def _square_terms(corners_px, d_hat, K: Intrinsics, kc: Distortion, pairs: np.ndarray, with_jac: bool):
    if with_jac:
        X, J = back_project_jacobian_K(corners_px, d_hat, K, kc)
    else:
        X, J = back_project(corners_px, d_hat, K, kc), None
    diff = X[pairs[:, 0]] - X[pairs[:, 1]]
    dist = np.linalg.norm(diff, axis=1)
    if not with_jac:
        return dist, None
    u = diff / dist[:, None]
    dJ = J[pairs[:, 0]] - J[pairs[:, 1]]
    return dist, np.einsum("pi,pik->pk", u, dJ)


def square_size_residuals(corners_px, d_hat, K: Intrinsics, kc: Distortion, square_size: float, pairs) -> np.ndarray:
    """Neighbour distances minus the square size, images concatenated."""
    return np.concatenate(
        [_square_terms(c, d, K, kc, pairs, False)[0] - square_size for c, d in zip(corners_px, d_hat)]
    )


def update_K(
    corners_px,
    d_hat,
    K0: Intrinsics,
    kc: Distortion,
    square_size: float,
    pairs: np.ndarray,
    opts: LmOptions | None = None,
) -> tuple[Intrinsics, LmReport]:
    """Intrinsics making back-projected 4-neighbour corners one square apart.

    ``corners_px`` and ``d_hat`` are per-image sequences; ``pairs`` indexes
    adjacent corners within an image (see ``BoardGeometry.neighbor_pairs``).
    """

    def residual(k: np.ndarray) -> np.ndarray:
        try:
            K = Intrinsics.from_array(k)
            return square_size_residuals(corners_px, d_hat, K, kc, square_size, pairs)
        except (ValueError, NoConvergence):
            return np.full(len(pairs) * len(corners_px), np.inf)

    def jacobian(k: np.ndarray) -> np.ndarray:
        K = Intrinsics.from_array(k)
        return np.vstack([_square_terms(c, d, K, kc, pairs, True)[1] for c, d in zip(corners_px, d_hat)])

    k, report = lm_solve(residual, jacobian, K0.to_array(), opts)
    return Intrinsics.from_array(k), report


def error_in_3d(corners_px, d_hat, K: Intrinsics, kc: Distortion, square_size: float, pairs) -> np.ndarray:
    """Per-image mean absolute deviation of neighbour distances from the square size (mm)."""
    return np.array(
        [np.mean(np.abs(_square_terms(c, d, K, kc, pairs, False)[0] - square_size)) for c, d in zip(corners_px, d_hat)]
    )


def k_update_converged(errors, square_size: float) -> bool:
    """True once at least half of the images are within 20% of the square size."""
    errors = np.asarray(errors, dtype=float)
    n_ok = int(np.count_nonzero(errors <= SQUARE_TOLERANCE * square_size))
    return n_ok >= math.ceil(CONVERGED_FRACTION * len(errors))


# ---------------------------------------------------------------------------
# Joint pixel + range objective
# ---------------------------------------------------------------------------


def estimate_variances(dataset: CalibrationDataset, V: CalibParams, d_hat) -> VarianceWeights:
    """Per-image RMS of pixel residual components and of range residuals, floored."""
    rv = np.array([p.rvec for p in V.poses])
    ts = np.array([p.t for p in V.poses])
    b = project_batch(dataset.board.world_points, rv, ts, V.K, V.kc, with_jac=False)
    meas = np.stack([im.corners_px for im in dataset.images])
    sx = np.sqrt(np.mean((b["pix"] - meas).reshape(dataset.n_images, -1) ** 2, axis=1))
    sd = np.sqrt(np.mean((b["depth"] - np.stack([np.asarray(d, dtype=float) for d in d_hat])) ** 2, axis=1))
    return VarianceWeights(np.maximum(sx, VARIANCE_FLOOR), np.maximum(sd, VARIANCE_FLOOR))


def depth_residuals(V: CalibParams, dataset: CalibrationDataset, d_hat, weights: VarianceWeights) -> np.ndarray:
    """Per corner ``(dx / sx_j, dy / sx_j, dd / sd_j)``, image-major.

    ``dx, dy`` are projected minus measured pixels and ``dd`` is the modelled
    range minus the denoised range.
    """
    r, _ = _depth_terms(V, dataset, d_hat, weights, with_jac=False)
    return r


def depth_jacobian(V: CalibParams, dataset: CalibrationDataset, d_hat, weights: VarianceWeights) -> np.ndarray:
    _, J = _depth_terms(V, dataset, d_hat, weights, with_jac=True)
    return J


def _depth_terms(V, dataset, d_hat, weights, with_jac):
    rv = np.array([p.rvec for p in V.poses])
    ts = np.array([p.t for p in V.poses])
    b = project_batch(dataset.board.world_points, rv, ts, V.K, V.kc, with_jac=with_jac)
    n, m = b["depth"].shape
    sx = np.asarray(weights.sigma_x, dtype=float)[:, None, None]
    sd = np.asarray(weights.sigma_d, dtype=float)[:, None]
    meas = np.stack([im.corners_px for im in dataset.images])
    r = np.empty((n, m, 3))
    r[..., :2] = (b["pix"] - meas) / sx
    r[..., 2] = (b["depth"] - np.stack([np.asarray(d, dtype=float) for d in d_hat])) / sd
    if not with_jac:
        return r.ravel(), None
    J = np.zeros((n * m * 3, N_SHARED + 6 * n))
    Jv = J.reshape(n, m, 3, -1)
    Jv[:, :, :2, 0:4] = b["J_K"] / sx[..., None]
    Jv[:, :, :2, 4:8] = b["J_kc"] / sx[..., None]
    J_pose = np.empty((n, m, 3, 6))
    J_pose[:, :, :2] = b["J_pose"] / sx[..., None]
    J_pose[:, :, 2] = b["J_depth"] / sd[..., None]
    place_pose_blocks(J, J_pose.reshape(n, 3 * m, 6))
    return r.ravel(), J


def _masked_solve(dataset, d_hat, V0: CalibParams, weights, free: np.ndarray, opts: LmOptions | None):
    base = V0.to_vector()

    def full(x: np.ndarray) -> np.ndarray:
        v = base.copy()
        v[free] = x
        return v

    def residual(x: np.ndarray) -> np.ndarray:
        try:
            V = CalibParams.from_vector(full(x))
        except ValueError:
            return np.full(3 * dataset.board.n_corners * dataset.n_images, np.inf)
        return depth_residuals(V, dataset, d_hat, weights)

    def jacobian(x: np.ndarray) -> np.ndarray:
        return depth_jacobian(CalibParams.from_vector(full(x)), dataset, d_hat, weights)[:, free]

    x, report = lm_solve(residual, jacobian, base[free], opts)
    return CalibParams.from_vector(full(x)), report


def update_distortion(
    dataset: CalibrationDataset, d_hat, V: CalibParams, weights: VarianceWeights, opts: LmOptions | None = None
) -> tuple[Distortion, LmReport]:
    """Distortion minimizing the joint objective with every other parameter fixed."""
    free = np.zeros(N_SHARED + 6 * V.n_images, dtype=bool)
    free[4:8] = True
    V_new, report = _masked_solve(dataset, d_hat, V, weights, free, opts)
    return V_new.kc, report


def local_optimize_depth(
    dataset: CalibrationDataset, d_hat, V: CalibParams, weights: VarianceWeights, opts: LmOptions | None = None
) -> tuple[Pose, ...]:
    """Refine each pose alone against its image's pixels and ranges."""
    poses = []
    for j in range(dataset.n_images):
        sub = dataset.with_images([dataset.images[j]])
        Vj = CalibParams(V.K, V.kc, (V.poses[j],))
        w = VarianceWeights(weights.sigma_x[j : j + 1], weights.sigma_d[j : j + 1])
        free = np.zeros(N_SHARED + 6, dtype=bool)
        free[N_SHARED:] = True
        Vj_new, _ = _masked_solve(sub, [d_hat[j]], Vj, w, free, opts)
        poses.append(Vj_new.poses[0])
    return tuple(poses)


def global_optimize_depth(
    dataset: CalibrationDataset, d_hat, V0: CalibParams, weights: VarianceWeights, opts: LmOptions | None = None
) -> tuple[CalibParams, LmReport]:
    """Joint bundle over all parameters of the variance-normalized pixel + range objective."""
    free = np.ones(N_SHARED + 6 * V0.n_images, dtype=bool)
    return _masked_solve(dataset, d_hat, V0, weights, free, opts)


def joint_cost(V: CalibParams, dataset: CalibrationDataset, d_hat, weights: VarianceWeights) -> float:
    r = depth_residuals(V, dataset, d_hat, weights)
    return float(r @ r)


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


def depth_based_calib(
    dataset: CalibrationDataset,
    options: DepthCalibOptions | None = None,
    initial: TraditionalResult | None = None,
) -> tuple[CalibParams, DepthCalibDiagnostics]:
    """Run every stage of the depth-assisted calibration.

    ``initial`` lets a caller reuse an already computed 2-D-only calibration
    of the same dataset.

    Raises:
        StageFailure: a stage raised; the original error is the ``cause``.
    """
    options = options or DepthCalibOptions()
    if not dataset.has_depth:
        raise ValueError("every image needs a depth map or per-corner depths")
    diag = DepthCalibDiagnostics()
    board = dataset.board
    pairs = board.neighbor_pairs()
    corners = [im.corners_px for im in dataset.images]
    lm = options.lm
    stage = "color_calib"

    try:
        trad = initial if initial is not None else calibrate_traditional(dataset, lm)
        V = trad.params
        diag.stage_costs["color_calib"] = trad.report.final_cost
        diag.reports["color_calib"] = trad.report

        stage = "planarize"
        plan = planarize_dataset(dataset, V.K, V.kc, options.ransac)
        d_hat = plan.depths

        stage = "update_K"
        K = V.K
        for count in range(options.max_k_iterations):
            K, report = update_K(corners, d_hat, K, V.kc, board.square_size, pairs, lm)
            plan = planarize_dataset(dataset, K, V.kc, options.ransac)
            d_hat = plan.depths
            eps = error_in_3d(corners, d_hat, K, V.kc, board.square_size, pairs)
            done = k_update_converged(eps, board.square_size)
            diag.k_trace.append(KUpdateState(count + 1, eps, done, K))
            diag.reports["update_K"] = report
            if done:
                break
        diag.k_converged = bool(diag.k_trace and diag.k_trace[-1].converged)
        diag.planarize_fallbacks = list(plan.fallback_images)
        if not diag.k_converged:
            diag.warnings.append(
                f"intrinsics update did not reach the square-size criterion in {options.max_k_iterations} iterations"
            )

        stage = "local_optim"
        V_trad_weights = estimate_variances(dataset, V, d_hat)
        V = CalibParams(K, V.kc, reinit_poses(dataset, K))
        V = V.with_(poses=local_optimize_depth(dataset, d_hat, V, V_trad_weights, lm))
        weights = estimate_variances(dataset, V, d_hat)
        diag.weights = weights
        diag.stage_costs["local_optim"] = joint_cost(V, dataset, d_hat, weights)

        stage = "update_distortion"
        kc, report = update_distortion(dataset, d_hat, V, weights, lm)
        V = V.with_(kc=kc)
        diag.reports["update_distortion"] = report
        diag.stage_costs["update_distortion"] = report.final_cost

        stage = "global_optim"
        V_final, report = global_optimize_depth(dataset, d_hat, V, weights, lm)
        diag.reports["global_optim"] = report
        diag.stage_costs["global_optim"] = report.final_cost
        if not report.converged:
            diag.warnings.append("global optimization hit the iteration cap")
    except CalibrationError as exc:
        diag.failed_stage = stage
        raise StageFailure(stage, exc, diag) from exc
    except (ValueError, np.linalg.LinAlgError) as exc:
        diag.failed_stage = stage
        raise StageFailure(stage, NumericalFailure(str(exc)), diag) from exc

    return V_final, diag

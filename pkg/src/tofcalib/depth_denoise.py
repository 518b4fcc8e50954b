"""Per-corner depth denoising by board planarization.

For one image: collect depth pixels inside the white checker cells, lift them
to 3-D along their viewing rays, fit the board plane robustly (RANSAC on
3-point hypotheses, SVD refit on the consensus set), then replace each corner's
range by the distance at which its viewing ray meets the plane.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .camera_model import Distortion, Intrinsics, back_project, pixel_rays
from .dataset import BoardGeometry, CalibrationDataset, DepthMap, ImageData
from .errors import (
    DegenerateConfiguration,
    GridIncomplete,
    InsufficientInliers,
    NegativeIntersection,
    NoConvergence,
    PlaneFitFailed,
    RayParallelToPlane,
)

logger = logging.getLogger(__name__)

_PARALLEL_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Plane:
    """Plane ``{x : normal . x = offset}`` with unit normal and ``offset >= 0``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self) -> None:
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise ValueError("plane normal must be non-zero")
        n = n / norm
        rho = float(self.offset) / norm
        if rho < 0:
            n, rho = -n, -rho
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", rho)

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.normal - self.offset


@dataclass(frozen=True)
class RansacOptions:
    iterations: int = 200
    inlier_threshold: float = 15.0  # mm
    min_inlier_fraction: float = 0.5
    gradient_threshold: float = 20.0  # mm per pixel
    inset: float = 0.15  # fraction of the cell edge trimmed on every side
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (self.inlier_threshold > 0 and self.gradient_threshold > 0):
            raise ValueError("thresholds must be positive")
        if not 0 < self.min_inlier_fraction <= 1:
            raise ValueError("min_inlier_fraction must lie in (0, 1]")
        if not 0 <= self.inset < 0.5:
            raise ValueError("inset must lie in [0, 0.5)")


@dataclass(frozen=True, eq=False)
class CheckerCell:
    row: int
    col: int
    quad: np.ndarray  # (4, 2) pixel corners, order TL, TR, BR, BL in grid terms


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------


def segment_white_squares(
    corners_px: np.ndarray, rows: int, cols: int, parity: int, inset: float = 0.15
) -> list[CheckerCell]:
    """Checker cells of the requested colour, each shrunk by ``inset``.

    Cell ``(a, b)`` is bounded by corners ``(a, b)``, ``(a, b+1)``,
    ``(a+1, b+1)``, ``(a+1, b)`` and is selected when ``(a + b) % 2 == parity``.
    The shrunk quad's vertices are the points at bilinear parameters
    ``(inset, inset)`` ... ``(1-inset, 1-inset)`` of the cell.

    Raises:
        GridIncomplete: the corner list is not a full finite ``rows x cols`` grid.
    """
    corners_px = np.asarray(corners_px, dtype=float)
    if corners_px.shape != (rows * cols, 2) or not np.all(np.isfinite(corners_px)):
        raise GridIncomplete(f"expected a full {rows}x{cols} grid of finite corners")
    grid = corners_px.reshape(rows, cols, 2)
    lo, hi = inset, 1.0 - inset
    params = ((lo, lo), (hi, lo), (hi, hi), (lo, hi))  # (s along cols, t along rows)
    cells = []
    for a in range(rows - 1):
        for b in range(cols - 1):
            if (a + b) % 2 != parity:
                continue
            p00, p01, p11, p10 = grid[a, b], grid[a, b + 1], grid[a + 1, b + 1], grid[a + 1, b]
            quad = np.array(
                [(1 - s) * (1 - t) * p00 + s * (1 - t) * p01 + s * t * p11 + (1 - s) * t * p10 for s, t in params]
            )
            cells.append(CheckerCell(a, b, quad))
    return cells


def pixels_in_quad(quad: np.ndarray, width: int, height: int) -> np.ndarray:
    """Integer ``(u, v)`` pixel centres inside a convex quadrilateral."""
    quad = np.asarray(quad, dtype=float)
    u0 = max(int(np.ceil(quad[:, 0].min())), 0)
    u1 = min(int(np.floor(quad[:, 0].max())), width - 1)
    v0 = max(int(np.ceil(quad[:, 1].min())), 0)
    v1 = min(int(np.floor(quad[:, 1].max())), height - 1)
    if u1 < u0 or v1 < v0:
        return np.empty((0, 2), dtype=int)
    uu, vv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
    P = np.column_stack([uu.ravel(), vv.ravel()]).astype(float)
    edges = np.roll(quad, -1, axis=0) - quad
    rel = P[:, None, :] - quad[None, :, :]
    cross = edges[None, :, 0] * rel[:, :, 1] - edges[None, :, 1] * rel[:, :, 0]
    inside = np.all(cross >= 0, axis=1) | np.all(cross <= 0, axis=1)
    return P[inside].astype(int)


def white_square_pixels(
    corners_px: np.ndarray, board: BoardGeometry, depth: DepthMap, inset: float = 0.15
) -> np.ndarray:
    cells = segment_white_squares(corners_px, board.rows, board.cols, board.white_parity, inset)
    if not cells:
        return np.empty((0, 2), dtype=int)
    pix = np.vstack([pixels_in_quad(c.quad, depth.width, depth.height) for c in cells])
    # neighbouring cells never overlap after the inset, but keep the set unique anyway
    return np.unique(pix, axis=0) if len(pix) else pix


# ---------------------------------------------------------------------------
# Filtering and lifting
# ---------------------------------------------------------------------------


def gradient_filter(depth: DepthMap, pixels: np.ndarray, threshold: float) -> np.ndarray:
    """Keep pixels whose forward-difference depth gradient magnitude is below ``threshold``.

    At the last row/column the missing forward difference counts as zero.
    Invalid (non-finite) pixels and pixels next to invalid ones are dropped.
    """
    pixels = np.asarray(pixels, dtype=int).reshape(-1, 2)
    if len(pixels) == 0:
        return pixels
    D = depth.data
    gx = np.zeros_like(D)
    gy = np.zeros_like(D)
    gx[:, :-1] = D[:, 1:] - D[:, :-1]
    gy[:-1, :] = D[1:, :] - D[:-1, :]
    u, v = pixels[:, 0], pixels[:, 1]
    mag = np.hypot(gx[v, u], gy[v, u])
    keep = np.isfinite(D[v, u]) & np.isfinite(mag) & (mag < threshold)
    return pixels[keep]


def lift_to_3d(pixels: np.ndarray, depth: DepthMap, K: Intrinsics, kc: Distortion) -> np.ndarray:
    """Camera-frame points for depth pixels, sampled at the pixel centres."""
    pixels = np.asarray(pixels, dtype=int).reshape(-1, 2)
    if len(pixels) == 0:
        return np.empty((0, 3))
    d = depth.data[pixels[:, 1], pixels[:, 0]]
    return back_project(pixels.astype(float), d, K, kc)


# ---------------------------------------------------------------------------
# Plane estimation
# ---------------------------------------------------------------------------


def fit_plane_svd(points: np.ndarray) -> Plane:
    """Total-least-squares plane through the points.

    Raises:
        DegenerateConfiguration: fewer than three points or (near-)collinear points.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 3:
        raise DegenerateConfiguration("need at least three points for a plane")
    c = P.mean(axis=0)
    _, sv, vt = np.linalg.svd(P - c, full_matrices=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateConfiguration("points are collinear")
    n = vt[2]
    return Plane(n, float(n @ c))


def ransac_plane(
    points: np.ndarray, opts: RansacOptions | None = None, rng: np.random.Generator | None = None
) -> tuple[Plane, np.ndarray]:
    """Consensus plane and the indices of its inliers.

    All hypotheses are scored in one vectorized pass; ties go to the earliest
    hypothesis, so the result depends only on the RNG state.

    Raises:
        InsufficientInliers: the best consensus covers less than
            ``min_inlier_fraction`` of the points.
    """
    opts = opts or RansacOptions()
    rng = rng if rng is not None else np.random.default_rng(opts.seed)
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    n_pts = len(P)
    if n_pts < 3:
        raise InsufficientInliers("need at least three points")

    # sample distinct triples
    idx = np.empty((opts.iterations, 3), dtype=int)
    idx[:, 0] = rng.integers(0, n_pts, opts.iterations)
    idx[:, 1] = (idx[:, 0] + rng.integers(1, n_pts, opts.iterations)) % n_pts
    third = rng.integers(0, n_pts - 2, opts.iterations) if n_pts > 3 else np.zeros(opts.iterations, int)
    a, b = np.minimum(idx[:, 0], idx[:, 1]), np.maximum(idx[:, 0], idx[:, 1])
    third = third + (third >= a)
    third = third + (third >= b)
    idx[:, 2] = third

    A, B, C = P[idx[:, 0]], P[idx[:, 1]], P[idx[:, 2]]
    normals = np.cross(B - A, C - A)
    norms = np.linalg.norm(normals, axis=1)
    scale = np.linalg.norm(B - A, axis=1) * np.linalg.norm(C - A, axis=1)
    valid = norms > 1e-9 * np.maximum(scale, 1e-300)
    if not valid.any():
        raise InsufficientInliers("all sampled triples are degenerate")
    normals = normals[valid] / norms[valid, None]
    offsets = np.einsum("ij,ij->i", normals, A[valid])
    counts = np.count_nonzero(np.abs(P @ normals.T - offsets) < opts.inlier_threshold, axis=0)
    best = int(np.argmax(counts))
    need = opts.min_inlier_fraction * n_pts
    if counts[best] < need:
        raise InsufficientInliers(f"best consensus {counts[best]}/{n_pts} below {opts.min_inlier_fraction:.0%}")

    inliers = np.flatnonzero(np.abs(P @ normals[best] - offsets[best]) < opts.inlier_threshold)
    try:
        plane = fit_plane_svd(P[inliers])
        refined = np.flatnonzero(np.abs(plane.distance(P)) < opts.inlier_threshold)
        if len(refined) >= need:
            inliers = refined
            plane = fit_plane_svd(P[inliers])
    except DegenerateConfiguration as exc:
        raise InsufficientInliers("consensus set is degenerate") from exc
    return plane, inliers


def intersect_rays_plane(
    corners_px: np.ndarray, plane: Plane, K: Intrinsics, kc: Distortion
) -> tuple[np.ndarray, np.ndarray]:
    """Ranges where corner rays meet the plane; second array flags failed rays (nan range)."""
    rays = pixel_rays(np.atleast_2d(corners_px), K, kc)
    denom = rays @ plane.normal
    ok = np.abs(denom) > _PARALLEL_TOL
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(ok, plane.offset / np.where(ok, denom, 1.0), np.nan)
    ok &= s > 0
    s[~ok] = np.nan
    return s, ~ok


def intersect_ray_plane(corner_px, plane: Plane, K: Intrinsics, kc: Distortion) -> float:
    """Range at which the viewing ray through one pixel meets the plane.

    Raises:
        RayParallelToPlane: the ray is parallel to the plane.
        NegativeIntersection: the plane lies behind the camera along the ray.
    """
    ray = pixel_rays(np.asarray(corner_px, dtype=float).reshape(2), K, kc)
    denom = float(ray @ plane.normal)
    if abs(denom) <= _PARALLEL_TOL:
        raise RayParallelToPlane("viewing ray is parallel to the plane")
    s = plane.offset / denom
    if not s > 0:
        raise NegativeIntersection("plane intersects the ray behind the camera")
    return float(s)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PlanarizeResult:
    depths: np.ndarray
    fallback: np.ndarray  # per-corner flag: raw depth kept
    plane: Plane
    n_pixels: int
    n_inliers: int


def planarize_depth(
    image: ImageData,
    board: BoardGeometry,
    K: Intrinsics,
    kc: Distortion,
    opts: RansacOptions | None = None,
    rng: np.random.Generator | None = None,
) -> PlanarizeResult:
    """Plane-consistent ranges for every corner of one image.

    Corners whose ray misses the fitted plane keep their raw measured depth
    and are flagged in ``fallback``.

    Raises:
        PlaneFitFailed: no depth map, no usable white-square pixels, a lens
            model that cannot be inverted over the cells, or a failed RANSAC.
    """
    opts = opts or RansacOptions()
    if image.depth_map is None:
        raise PlaneFitFailed("image has no depth map")
    depth = image.depth_map
    rng = rng if rng is not None else np.random.default_rng(opts.seed)
    try:
        pixels = white_square_pixels(image.corners_px, board, depth, opts.inset)
        pixels = gradient_filter(depth, pixels, opts.gradient_threshold)
        if len(pixels) < 3:
            raise PlaneFitFailed(f"only {len(pixels)} usable white-square pixels")
        points = lift_to_3d(pixels, depth, K, kc)
        plane, inliers = ransac_plane(points, opts, rng)
        d_hat, failed = intersect_rays_plane(image.corners_px, plane, K, kc)
    except (InsufficientInliers, NoConvergence, GridIncomplete) as exc:
        raise PlaneFitFailed(str(exc)) from exc

    if failed.any():
        raw = image.raw_corner_depths()
        d_hat = np.where(failed, raw, d_hat)
    return PlanarizeResult(d_hat, failed, plane, len(pixels), len(inliers))


def image_rng(seed: int, image_index: int) -> np.random.Generator:
    """RNG for one image, independent of the order images are processed in."""
    return np.random.default_rng([int(seed), int(image_index)])


@dataclass(frozen=True, eq=False)
class DatasetPlanarization:
    depths: tuple[np.ndarray, ...]
    fallback_images: tuple[int, ...]
    results: tuple[PlanarizeResult | None, ...]


def planarize_dataset(
    dataset: CalibrationDataset, K: Intrinsics, kc: Distortion, opts: RansacOptions | None = None
) -> DatasetPlanarization:
    """Planarize every image; images whose plane fit fails keep their raw corner depths."""
    opts = opts or RansacOptions()
    depths, fallback, results = [], [], []
    for j, im in enumerate(dataset.images):
        try:
            res = planarize_depth(im, dataset.board, K, kc, opts, image_rng(opts.seed, j))
        except PlaneFitFailed as exc:
            logger.debug("image %d: planarization failed (%s), using raw depths", j, exc)
            depths.append(np.asarray(im.raw_corner_depths(), dtype=float))
            fallback.append(j)
            results.append(None)
            continue
        depths.append(res.depths)
        results.append(res)
    return DatasetPlanarization(tuple(depths), tuple(fallback), tuple(results))

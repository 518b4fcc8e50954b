"""Groundtruth-known checkerboard datasets for a simulated TOF camera.

The default configuration mirrors the benchmark protocol used throughout the
package: an 11x11 interior-corner board (12x12 squares) of 50 mm checkers, a
284.4 px focal length on a 200x200 sensor, and noise of 0.01 px on corners
and 10 mm on every depth reading.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .camera_model import (
    Distortion,
    Intrinsics,
    Pose,
    depth_of,
    pixel_rays,
    project,
    rodrigues,
    rodrigues_inv,
)
from .dataset import BoardGeometry, CalibParams, CalibrationDataset, DepthMap, GroundTruth, ImageData
from .errors import NoConvergence, RejectionExhausted, SubsetTooLarge

MAX_POSE_TRIES = 1000


@dataclass(frozen=True)
class SynthConfig:
    rows: int = 11
    cols: int = 11
    square_size: float = 50.0
    white_parity: int = 0
    K: Intrinsics = field(default_factory=lambda: Intrinsics(284.4, 284.4, 100.0, 100.0))
    kc: Distortion = field(default_factory=lambda: Distortion(0.1, -0.05, 0.001, 0.002))
    image_size: tuple[int, int] = (200, 200)
    n_images: int = 7
    distance_range: tuple[float, float] = (600.0, 1500.0)
    max_tilt: float = np.deg2rad(40.0)
    center_fraction: float = 0.6
    sigma_px: float = 0.01
    sigma_d: float = 10.0
    seed: int = 0
    depth_maps: bool = True

    def __post_init__(self) -> None:
        if self.sigma_px < 0 or self.sigma_d < 0:
            raise ValueError("noise levels must be non-negative")
        lo, hi = self.distance_range
        if not 0 < lo <= hi:
            raise ValueError("distance range must be positive and ordered")
        if not 0 <= self.max_tilt < np.pi / 2:
            raise ValueError("max_tilt must lie in [0, pi/2)")
        if not 0 < self.center_fraction <= 1:
            raise ValueError("center_fraction must lie in (0, 1]")

    @property
    def board(self) -> BoardGeometry:
        return generate_board(self.rows, self.cols, self.square_size, self.white_parity)

    def with_(self, **changes) -> SynthConfig:
        return replace(self, **changes)


def generate_board(rows: int, cols: int, square_size: float, white_parity: int = 0) -> BoardGeometry:
    """Board with explicit interior-corner counts (11x11 gives the 121-corner target)."""
    return BoardGeometry(int(rows), int(cols), float(square_size), int(white_parity))


def _rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _in_image(px: np.ndarray, size: tuple[int, int]) -> bool:
    w, h = size
    return bool(np.all(np.isfinite(px)) and np.all(px[:, 0] >= 0) and np.all(px[:, 0] <= w - 1)
                and np.all(px[:, 1] >= 0) and np.all(px[:, 1] <= h - 1))


def sample_pose(rng: np.random.Generator, config: SynthConfig) -> Pose:
    """Random board pose with every interior corner visible.

    The board centre is placed on the ray through a pixel drawn uniformly from
    the central ``center_fraction`` of the image, at a distance drawn
    uniformly from ``distance_range``; the board is tilted about a random
    in-plane axis by an angle uniform in ``[0, max_tilt]`` and spun about its
    normal by a uniform angle.

    Raises:
        RejectionExhausted: no valid pose within ``MAX_POSE_TRIES`` draws.
    """
    board = config.board
    X = board.world_points
    center_w = np.array([(board.cols - 1) / 2, (board.rows - 1) / 2, 0.0]) * board.square_size
    w, h = config.image_size
    frac = config.center_fraction
    for _ in range(MAX_POSE_TRIES):
        dist = rng.uniform(*config.distance_range)
        tilt = rng.uniform(0.0, config.max_tilt)
        axis_angle = rng.uniform(-np.pi, np.pi)
        spin = rng.uniform(-np.pi, np.pi)
        u = rng.uniform(w * (1 - frac) / 2, w * (1 + frac) / 2)
        v = rng.uniform(h * (1 - frac) / 2, h * (1 + frac) / 2)

        axis = np.array([np.cos(axis_angle), np.sin(axis_angle), 0.0])
        R = rodrigues(axis * tilt) @ _rot_z(spin)
        try:
            ray = pixel_rays(np.array([u, v]), config.K, config.kc)
        except NoConvergence:
            continue
        t = dist * ray - R @ center_w
        pose = Pose(rodrigues_inv(R), t)
        x_c = X @ R.T + t
        if np.any(x_c[:, 2] <= 0):
            continue
        if _in_image(project(X, pose, config.K, config.kc), config.image_size):
            return pose
    raise RejectionExhausted(f"no valid pose after {MAX_POSE_TRIES} tries")


def board_plane(pose: Pose) -> tuple[np.ndarray, float]:
    """Camera-frame plane ``{x : n.x = rho}`` of the board, with ``rho >= 0``."""
    n = pose.R[:, 2].copy()
    rho = float(n @ pose.t)
    if rho < 0:
        n, rho = -n, -rho
    return n, rho


def render_depth_at(
    x_p: np.ndarray, pose: Pose, K: Intrinsics, kc: Distortion, board: BoardGeometry | None = None
) -> np.ndarray:
    """Exact range of the board plane along the rays through ``x_p``.

    When ``board`` is given, rays that miss the physical board (interior
    corners plus one square of margin) get ``nan``.
    """
    x_p = np.atleast_2d(np.asarray(x_p, dtype=float))
    rays = pixel_rays(x_p, K, kc)
    n, rho = board_plane(pose)
    denom = rays @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(np.abs(denom) > 1e-12, rho / denom, np.nan)
    s[~(s > 0)] = np.nan
    if board is not None:
        pts = rays * s[:, None]
        bw = (pts - pose.t) @ pose.R  # board-frame coordinates
        c = board.square_size
        inside = (
            (bw[:, 0] >= -c) & (bw[:, 0] <= board.cols * c) & (bw[:, 1] >= -c) & (bw[:, 1] <= board.rows * c)
        )
        s[~inside] = np.nan
    return s


def _render_depth_map(pose: Pose, config: SynthConfig) -> DepthMap:
    w, h = config.image_size
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    px = np.column_stack([uu.ravel(), vv.ravel()])
    return DepthMap(render_depth_at(px, pose, config.K, config.kc, config.board).reshape(h, w))


def render_dataset(config: SynthConfig) -> tuple[CalibrationDataset, GroundTruth]:
    """Noiseless dataset and its groundtruth for ``config.n_images`` random poses."""
    rng = np.random.default_rng(config.seed)
    board = config.board
    X = board.world_points
    poses = tuple(sample_pose(rng, config) for _ in range(config.n_images))

    images, pix_all, depth_all, planes = [], [], [], []
    for pose in poses:
        px = project(X, pose, config.K, config.kc)
        d = np.asarray(depth_of(X, pose))
        dm = _render_depth_map(pose, config) if config.depth_maps else None
        images.append(ImageData(px, d, dm))
        pix_all.append(px)
        depth_all.append(d)
        planes.append(board_plane(pose))

    gt = GroundTruth(
        params=CalibParams(config.K, config.kc, poses),
        corners_px=tuple(pix_all),
        depths=tuple(depth_all),
        planes=tuple(planes),
    )
    ds = CalibrationDataset(board=board, images=tuple(images), image_size=config.image_size, groundtruth=gt)
    return ds, gt


def add_noise(dataset: CalibrationDataset, sigma_px: float, sigma_d: float, seed: int) -> CalibrationDataset:
    """I.i.d. Gaussian noise on corner pixels and on every depth reading.

    The groundtruth attached to ``dataset`` is carried over untouched.
    """
    if sigma_px < 0 or sigma_d < 0:
        raise ValueError("noise levels must be non-negative")
    if sigma_px == 0 and sigma_d == 0:
        return dataset
    rng = np.random.default_rng(seed)
    images = []
    for im in dataset.images:
        corners = im.corners_px + rng.normal(0.0, sigma_px, im.corners_px.shape)
        depths = None
        if im.corner_depths is not None:
            depths = im.corner_depths + rng.normal(0.0, sigma_d, im.corner_depths.shape)
        dm = None
        if im.depth_map is not None:
            data = im.depth_map.data + rng.normal(0.0, sigma_d, im.depth_map.data.shape)
            dm = DepthMap(data)
        images.append(ImageData(corners, depths, dm))
    return dataset.with_images(images)


def generate(config: SynthConfig) -> CalibrationDataset:
    """Rendered dataset with the configured measurement noise applied."""
    ds, _ = render_dataset(config)
    return add_noise(ds, config.sigma_px, config.sigma_d, seed=config.seed + 1_000_003)


def subset(dataset: CalibrationDataset, n_images: int, corner_grid_k: int) -> CalibrationDataset:
    """First ``n_images`` images restricted to the top-left ``k x k`` interior corners.

    Depth maps are kept whole; only the corner lists and the board shrink.

    Raises:
        SubsetTooLarge: more images or a larger grid than the dataset holds.
    """
    board = dataset.board
    k = int(corner_grid_k)
    if not 1 <= n_images <= dataset.n_images:
        raise SubsetTooLarge(f"requested {n_images} images, dataset has {dataset.n_images}")
    if not 2 <= k <= min(board.rows, board.cols):
        raise SubsetTooLarge(f"requested a {k}x{k} corner grid from a {board.rows}x{board.cols} board")
    idx = (np.arange(k)[:, None] * board.cols + np.arange(k)[None, :]).ravel()
    new_board = BoardGeometry(k, k, board.square_size, board.white_parity)
    images = []
    for im in dataset.images[:n_images]:
        depths = None if im.corner_depths is None else im.corner_depths[idx]
        images.append(ImageData(im.corners_px[idx], depths, im.depth_map))
    gt = dataset.groundtruth
    if gt is not None:
        gt = GroundTruth(
            params=CalibParams(gt.params.K, gt.params.kc, gt.params.poses[:n_images]),
            corners_px=tuple(c[idx] for c in gt.corners_px[:n_images]),
            depths=tuple(d[idx] for d in gt.depths[:n_images]),
            planes=tuple(gt.planes[:n_images]),
        )
    return CalibrationDataset(board=new_board, images=tuple(images), image_size=dataset.image_size, groundtruth=gt)

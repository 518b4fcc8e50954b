"""Board, measurement and parameter containers shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .camera_model import Distortion, Intrinsics, Pose


@dataclass(frozen=True)
class BoardGeometry:
    """Planar checkerboard with ``rows x cols`` interior corners.

    Interior corner ``(i, j)`` sits at ``(j * square_size, i * square_size, 0)``
    in the board frame; corners are stored row-major.  The checker cell whose
    top-left corner is ``(a, b)`` is white iff ``(a + b) % 2 == white_parity``.
    """

    rows: int
    cols: int
    square_size: float
    white_parity: int = 0

    def __post_init__(self) -> None:
        if self.rows < 2 or self.cols < 2:
            raise ValueError(f"board needs at least 2x2 interior corners, got {self.rows}x{self.cols}")
        if not self.square_size > 0:
            raise ValueError("square_size must be positive")
        if self.white_parity not in (0, 1):
            raise ValueError("white_parity must be 0 or 1")

    @property
    def n_corners(self) -> int:
        return self.rows * self.cols

    @property
    def world_points(self) -> np.ndarray:
        i, j = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        pts = np.zeros((self.n_corners, 3))
        pts[:, 0] = j.ravel() * self.square_size
        pts[:, 1] = i.ravel() * self.square_size
        return pts

    def neighbor_pairs(self) -> np.ndarray:
        """Index pairs of horizontally and vertically adjacent corners, each pair once."""
        idx = np.arange(self.n_corners).reshape(self.rows, self.cols)
        horiz = np.column_stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()])
        vert = np.column_stack([idx[:-1, :].ravel(), idx[1:, :].ravel()])
        return np.vstack([horiz, vert])


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Row-major range image in mm; non-finite entries are invalid pixels."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=float)
        if data.ndim != 2 or data.size == 0:
            raise ValueError("depth map must be a non-empty 2-D grid")
        finite = np.isfinite(data)
        if np.any(data[finite] <= 0):
            raise ValueError("valid depth values must be positive")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def sample(self, x_p: np.ndarray) -> np.ndarray:
        """Bilinear lookup at sub-pixel positions (pixel centres at integer coordinates)."""
        x_p = np.atleast_2d(np.asarray(x_p, dtype=float))
        u = np.clip(x_p[:, 0], 0, self.width - 1)
        v = np.clip(x_p[:, 1], 0, self.height - 1)
        u0 = np.minimum(np.floor(u).astype(int), self.width - 2) if self.width > 1 else np.zeros(len(u), int)
        v0 = np.minimum(np.floor(v).astype(int), self.height - 2) if self.height > 1 else np.zeros(len(v), int)
        u1 = np.minimum(u0 + 1, self.width - 1)
        v1 = np.minimum(v0 + 1, self.height - 1)
        a = u - u0
        b = v - v0
        D = self.data
        return (
            (1 - a) * (1 - b) * D[v0, u0]
            + a * (1 - b) * D[v0, u1]
            + (1 - a) * b * D[v1, u0]
            + a * b * D[v1, u1]
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DepthMap):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data, equal_nan=True))


@dataclass(frozen=True, eq=False)
class ImageData:
    """Measurements for one calibration image."""

    corners_px: np.ndarray
    corner_depths: np.ndarray | None = None
    depth_map: DepthMap | None = None

    def __post_init__(self) -> None:
        corners = np.array(self.corners_px, dtype=float).reshape(-1, 2)
        corners.flags.writeable = False
        object.__setattr__(self, "corners_px", corners)
        if self.corner_depths is not None:
            depths = np.array(self.corner_depths, dtype=float).reshape(-1)
            if len(depths) != len(corners):
                raise ValueError("corner_depths length must match corner count")
            if np.any(~(depths > 0)):
                raise ValueError("corner depths must be positive")
            depths.flags.writeable = False
            object.__setattr__(self, "corner_depths", depths)

    @property
    def has_depth(self) -> bool:
        return self.corner_depths is not None or self.depth_map is not None

    def raw_corner_depths(self) -> np.ndarray:
        """Measured range at each corner: the per-corner values or a depth-map lookup."""
        if self.corner_depths is not None:
            return np.asarray(self.corner_depths)
        if self.depth_map is not None:
            return self.depth_map.sample(self.corners_px)
        raise ValueError("image carries no depth measurements")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageData):
            return NotImplemented
        same_depths = (self.corner_depths is None and other.corner_depths is None) or (
            self.corner_depths is not None
            and other.corner_depths is not None
            and np.array_equal(self.corner_depths, other.corner_depths)
        )
        return (
            np.array_equal(self.corners_px, other.corners_px)
            and same_depths
            and self.depth_map == other.depth_map
        )


@dataclass(frozen=True, eq=False)
class CalibParams:
    """Full unknown vector: intrinsics, distortion and one pose per image.

    The flat layout used by the solvers is
    ``[fx, fy, cx, cy, k1, k2, k3, k4, rvec_0, t_0, rvec_1, t_1, ...]``.
    """

    K: Intrinsics
    kc: Distortion
    poses: tuple[Pose, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "poses", tuple(self.poses))

    @property
    def n_images(self) -> int:
        return len(self.poses)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.K.to_array(), self.kc.to_array()] + [p.to_array() for p in self.poses])

    @classmethod
    def from_vector(cls, v) -> CalibParams:
        v = np.asarray(v, dtype=float)
        n = (len(v) - 8) // 6
        if len(v) != 8 + 6 * n:
            raise ValueError(f"parameter vector of length {len(v)} is not 8 + 6N")
        poses = tuple(Pose.from_array(v[8 + 6 * j : 14 + 6 * j]) for j in range(n))
        return cls(Intrinsics.from_array(v[:4]), Distortion.from_array(v[4:8]), poses)

    def with_(self, **changes) -> CalibParams:
        return replace(self, **changes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CalibParams):
            return NotImplemented
        return self.K == other.K and self.kc == other.kc and self.poses == other.poses

    def to_dict(self) -> dict:
        return {
            "units": {"focal": "pixel", "principal_point": "pixel", "rvec": "radian", "t": "mm"},
            "fx": self.K.fx,
            "fy": self.K.fy,
            "cx": self.K.cx,
            "cy": self.K.cy,
            "kc": self.kc.to_array().tolist(),
            "poses": [{"rvec": p.rvec.tolist(), "t": p.t.tolist()} for p in self.poses],
        }

    @classmethod
    def from_dict(cls, d: dict) -> CalibParams:
        return cls(
            Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"])),
            Distortion.from_array(d["kc"]),
            tuple(Pose(p["rvec"], p["t"]) for p in d["poses"]),
        )


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Generating parameters and exact per-corner measurements of a synthetic dataset.

    ``planes`` holds one ``(normal, offset)`` pair per image in the camera
    frame, normal of unit length with ``offset >= 0``.
    """

    params: CalibParams
    corners_px: tuple[np.ndarray, ...]
    depths: tuple[np.ndarray, ...]
    planes: tuple[tuple[np.ndarray, float], ...] = ()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GroundTruth):
            return NotImplemented
        return (
            self.params == other.params
            and len(self.corners_px) == len(other.corners_px)
            and all(np.array_equal(a, b) for a, b in zip(self.corners_px, other.corners_px))
            and all(np.array_equal(a, b) for a, b in zip(self.depths, other.depths))
        )


@dataclass(frozen=True, eq=False)
class CalibrationDataset:
    board: BoardGeometry
    images: tuple[ImageData, ...]
    image_size: tuple[int, int] = (200, 200)  # (width, height)
    groundtruth: GroundTruth | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        for j, im in enumerate(self.images):
            if len(im.corners_px) != self.board.n_corners:
                raise ValueError(
                    f"image {j} has {len(im.corners_px)} corners, board expects {self.board.n_corners}"
                )

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def has_depth(self) -> bool:
        return all(im.has_depth for im in self.images)

    def with_images(self, images: Sequence[ImageData]) -> CalibrationDataset:
        return replace(self, images=tuple(images))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CalibrationDataset):
            return NotImplemented
        return (
            self.board == other.board
            and self.image_size == other.image_size
            and self.images == other.images
            and self.groundtruth == other.groundtruth
        )

"""Dataset manifests, depth-map files and calibration-parameter JSON.

A dataset on disk is a JSON manifest::

    {
      "schema_version": 1,
      "board": {"rows": 11, "cols": 11, "square_size_mm": 50.0, "white_parity": 0},
      "camera": {"width": 200, "height": 200},
      "images": [
        {"corners_px": [[u, v], ...], "corner_depths_mm": [...], "depth_map": "depth_000.pfm"}
      ],
      "groundtruth": "groundtruth.json"
    }

``corner_depths_mm``, ``depth_map`` and ``groundtruth`` are optional.  Depth
maps are sibling files referenced by relative path, either PFM (little-endian
grayscale float32, rows stored bottom-up) or CSV (one line per image row).
Invalid depth pixels are NaN in both.
"""

from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .dataset import BoardGeometry, CalibParams, CalibrationDataset, DepthMap, GroundTruth, ImageData
from .errors import ParseError, SchemaVersionMismatch

SCHEMA_VERSION = 1
GROUNDTRUTH_FILE = "groundtruth.json"


# ---------------------------------------------------------------------------
# Depth maps
# ---------------------------------------------------------------------------


def write_pfm(path, data: np.ndarray) -> None:
    """Write a single-channel float32 PFM, little-endian, bottom row first."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError(f"PFM holds a 2-D array, got shape {data.shape}")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into a float64 array with row 0 at the top.

    Raises:
        ParseError: malformed header, colour PFM or truncated payload.
    """
    with open(path, "rb") as f:
        raw = f.read()
    lines = []
    pos = 0
    while len(lines) < 3:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise ParseError(f"{path}: truncated PFM header")
        lines.append(raw[pos:end].decode("ascii", errors="replace").strip())
        pos = end + 1
    if lines[0] != "Pf":
        raise ParseError(f"{path}: line 1: expected grayscale 'Pf' magic, got {lines[0]!r}")
    try:
        w, h = (int(v) for v in lines[1].split())
        scale = float(lines[2])
    except ValueError as e:
        raise ParseError(f"{path}: bad PFM header: {e}") from None
    if w <= 0 or h <= 0 or scale == 0:
        raise ParseError(f"{path}: bad PFM dimensions {w}x{h} or scale {scale}")
    dtype = "<f4" if scale < 0 else ">f4"
    payload = raw[pos:]
    if len(payload) != 4 * w * h:
        raise ParseError(f"{path}: expected {4 * w * h} data bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype=dtype).reshape(h, w)[::-1]
    return data.astype(np.float64)


def write_depth_csv(path, data: np.ndarray) -> None:
    """One line per image row, comma-separated; values written at full precision."""
    data = np.asarray(data, dtype=float)
    with open(path, "w", encoding="utf-8") as f:
        for row in data:
            f.write(",".join("nan" if not math.isfinite(v) else repr(float(v)) for v in row) + "\n")


def read_depth_csv(path) -> np.ndarray:
    """Inverse of :func:`write_depth_csv`; empty fields read as invalid.

    Raises:
        ParseError: ragged rows or non-numeric entries, with the line number.
    """
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(v) if v.strip() else math.nan for v in line.split(",")])
            except ValueError as e:
                raise ParseError(f"{path}: line {lineno}: {e}") from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(f"{path}: line {lineno}: expected {len(rows[0])} values, got {len(rows[-1])}")
    if not rows:
        raise ParseError(f"{path}: empty depth grid")
    return np.array(rows, dtype=float)


def read_depth_map(path) -> DepthMap:
    path = Path(path)
    data = read_depth_csv(path) if path.suffix.lower() == ".csv" else read_pfm(path)
    try:
        return DepthMap(data)
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# Manifest helpers
# ---------------------------------------------------------------------------


def _field(obj: Any, key: str, where: str) -> Any:
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: expected an object")
    if key not in obj:
        raise ParseError(f"missing field '{where}.{key}'" if where else f"missing field '{key}'")
    return obj[key]


def _array(value: Any, where: str, shape_tail: tuple[int, ...] = ()) -> np.ndarray:
    try:
        a = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ParseError(f"field '{where}' is not numeric") from None
    if a.ndim != 1 + len(shape_tail) or a.shape[1:] != shape_tail:
        raise ParseError(f"field '{where}' has shape {a.shape}, expected (n, {', '.join(map(str, shape_tail))})")
    return a


def _load_json(path: Path) -> Any:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"{path}: {e}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None


def _dump_json(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def save_dataset(dataset: CalibrationDataset, path, depth_format: str = "pfm") -> Path:
    """Write ``dataset`` as a manifest plus sibling depth maps and groundtruth.

    ``path`` is the manifest file; a directory gets ``dataset.json`` inside it.
    PFM stores float32, so it round-trips exactly only for float32-valued
    maps; ``depth_format="csv"`` keeps full double precision.

    Returns:
        Path of the written manifest.
    """
    if depth_format not in ("pfm", "csv"):
        raise ValueError(f"depth_format must be 'pfm' or 'csv', got {depth_format!r}")
    path = Path(path)
    if path.suffix.lower() != ".json":
        path = path / "dataset.json"
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)

    images = []
    for j, im in enumerate(dataset.images):
        entry: dict[str, Any] = {"corners_px": im.corners_px.tolist()}
        if im.corner_depths is not None:
            entry["corner_depths_mm"] = im.corner_depths.tolist()
        if im.depth_map is not None:
            name = f"depth_{j:03d}.{depth_format}"
            (write_pfm if depth_format == "pfm" else write_depth_csv)(root / name, im.depth_map.data)
            entry["depth_map"] = name
        images.append(entry)

    b = dataset.board
    manifest: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "board": {
            "rows": b.rows,
            "cols": b.cols,
            "square_size_mm": b.square_size,
            "white_parity": b.white_parity,
        },
        "camera": {"width": dataset.image_size[0], "height": dataset.image_size[1]},
        "images": images,
    }
    if dataset.groundtruth is not None:
        _dump_json(groundtruth_to_dict(dataset.groundtruth), root / GROUNDTRUTH_FILE)
        manifest["groundtruth"] = GROUNDTRUTH_FILE
    _dump_json(manifest, path)
    return path


def load_dataset(path) -> CalibrationDataset:
    """Read a manifest written by :func:`save_dataset` or by hand.

    Raises:
        ParseError: malformed JSON (with line), missing or ill-typed fields
            (named), unreadable depth maps.
        SchemaVersionMismatch: ``schema_version`` other than the supported one.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    root = path.parent
    m = _load_json(path)
    version = _field(m, "schema_version", "")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")

    board_d = _field(m, "board", "")
    try:
        board = BoardGeometry(
            int(_field(board_d, "rows", "board")),
            int(_field(board_d, "cols", "board")),
            float(_field(board_d, "square_size_mm", "board")),
            int(board_d.get("white_parity", 0)),
        )
    except (TypeError, ValueError) as e:
        raise ParseError(f"field 'board': {e}") from None
    cam = _field(m, "camera", "")
    try:
        size = (int(_field(cam, "width", "camera")), int(_field(cam, "height", "camera")))
    except (TypeError, ValueError) as e:
        raise ParseError(f"field 'camera': {e}") from None

    raw_images = _field(m, "images", "")
    if not isinstance(raw_images, list):
        raise ParseError("field 'images' must be a list")
    images = []
    for j, entry in enumerate(raw_images):
        where = f"images[{j}]"
        corners = _array(_field(entry, "corners_px", where), f"{where}.corners_px", (2,))
        depths = None
        if entry.get("corner_depths_mm") is not None:
            depths = _array(entry["corner_depths_mm"], f"{where}.corner_depths_mm")
        dm = read_depth_map(root / entry["depth_map"]) if entry.get("depth_map") else None
        try:
            images.append(ImageData(corners, depths, dm))
        except ValueError as e:
            raise ParseError(f"{where}: {e}") from None

    gt = None
    if m.get("groundtruth"):
        gt = groundtruth_from_dict(_load_json(root / m["groundtruth"]))
    try:
        return CalibrationDataset(board, tuple(images), size, gt)
    except ValueError as e:
        raise ParseError(str(e)) from None


def groundtruth_to_dict(gt: GroundTruth) -> dict:
    return {
        "params": gt.params.to_dict(),
        "corners_px": [c.tolist() for c in gt.corners_px],
        "depths_mm": [d.tolist() for d in gt.depths],
        "planes": [{"normal": np.asarray(n).tolist(), "offset_mm": float(rho)} for n, rho in gt.planes],
    }


def groundtruth_from_dict(d: dict) -> GroundTruth:
    """Raises ParseError naming the offending field."""
    try:
        params = CalibParams.from_dict(_field(d, "params", "groundtruth"))
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"field 'groundtruth.params': {e}") from None
    corners = tuple(
        _array(c, f"groundtruth.corners_px[{j}]", (2,)) for j, c in enumerate(_field(d, "corners_px", "groundtruth"))
    )
    depths = tuple(_array(v, f"groundtruth.depths_mm[{j}]") for j, v in enumerate(_field(d, "depths_mm", "groundtruth")))
    planes = tuple((np.array(p["normal"], dtype=float), float(p["offset_mm"])) for p in d.get("planes", []))
    return GroundTruth(params, corners, depths, planes)


def sample_dataset_path() -> Path:
    """Manifest of the small capture-style dataset shipped with the package.

    Four 120x120 frames of a 6x6-corner board with PFM depth maps and no
    groundtruth, laid out exactly as a user-supplied capture would be.
    """
    return Path(str(resources.files("tofcalib").joinpath("data", "sample", "dataset.json")))


# ---------------------------------------------------------------------------
# Calibration parameters
# ---------------------------------------------------------------------------


def save_params(params: CalibParams, path) -> None:
    _dump_json(params.to_dict(), Path(path))


def load_params(path) -> CalibParams:
    d = _load_json(Path(path))
    try:
        return CalibParams.from_dict(d)
    except KeyError as e:
        raise ParseError(f"missing field {e}") from None
    except (TypeError, ValueError) as e:
        raise ParseError(str(e)) from None


__all__ = [
    "SCHEMA_VERSION",
    "load_dataset",
    "load_params",
    "read_depth_csv",
    "read_depth_map",
    "read_pfm",
    "save_dataset",
    "sample_dataset_path",
    "save_params",
    "write_depth_csv",
    "write_pfm",
]

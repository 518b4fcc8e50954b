"""Grid benchmark of 2-D-only versus depth-assisted calibration.

For every seed a noisy synthetic dataset is generated once.  Each grid cell
``(n_images, k)`` calibrates on the first ``n_images`` images restricted to
the top-left ``k x k`` corners, and is evaluated on all corners of those
images.  Results are merged by ``(cell, seed)`` so the report does not depend
on execution order or on the number of worker processes.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import CalibParams, CalibrationDataset, GroundTruth
from .depth_calib import DepthCalibOptions, StageFailure, depth_based_calib
from .errors import CalibrationError
from .metrics import mean_3d_error, relative_focal_error
from .synthetic import SynthConfig, generate, subset
from .traditional_calib import calibrate_traditional

logger = logging.getLogger(__name__)

METHODS = ("traditional", "depth")
DEFAULT_IMAGES = (3, 4, 5, 6, 7)
DEFAULT_GRID_K = (2, 3, 4, 5, 6)


@dataclass(frozen=True)
class BenchmarkConfig:
    """What to run; ``synth.seed`` is ignored in favour of the seed list."""

    synth: SynthConfig = field(default_factory=SynthConfig)
    images: tuple[int, ...] = DEFAULT_IMAGES
    grid_k: tuple[int, ...] = DEFAULT_GRID_K

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(int(n) for n in self.images))
        object.__setattr__(self, "grid_k", tuple(int(k) for k in self.grid_k))
        if max(self.images, default=0) > self.synth.n_images:
            raise ValueError(f"grid asks for {max(self.images)} images, config renders {self.synth.n_images}")

    def to_dict(self) -> dict:
        s = asdict(self.synth)
        s["K"] = asdict(self.synth.K)
        s["kc"] = asdict(self.synth.kc)
        s.pop("seed")
        return {"synth": s, "images": list(self.images), "grid_k": list(self.grid_k)}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class RunRecord:
    """Outcome of one method on one cell for one seed.

    ``status`` is ``"ok"``, ``"not-converged"`` (a result exists but the
    solver flagged it) or ``"failed"`` (no usable result; errors are inf).
    """

    n_images: int
    corners: int
    seed: int
    method: str
    error_mm: float
    focal_error: float
    status: str
    message: str = ""

    @property
    def key(self) -> tuple:
        return (self.corners, self.n_images, METHODS.index(self.method), self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["error_mm"] = _json_float(self.error_mm)
        d["focal_error"] = _json_float(self.focal_error)
        return d


@dataclass(frozen=True)
class Summary:
    median: float
    q25: float
    q75: float

    @property
    def iqr(self) -> float:
        return self.q75 - self.q25 if math.isfinite(self.q75) or math.isfinite(self.q25) else math.inf

    def to_dict(self) -> dict:
        return {k: _json_float(v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class CellResult:
    n_images: int
    corners: int
    method: str
    n_seeds: int
    n_failed: int
    n_not_converged: int
    error_mm: Summary
    focal_error: Summary

    def to_dict(self) -> dict:
        d = asdict(self)
        d["error_mm"] = self.error_mm.to_dict()
        d["focal_error"] = self.focal_error.to_dict()
        return d


@dataclass(frozen=True)
class BenchmarkReport:
    config: dict
    config_hash: str
    seeds: tuple[int, ...]
    cells: tuple[CellResult, ...]
    runs: tuple[RunRecord, ...]
    version: str = __version__

    def cell(self, n_images: int, corners: int, method: str) -> CellResult:
        for c in self.cells:
            if (c.n_images, c.corners, c.method) == (n_images, corners, method):
                return c
        raise KeyError((n_images, corners, method))

    def to_dict(self) -> dict:
        return {
            "provenance": {"config_hash": self.config_hash, "seeds": list(self.seeds), "version": self.version},
            "config": self.config,
            "cells": [c.to_dict() for c in self.cells],
            "runs": [r.to_dict() for r in self.runs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _json_float(v: float) -> float | str:
    # JSON has no infinity; failures are spelled out so the file stays valid
    return float(v) if math.isfinite(v) else ("inf" if v > 0 else "nan" if math.isnan(v) else "-inf")


def quantile(values, q: float) -> float:
    """Linear-interpolated quantile that treats ``inf`` (failed runs) as largest."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        return math.nan
    pos = q * (v.size - 1)
    lo, hi = math.floor(pos), math.ceil(pos)
    if v[lo] == v[hi]:
        return float(v[lo])
    if not math.isfinite(v[hi]):
        return math.inf
    return float(v[lo] + (v[hi] - v[lo]) * (pos - lo))


def summarize(values) -> Summary:
    return Summary(quantile(values, 0.5), quantile(values, 0.25), quantile(values, 0.75))


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def first_images(dataset: CalibrationDataset, n: int) -> CalibrationDataset:
    """First ``n`` images with every corner kept, groundtruth sliced to match."""
    gt = dataset.groundtruth
    if gt is not None:
        p = gt.params
        gt = GroundTruth(
            CalibParams(p.K, p.kc, p.poses[:n]), gt.corners_px[:n], gt.depths[:n], tuple(gt.planes[:n])
        )
    return replace(dataset, images=dataset.images[:n], groundtruth=gt)


def _evaluate(V: CalibParams, full: CalibrationDataset) -> tuple[float, float, str]:
    """Full-board error, focal error and, if the error is unusable, why."""
    gt = full.groundtruth.params.K
    ferr = relative_focal_error([V.K.fx, V.K.fy], [gt.fx, gt.fy])
    try:
        err = mean_3d_error(V, full)
    except (CalibrationError, ValueError, FloatingPointError) as e:
        return math.inf, ferr, f"evaluation failed: {_msg(e)}"
    if not math.isfinite(err):
        return math.inf, ferr, "evaluation failed: non-finite 3D error"
    return err, ferr, ""


def run_cell(
    dataset: CalibrationDataset, n_images: int, k: int, seed: int, options: DepthCalibOptions | None = None
) -> list[RunRecord]:
    """Both methods on one grid cell of one seed's dataset; never raises on calibration failure."""
    sub = subset(dataset, n_images, k)
    full = first_images(dataset, n_images)
    corners = k * k
    out = []

    trad = None
    try:
        with np.errstate(all="ignore"):
            trad = calibrate_traditional(sub, options.lm if options else None)
        err, ferr, why = _evaluate(trad.params, full)
        # a fit that cannot even be evaluated on the full board has diverged
        status = "ok" if trad.report.converged and not why else "not-converged"
        out.append(RunRecord(n_images, corners, seed, "traditional", err, ferr, status, why))
    except (CalibrationError, ValueError) as e:
        out.append(RunRecord(n_images, corners, seed, "traditional", math.inf, math.inf, "failed", _msg(e)))

    try:
        with np.errstate(all="ignore"):
            V, diag = depth_based_calib(sub, options, initial=trad)
        err, ferr, why = _evaluate(V, full)
        status = "ok" if diag.converged and not why else "not-converged"
        message = "; ".join([*diag.warnings, why] if why else diag.warnings)
        out.append(RunRecord(n_images, corners, seed, "depth", err, ferr, status, message))
    except (StageFailure, CalibrationError, ValueError) as e:
        out.append(RunRecord(n_images, corners, seed, "depth", math.inf, math.inf, "failed", _msg(e)))
    return out


def _msg(e: Exception) -> str:
    return f"{type(e).__name__}: {e}"


def _run_seed(args: tuple[BenchmarkConfig, int, DepthCalibOptions | None]) -> list[RunRecord]:
    config, seed, options = args
    dataset = generate(replace(config.synth, seed=seed))
    records = []
    for n in config.images:
        for k in config.grid_k:
            records.extend(run_cell(dataset, n, k, seed, options))
    logger.info("seed %d done", seed)
    return records


def run_benchmark(
    config: BenchmarkConfig | None = None,
    seeds=range(20),
    workers: int = 1,
    options: DepthCalibOptions | None = None,
) -> BenchmarkReport:
    """Run the grid for every seed and aggregate per cell and method.

    Seeds are distributed over ``workers`` processes; the merged report is
    identical for any worker count.
    """
    config = config or BenchmarkConfig()
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    jobs = [(config, s, options) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_run_seed, jobs))
    else:
        batches = [_run_seed(j) for j in jobs]
    runs = tuple(sorted((r for b in batches for r in b), key=lambda r: r.key))
    return aggregate(config, seeds, runs)


def aggregate(config: BenchmarkConfig, seeds, runs) -> BenchmarkReport:
    """Per-cell medians and quartiles; failed runs enter as inf."""
    runs = tuple(sorted(runs, key=lambda r: r.key))
    groups: dict[tuple, list[RunRecord]] = {}
    for r in runs:
        groups.setdefault((r.corners, r.n_images, METHODS.index(r.method)), []).append(r)
    cells = []
    for (corners, n, m), rs in sorted(groups.items()):
        cells.append(
            CellResult(
                n_images=n,
                corners=corners,
                method=METHODS[m],
                n_seeds=len(rs),
                n_failed=sum(r.status == "failed" for r in rs),
                n_not_converged=sum(r.status == "not-converged" for r in rs),
                error_mm=summarize([r.error_mm for r in rs]),
                focal_error=summarize([r.focal_error for r in rs]),
            )
        )
    return BenchmarkReport(
        config=config.to_dict(),
        config_hash=config.digest(),
        seeds=tuple(sorted(seeds)),
        cells=tuple(cells),
        runs=runs,
    )


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

TABLE_HEADER = [
    "corners",
    "images",
    "traditional_median_mm",
    "traditional_q25_mm",
    "traditional_q75_mm",
    "traditional_failed",
    "depth_median_mm",
    "depth_q25_mm",
    "depth_q75_mm",
    "depth_failed",
    "seeds",
]
FOCAL_HEADER = [
    "corners",
    "images",
    "traditional_median",
    "traditional_q25",
    "traditional_q75",
    "depth_median",
    "depth_q25",
    "depth_q75",
    "depth_not_converged",
]


def _fmt(v: float) -> str:
    return repr(float(v)) if math.isfinite(v) else ("inf" if v > 0 else "nan")


def _paired(report: BenchmarkReport) -> list[tuple[int, int, CellResult, CellResult]]:
    by_key = {(c.corners, c.n_images, c.method): c for c in report.cells}
    keys = sorted({(c.corners, c.n_images) for c in report.cells})
    return [(cn, n, by_key[(cn, n, "traditional")], by_key[(cn, n, "depth")]) for cn, n in keys]


def table_csv(report: BenchmarkReport) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for cn, n, t, d in _paired(report):
        w.writerow(
            [cn, n]
            + [_fmt(t.error_mm.median), _fmt(t.error_mm.q25), _fmt(t.error_mm.q75), t.n_failed]
            + [_fmt(d.error_mm.median), _fmt(d.error_mm.q25), _fmt(d.error_mm.q75), d.n_failed]
            + [t.n_seeds]
        )
    return buf.getvalue()


def focal_csv(report: BenchmarkReport) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FOCAL_HEADER)
    for cn, n, t, d in _paired(report):
        w.writerow(
            [cn, n]
            + [_fmt(t.focal_error.median), _fmt(t.focal_error.q25), _fmt(t.focal_error.q75)]
            + [_fmt(d.focal_error.median), _fmt(d.focal_error.q25), _fmt(d.focal_error.q75)]
            + [d.n_not_converged]
        )
    return buf.getvalue()


def table_text(report: BenchmarkReport) -> str:
    """Median mean-3D-error (mm) laid out with corners down and image counts across."""
    pairs = _paired(report)
    images = sorted({n for _, n, _, _ in pairs})
    corners = sorted({cn for cn, _, _, _ in pairs})
    lookup = {(cn, n): (t, d) for cn, n, t, d in pairs}
    width = 10
    head = f"{'method':<12}{'corners':>8}" + "".join(f"{n:>{width}}" for n in images)
    lines = [head, "-" * len(head)]
    for mi, method in enumerate(METHODS):
        for cn in corners:
            row = f"{method:<12}{cn:>8}"
            for n in images:
                cell = lookup.get((cn, n))
                row += f"{cell[mi].error_mm.median:>{width}.4f}" if cell else " " * width
            lines.append(row.rstrip())
    return "\n".join(lines) + "\n"


def export_report(report: BenchmarkReport, out_dir) -> dict[str, Path]:
    """Write the report JSON, the error table (CSV and text) and the focal-error series.

    Output bytes depend only on ``report``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "report": out / "report.json",
        "table_csv": out / "table1.csv",
        "table_txt": out / "table1.txt",
        "focal_csv": out / "focal_error.csv",
    }
    files["report"].write_text(report.to_json(), encoding="utf-8")
    files["table_csv"].write_text(table_csv(report), encoding="utf-8")
    files["table_txt"].write_text(table_text(report), encoding="utf-8")
    files["focal_csv"].write_text(focal_csv(report), encoding="utf-8")
    return files

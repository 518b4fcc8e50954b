"""Command-line entry point: ``tofcalib {synth,calibrate,denoise,benchmark,check-jacobian}``.

Exit codes: 0 success, 2 parse or configuration error, 3 numerical failure,
4 non-convergence (results and diagnostics are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .benchmark import DEFAULT_GRID_K, DEFAULT_IMAGES, BenchmarkConfig, export_report, run_benchmark
from .dataset import CalibParams, CalibrationDataset
from .depth_calib import StageFailure, VarianceWeights, depth_based_calib, depth_jacobian, depth_residuals
from .depth_denoise import RansacOptions, planarize_dataset
from .errors import CalibrationError, NoConvergence, ParseError, SubsetTooLarge
from .io import load_dataset, load_params, save_dataset, save_params
from .solvers import check_jacobian
from .synthetic import SynthConfig, generate, subset
from .traditional_calib import calibrate_traditional, reprojection_jacobian, reprojection_residuals

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_NOT_CONVERGED = 4

logger = logging.getLogger("tofcalib")


class ConfigError(Exception):
    pass


def _grid_k(corners: int) -> int:
    k = math.isqrt(corners)
    if k * k != corners or k < 2:
        raise ConfigError(f"--corners must be a square number >= 4 (4, 9, 16, ...), got {corners}")
    return k


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _select(dataset: CalibrationDataset, images: int | None, corners: int | None) -> CalibrationDataset:
    if images is None and corners is None:
        return dataset
    n = dataset.n_images if images is None else images
    if corners is None:
        k = dataset.board.rows
        if dataset.board.rows != dataset.board.cols:
            return dataset.with_images(dataset.images[:n])
    else:
        k = _grid_k(corners)
    return subset(dataset, n, k)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    k = _grid_k(args.corners)
    cfg = SynthConfig(
        rows=k,
        cols=k,
        n_images=args.images,
        sigma_px=args.noise_px,
        sigma_d=args.noise_depth,
        seed=args.seed,
    )
    path = save_dataset(generate(cfg), args.out, depth_format=args.depth_format)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    dataset = _select(load_dataset(args.dataset), args.images, args.corners)
    out = Path(args.out)
    diag_path = out.with_name(out.stem + ".diagnostics.json")
    if args.method == "traditional":
        res = calibrate_traditional(dataset)
        params, converged = res.params, res.report.converged
        diag = {"converged": converged, "stage_costs": res.stage_costs, "lm_report": res.report.to_dict()}
    else:
        try:
            params, d = depth_based_calib(dataset)
        except StageFailure as e:
            _write_json(e.diagnostics.to_dict(), diag_path)
            raise
        converged, diag = d.converged, d.to_dict()
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(params, out)
    _write_json(diag, diag_path)
    print(f"fx={params.K.fx:.4f} fy={params.K.fy:.4f} cx={params.K.cx:.4f} cy={params.K.cy:.4f}")
    print(f"wrote {out} and {diag_path}")
    if not converged:
        print("warning: calibration did not converge", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_denoise(args) -> int:
    dataset = _select(load_dataset(args.dataset), args.images, args.corners)
    if args.params:
        params = load_params(args.params)
    else:
        params = calibrate_traditional(dataset).params
    plan = planarize_dataset(dataset, params.K, params.kc, RansacOptions(seed=args.seed))
    out = {
        "units": "mm",
        "images": [
            {"depths_mm": np.asarray(d).tolist(), "fallback": j in plan.fallback_images}
            for j, d in enumerate(plan.depths)
        ],
    }
    _write_json(out, Path(args.out))
    print(f"wrote {args.out} ({len(plan.fallback_images)} image(s) fell back to raw depth)")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    synth = SynthConfig(sigma_px=args.noise_px, sigma_d=args.noise_depth, n_images=max(args.images))
    grid_k = tuple(_grid_k(c) for c in args.corners)
    config = BenchmarkConfig(synth=synth, images=args.images, grid_k=grid_k)
    seeds = range(args.seed, args.seed + args.seeds)
    report = run_benchmark(config, seeds, workers=args.workers)
    files = export_report(report, args.out)
    print(files["table_txt"].read_text(encoding="utf-8"), end="")
    print("wrote " + ", ".join(str(p) for p in files.values()))
    return EXIT_OK


def cmd_check_jacobian(args) -> int:
    cfg = SynthConfig(n_images=args.images, seed=args.seed)
    dataset = subset(generate(cfg), args.images, _grid_k(args.corners))
    V = dataset.groundtruth.params
    rng = np.random.default_rng(args.seed)
    v = V.to_vector() + rng.normal(0.0, 1e-3, V.to_vector().size)
    d_hat = [im.raw_corner_depths() for im in dataset.images]
    w = VarianceWeights.uniform(dataset.n_images, 0.01, 10.0)
    checks = {
        "reprojection": (
            lambda x: reprojection_residuals(CalibParams.from_vector(x), dataset),
            lambda x: reprojection_jacobian(CalibParams.from_vector(x), dataset),
        ),
        "joint": (
            lambda x: depth_residuals(CalibParams.from_vector(x), dataset, d_hat, w),
            lambda x: depth_jacobian(CalibParams.from_vector(x), dataset, d_hat, w),
        ),
    }
    worst = 0.0
    for name, (res_fn, jac_fn) in checks.items():
        err = check_jacobian(res_fn, jac_fn, v)
        worst = max(worst, err)
        print(f"{name:<13} max relative discrepancy {err:.3e}")
    return EXIT_OK if worst < args.tol else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tofcalib", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset with groundtruth")
    s.add_argument("--out", required=True, help="output directory or manifest path")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--images", type=int, default=7)
    s.add_argument("--corners", type=int, default=121, help="interior corners per image (square number)")
    s.add_argument("--noise-px", type=float, default=0.01)
    s.add_argument("--noise-depth", type=float, default=10.0)
    s.add_argument("--depth-format", choices=["pfm", "csv"], default="pfm")
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("calibrate", help="calibrate a dataset and write CalibParams JSON")
    c.add_argument("dataset", help="dataset manifest or directory")
    c.add_argument("--method", choices=["traditional", "depth"], default="depth")
    c.add_argument("--out", required=True, help="CalibParams JSON path; diagnostics go alongside")
    c.add_argument("--images", type=int, default=None, help="use only the first N images")
    c.add_argument("--corners", type=int, default=None, help="use the top-left sqrt(N) x sqrt(N) corners")
    c.set_defaults(func=cmd_calibrate)

    d = sub.add_parser("denoise", help="write plane-fitted corner depths")
    d.add_argument("dataset")
    d.add_argument("--out", required=True)
    d.add_argument("--params", default=None, help="CalibParams JSON; default runs a 2-D-only calibration")
    d.add_argument("--seed", type=int, default=0, help="RANSAC seed")
    d.add_argument("--images", type=int, default=None)
    d.add_argument("--corners", type=int, default=None)
    d.set_defaults(func=cmd_denoise)

    b = sub.add_parser("benchmark", help="run the images x corners grid over many seeds")
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--seed", type=int, default=0, help="first seed")
    b.add_argument("--seeds", type=int, default=20, help="number of seeds")
    b.add_argument("--images", type=_int_list, default=DEFAULT_IMAGES, help="e.g. 3,4,5,6,7")
    b.add_argument("--corners", type=_int_list, default=tuple(k * k for k in DEFAULT_GRID_K), help="e.g. 4,9,16")
    b.add_argument("--noise-px", type=float, default=0.01)
    b.add_argument("--noise-depth", type=float, default=10.0)
    b.add_argument("--workers", type=int, default=1)
    b.set_defaults(func=cmd_benchmark)

    j = sub.add_parser("check-jacobian", help="compare analytic and finite-difference Jacobians")
    j.add_argument("--seed", type=int, default=0)
    j.add_argument("--images", type=int, default=3)
    j.add_argument("--corners", type=int, default=9)
    j.add_argument("--tol", type=float, default=1e-5)
    j.set_defaults(func=cmd_check_jacobian)
    return p


def _cause(e: BaseException) -> BaseException:
    return e.cause if isinstance(e, StageFailure) else e


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParseError, SubsetTooLarge) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NOT_CONVERGED if isinstance(_cause(e), NoConvergence) else EXIT_NUMERICAL
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

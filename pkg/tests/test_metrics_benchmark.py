import json
import math
import random
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tofcalib.benchmark import (
    FOCAL_HEADER,
    TABLE_HEADER,
    BenchmarkConfig,
    RunRecord,
    aggregate,
    export_report,
    first_images,
    focal_csv,
    quantile,
    run_benchmark,
    run_cell,
    table_csv,
)
from tofcalib.camera_model import Pose
from tofcalib.dataset import CalibParams
from tofcalib.errors import MissingGroundtruth
from tofcalib.metrics import mean_3d_error, relative_focal_error
from tofcalib.synthetic import SynthConfig, generate, render_dataset

SMALL = BenchmarkConfig(SynthConfig(n_images=4), images=(3, 4), grid_k=(2, 3))


def test_mean_3d_error_zero_at_groundtruth(noiseless):
    ds, gt = noiseless
    assert mean_3d_error(gt.params, ds) == pytest.approx(0.0, abs=1e-9)


def test_mean_3d_error_depth_offset_frontal():
    ds, gt = render_dataset(
        SynthConfig(n_images=1, max_tilt=0.0, sigma_px=0, sigma_d=0, seed=2)
    )
    V = gt.params
    p = V.poses[0]
    moved = CalibParams(V.K, V.kc, (Pose(p.rvec, p.t + [0.0, 0.0, 1.0]),))
    assert mean_3d_error(moved, ds) == pytest.approx(1.0, rel=1e-9)


def test_mean_3d_error_requires_groundtruth(noiseless):
    ds, gt = noiseless
    with pytest.raises(MissingGroundtruth):
        mean_3d_error(gt.params, replace(ds, groundtruth=None))


def test_relative_focal_error_examples():
    f = [284.4, 284.4]
    assert relative_focal_error(f, f) == 0.0
    assert relative_focal_error(np.multiply(f, 1.1), f) == pytest.approx(0.1)
    assert relative_focal_error([290, 281], f) == pytest.approx(
        (5.6 + 3.4) / (2 * 284.4)
    )
    assert relative_focal_error([290, 281], f) == pytest.approx(0.0158, abs=1e-4)
    with pytest.raises(ValueError):
        relative_focal_error(f, [0.0, 1.0])


def test_quantile_with_failures():
    assert quantile([1.0, 2.0, 3.0], 0.5) == 2.0
    assert quantile([1.0, 2.0, 3.0, 4.0], 0.25) == pytest.approx(1.75)
    assert quantile([1.0, math.inf, math.inf], 0.5) == math.inf
    assert quantile([1.0, 2.0, math.inf], 0.5) == 2.0
    assert math.isnan(quantile([], 0.5))


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=30), st.floats(0, 1))
def test_quantile_matches_numpy(values, q):
    assert quantile(values, q) == pytest.approx(
        float(np.quantile(values, q)), rel=1e-12, abs=1e-12
    )


def test_first_images_keeps_full_board(noisy):
    full = first_images(noisy, 3)
    assert full.n_images == 3 and full.board == noisy.board
    assert full.groundtruth.params.n_images == 3


def test_run_cell_records_both_methods(noisy):
    recs = run_cell(noisy, 3, 3, seed=4)
    assert [r.method for r in recs] == ["traditional", "depth"]
    assert all(r.corners == 9 and r.n_images == 3 for r in recs)
    assert all(r.status in ("ok", "not-converged", "failed") for r in recs)


def test_noiseless_cell_is_exact():
    ds = generate(SynthConfig(n_images=3, sigma_px=0, sigma_d=0, seed=1))
    for r in run_cell(ds, 3, 3, seed=1):
        assert r.error_mm < 1e-4


@pytest.fixture(scope="module")
def small_report():
    return run_benchmark(SMALL, seeds=[0, 1])


def test_report_layout(small_report):
    assert len(small_report.cells) == 2 * 2 * 2
    assert len(small_report.runs) == 2 * 4 * 2
    for n in SMALL.images:
        for k in SMALL.grid_k:
            for m in ("traditional", "depth"):
                assert small_report.cell(n, k * k, m).n_seeds == 2
    with pytest.raises(KeyError):
        small_report.cell(7, 4, "depth")
    json.loads(small_report.to_json())


def test_report_repeatable(small_report):
    assert run_benchmark(SMALL, seeds=[1, 0]).to_json() == small_report.to_json()


def test_aggregate_permutation_invariant(small_report):
    runs = list(small_report.runs)
    random.Random(0).shuffle(runs)
    assert aggregate(SMALL, [1, 0], runs).to_json() == small_report.to_json()


def test_failures_enter_as_inf():
    runs = [
        RunRecord(
            3, 4, s, m, math.inf if s == 0 else 1.0, 0.1, "failed" if s == 0 else "ok"
        )
        for s in range(3)
        for m in ("traditional", "depth")
    ]
    rep = aggregate(SMALL, range(3), runs)
    c = rep.cell(3, 4, "depth")
    assert c.n_failed == 1 and c.error_mm.median == 1.0 and c.error_mm.q75 == math.inf
    doc = json.loads(rep.to_json())
    assert doc["runs"][0]["error_mm"] == "inf"


def test_export_full_grid_rows():
    runs = [
        RunRecord(n, k * k, 0, m, 1.0, 0.01, "ok")
        for n in range(3, 8)
        for k in range(2, 7)
        for m in ("traditional", "depth")
    ]
    rep = aggregate(BenchmarkConfig(), [0], runs)
    lines = table_csv(rep).splitlines()
    assert lines[0].split(",") == TABLE_HEADER
    assert len(lines) == 26
    assert len(focal_csv(rep).splitlines()) == 26


def test_export_empty_report(tmp_path):
    rep = aggregate(SMALL, [0], [])
    files = export_report(rep, tmp_path)
    assert files["table_csv"].read_text().splitlines() == [",".join(TABLE_HEADER)]
    assert files["focal_csv"].read_text().splitlines() == [",".join(FOCAL_HEADER)]


def test_export_deterministic(small_report, tmp_path):
    a = export_report(small_report, tmp_path / "a")
    b = export_report(small_report, tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()


def test_config_digest_ignores_seed():
    a = BenchmarkConfig(SynthConfig(seed=1))
    b = BenchmarkConfig(SynthConfig(seed=2))
    assert a.digest() == b.digest()
    assert a.digest() != BenchmarkConfig(SynthConfig(sigma_d=5.0)).digest()


def test_config_rejects_too_many_images():
    with pytest.raises(ValueError):
        BenchmarkConfig(SynthConfig(n_images=3), images=(3, 4))


def test_run_benchmark_needs_seeds():
    with pytest.raises(ValueError):
        run_benchmark(SMALL, seeds=[])


def test_unevaluable_fit_is_flagged():
    # four corners fit well locally, but this lens estimate cannot be inverted over the full board
    ds = generate(SynthConfig(seed=6))
    depth = run_cell(ds, 4, 2, seed=6)[1]
    assert depth.error_mm == math.inf
    assert depth.status == "not-converged"
    assert "evaluation failed" in depth.message

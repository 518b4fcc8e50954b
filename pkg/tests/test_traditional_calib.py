import numpy as np
import pytest

from tofcalib.camera_model import Distortion, Pose, distort, normalize, world_to_camera
from tofcalib.errors import DegenerateConfiguration
from tofcalib.synthetic import SynthConfig, render_dataset, subset
from tofcalib.traditional_calib import (
    calibrate_traditional,
    global_optimize,
    init_params,
    local_optimize,
    reprojection_jacobian,
    reprojection_residuals,
)


def perturb(pose, rng, angle=0.05, shift=20.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    d = rng.normal(size=3)
    return Pose(pose.rvec + angle * axis, pose.t + shift * d / np.linalg.norm(d))


@pytest.fixture(scope="module")
def undistorted():
    ds, gt = render_dataset(
        SynthConfig(n_images=3, kc=Distortion(), sigma_px=0, sigma_d=0, seed=5)
    )
    return ds, gt


def test_init_params_exact_without_distortion(undistorted):
    ds, gt = undistorted
    V0 = init_params(ds)
    assert V0.kc.is_zero
    np.testing.assert_allclose(V0.K.to_array(), gt.params.K.to_array(), rtol=1e-5)


def test_init_params_single_image_is_degenerate(noiseless):
    ds, _ = noiseless
    with pytest.raises(DegenerateConfiguration):
        init_params(ds.with_images(ds.images[:1]))


def test_init_params_on_noisy_data_is_finite(noisy):
    V0 = init_params(noisy)
    assert np.all(np.isfinite(V0.to_vector()))
    assert np.isfinite(np.sum(reprojection_residuals(V0, noisy) ** 2))


def test_local_optimize_recovers_perturbed_pose(noiseless, rng):
    ds, gt = noiseless
    X = ds.board.world_points
    V = gt.params
    for j, im in enumerate(ds.images):
        est = local_optimize(im.corners_px, X, V.K, V.kc, perturb(V.poses[j], rng))
        np.testing.assert_allclose(est.to_array(), V.poses[j].to_array(), atol=1e-6)


def test_local_optimize_fixed_point(noiseless):
    ds, gt = noiseless
    V = gt.params
    est = local_optimize(
        ds.images[0].corners_px, ds.board.world_points, V.K, V.kc, V.poses[0]
    )
    np.testing.assert_allclose(est.to_array(), V.poses[0].to_array(), atol=1e-12)


def test_local_optimize_four_corners(noiseless, rng):
    ds, gt = noiseless
    small = subset(ds, 1, 2)
    V = gt.params
    est = local_optimize(
        small.images[0].corners_px,
        small.board.world_points,
        V.K,
        V.kc,
        perturb(V.poses[0], rng, 0.02, 5),
    )
    np.testing.assert_allclose(est.to_array(), V.poses[0].to_array(), atol=1e-5)


def test_global_optimize_noiseless_3x9(noiseless):
    ds, gt = noiseless
    res = calibrate_traditional(subset(ds, 3, 3))
    f_err = (
        np.abs(res.params.K.to_array()[:2] - gt.params.K.to_array()[:2])
        / gt.params.K.to_array()[:2]
    )
    assert f_err.max() < 1e-6
    assert (
        res.stage_costs["global"]
        <= res.stage_costs["local"]
        <= res.stage_costs["init"] + 1e-9
    )


def test_global_optimize_from_groundtruth(noiseless):
    ds, gt = noiseless
    V, rep = global_optimize(ds, gt.params)
    assert rep.initial_cost == pytest.approx(0.0, abs=1e-20)
    assert rep.iterations <= 1
    np.testing.assert_allclose(V.to_vector(), gt.params.to_vector(), atol=1e-12)


def test_residuals_zero_at_groundtruth(noiseless):
    ds, gt = noiseless
    r = reprojection_residuals(gt.params, ds)
    assert r.shape == (2 * ds.board.n_corners * ds.n_images,)
    assert np.abs(r).max() < 1e-9


def test_residuals_fx_perturbation_pattern(noiseless):
    ds, gt = noiseless
    V = gt.params
    r = reprojection_residuals(
        V.with_(K=type(V.K)(V.K.fx + 1, V.K.fy, V.K.cx, V.K.cy)), ds
    ).reshape(-1, 2)
    # a focal change scales the distorted x coordinate only
    x_d = np.vstack(
        [
            distort(normalize(world_to_camera(ds.board.world_points, p)), V.kc)
            for p in V.poses
        ]
    )
    np.testing.assert_allclose(r[:, 0], x_d[:, 0], atol=1e-9)
    assert np.abs(r[:, 1]).max() < 1e-9
    assert np.linalg.norm(r) > 0


def test_jacobian_full_rank_at_optimum(noiseless):
    ds, gt = noiseless
    J = reprojection_jacobian(gt.params, subset(ds, 3, 3))
    # scale columns before judging rank; parameters differ by orders of magnitude
    Jn = J / np.linalg.norm(J, axis=0)
    sv = np.linalg.svd(Jn, compute_uv=False)
    assert sv[-1] / sv[0] > 1e-8
    assert np.linalg.matrix_rank(Jn) == J.shape[1]


def test_global_never_increases_cost(noisy):
    ds = subset(noisy, 4, 4)
    res = calibrate_traditional(ds)
    assert res.report.final_cost <= res.report.initial_cost
    trace = res.report.cost_trace
    assert all(b <= a for a, b in zip(trace, trace[1:]))

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tofcalib.camera_model import Intrinsics, Pose, rodrigues
from tofcalib.errors import DegenerateConfiguration, NumericalFailure
from tofcalib.solvers import (
    LmOptions,
    apply_homography,
    check_jacobian,
    compose_homography,
    decompose_homography,
    estimate_homography,
    intrinsics_from_homographies,
    lm_solve,
    nearest_rotation,
)

K0 = Intrinsics(284.4, 284.4, 100.0, 100.0)


def grid(n=3, step=50.0):
    g = np.arange(n) * step
    return np.array([(x, y) for y in g for x in g])


def rotation_angle(Ra, Rb):
    c = (np.trace(Ra.T @ Rb) - 1) / 2
    return float(np.arccos(np.clip(c, -1, 1)))


def random_pose(rng):
    return Pose(
        rng.normal(0, 0.4, 3),
        [rng.uniform(-100, 0), rng.uniform(-100, 0), rng.uniform(600, 1400)],
    )


# ---------------------------------------------------------------------------
# Homographies
# ---------------------------------------------------------------------------


def test_homography_identity_from_four_points():
    pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    np.testing.assert_allclose(estimate_homography(pts, pts), np.eye(3), atol=1e-10)


def test_homography_recovers_known_matrix(rng):
    H = np.array([[1.2, 0.1, 30.0], [-0.05, 0.9, 20.0], [1e-4, -2e-4, 1.0]])
    src = grid()
    dst = apply_homography(H, src)
    H_est = estimate_homography(src, dst)
    np.testing.assert_allclose(H_est, H, rtol=1e-8, atol=1e-10)
    assert np.abs(apply_homography(H_est, src) - dst).max() < 1e-8


def test_homography_degenerate_inputs():
    line = np.array([[0, 0], [1, 1], [2, 2], [3, 3]], dtype=float)
    with pytest.raises(DegenerateConfiguration):
        estimate_homography(line, line)
    with pytest.raises(DegenerateConfiguration):
        estimate_homography(grid()[:3], grid()[:3])


@given(
    st.floats(0.1, 10),
    st.floats(0, 2 * np.pi),
    st.floats(-1e3, 1e3),
    st.floats(-1e3, 1e3),
)
def test_homography_invariant_to_similarity(scale, angle, tx, ty):
    H = np.array([[1.1, 0.05, 40.0], [0.02, 0.95, 60.0], [2e-4, 1e-4, 1.0]])
    src = grid(4)
    dst = apply_homography(H, src)
    c, s = np.cos(angle), np.sin(angle)
    S = np.array([[scale * c, -scale * s, tx], [scale * s, scale * c, ty], [0, 0, 1]])
    dst2 = apply_homography(S, dst)
    H2 = estimate_homography(src, dst2)
    assert np.abs(apply_homography(H2, src) - dst2).max() < 1e-9 * max(1.0, scale * 300)


# ---------------------------------------------------------------------------
# Intrinsics bootstrap and pose decomposition
# ---------------------------------------------------------------------------


def test_intrinsics_from_three_homographies(rng):
    Hs = [compose_homography(random_pose(rng), K0) for _ in range(3)]
    K = intrinsics_from_homographies(Hs)
    np.testing.assert_allclose(K.to_array(), K0.to_array(), rtol=1e-6)


def test_intrinsics_random_K_five_views(rng):
    K = Intrinsics(
        rng.uniform(200, 600),
        rng.uniform(200, 600),
        rng.uniform(80, 120),
        rng.uniform(80, 120),
    )
    Hs = [compose_homography(random_pose(rng), K) for _ in range(5)]
    np.testing.assert_allclose(
        intrinsics_from_homographies(Hs).to_array(), K.to_array(), rtol=1e-6
    )


def test_intrinsics_parallel_boards_degenerate():
    H = compose_homography(Pose([0.2, 0.1, 0.0], [0, 0, 1000]), K0)
    with pytest.raises(DegenerateConfiguration):
        intrinsics_from_homographies([H, H])


def test_decompose_recovers_pose(rng):
    for _ in range(10):
        pose = random_pose(rng)
        est = decompose_homography(compose_homography(pose, K0), K0)
        assert rotation_angle(est.R, pose.R) < 1e-6
        assert np.linalg.norm(est.t - pose.t) < 1e-6 * np.linalg.norm(pose.t)


def test_decompose_frontal_and_sign():
    pose = Pose([0, 0, 0], [0, 0, 1000])
    H = compose_homography(pose, K0)
    est = decompose_homography(H, K0)
    np.testing.assert_allclose(est.t, pose.t, atol=1e-9)
    np.testing.assert_allclose(est.R, np.eye(3), atol=1e-12)
    flipped = decompose_homography(-H, K0)
    np.testing.assert_allclose(flipped.t, pose.t, atol=1e-9)


def test_nearest_rotation_is_proper(rng):
    M = rodrigues([0.3, 0.2, -0.1]) + rng.normal(0, 0.01, (3, 3))
    R = nearest_rotation(M)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------


def test_lm_linear_system_exact_within_two_steps(rng):
    A = rng.normal(size=(10, 3))
    x_true = np.array([1.0, -2.0, 0.5])
    y = A @ x_true
    x, rep = lm_solve(lambda x: A @ x - y, lambda x: A, np.zeros(3))
    np.testing.assert_allclose(x, x_true, atol=1e-10)
    # Marquardt damping shortens each step by a factor ~mu, so two accepted
    # steps already sit at the minimum to ~1e-10 relative cost
    assert len(rep.cost_trace) >= 3
    assert rep.cost_trace[2] <= 1e-10 * rep.initial_cost
    assert rep.final_cost <= 1e-20 * rep.initial_cost


def rosenbrock_res(x):
    return np.array([10 * (x[1] - x[0] ** 2), 1 - x[0]])


def rosenbrock_jac(x):
    return np.array([[-20 * x[0], 10.0], [-1.0, 0.0]])


@pytest.mark.parametrize("schedule", ["gain-ratio", "fixed"])
def test_lm_rosenbrock(schedule):
    x, rep = lm_solve(
        rosenbrock_res,
        rosenbrock_jac,
        np.array([-1.2, 1.0]),
        LmOptions(schedule=schedule),
    )
    np.testing.assert_allclose(x, [1, 1], atol=1e-6)
    assert rep.converged
    assert rep.final_cost <= rep.initial_cost


def test_lm_nan_residual_raises():
    with pytest.raises(NumericalFailure):
        lm_solve(lambda x: np.array([np.nan]), lambda x: np.ones((1, 1)), np.zeros(1))


def test_lm_shape_mismatch():
    with pytest.raises(ValueError):
        lm_solve(lambda x: np.ones(3), lambda x: np.zeros((2, 1)), np.zeros(1))


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_lm_cost_trace_non_increasing(x0):
    _, rep = lm_solve(rosenbrock_res, rosenbrock_jac, np.array(x0))
    assert all(b <= a for a, b in zip(rep.cost_trace, rep.cost_trace[1:]))
    assert rep.reason in {"gradient", "step", "cost", "max-iter"}


def test_lm_options_validation():
    with pytest.raises(ValueError):
        LmOptions(max_iterations=0)
    with pytest.raises(ValueError):
        LmOptions(schedule="other")


# ---------------------------------------------------------------------------
# Jacobian checker
# ---------------------------------------------------------------------------


def test_check_jacobian_linear():
    # no truncation error on a linear map, so a wide step keeps roundoff small
    A = np.arange(12.0).reshape(4, 3)
    assert check_jacobian(lambda x: A @ x, lambda x: A, np.ones(3), step=1e-2) < 1e-10


def test_check_jacobian_flags_wrong_entry():
    x = np.array([0.3, -0.7])

    def bad(x):
        J = rosenbrock_jac(x)
        J[0, 0] *= 2
        return J

    assert check_jacobian(rosenbrock_res, rosenbrock_jac, x) < 1e-7
    assert check_jacobian(rosenbrock_res, bad, x) > 1e-2


def test_check_jacobian_rejects_bad_step():
    with pytest.raises(ValueError):
        check_jacobian(rosenbrock_res, rosenbrock_jac, np.zeros(2), step=0.0)

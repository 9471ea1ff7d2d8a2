import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from bievr_lio.geometry import (
    ImuData,
    Scan,
    SE3Pose,
    apply,
    exp_se3,
    log_se3,
    skew,
    so3_exp,
    so3_exp_batch,
    so3_log,
    so3_log_batch,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)

finite = st.floats(-3.0, 3.0, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
rotvec = st.tuples(finite, finite, finite).map(np.array).filter(lambda v: np.linalg.norm(v) < np.pi - 1e-3)


def test_exp_zero_is_identity():
    T = exp_se3(np.zeros(6))
    assert np.array_equal(T.rotation, np.eye(3))
    assert np.array_equal(T.translation, np.zeros(3))


def test_exp_pure_translation():
    T = exp_se3([1, 0, 0, 0, 0, 0])
    np.testing.assert_allclose(T.translation, [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-15)


def test_exp_quarter_turn_about_z():
    T = exp_se3([0, 0, 0, 0, 0, np.pi / 2])
    # Rodrigues by hand: cos 90 = 0, sin 90 = 1
    R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(T.rotation, R, atol=1e-12)
    np.testing.assert_allclose(T.apply([1, 0, 0]), [0, 1, 0], atol=1e-9)


def test_apply_examples():
    np.testing.assert_array_equal(apply(SE3Pose.identity(), [1, 2, 3]), [1, 2, 3])
    np.testing.assert_array_equal(apply(SE3Pose(np.eye(3), [0, 0, 5]), [1, 1, 1]), [1, 1, 6])
    T = SE3Pose(so3_exp([0, 0, np.pi / 2]), [1, 0, 0])
    np.testing.assert_allclose(apply(T, [1, 0, 0]), [1, 1, 0], atol=1e-12)


def test_skew_examples(rng):
    assert np.array_equal(skew(np.zeros(3)), np.zeros((3, 3)))
    np.testing.assert_array_equal(skew([1, 0, 0]) @ [0, 1, 0], [0, 0, 1])
    for v in rng.normal(size=(100, 3)):
        K = skew(v)
        np.testing.assert_array_equal(K.T, -K)
        w = rng.normal(size=3)
        np.testing.assert_allclose(K @ w, np.cross(v, w), atol=1e-14)


def test_so3_against_scipy(rng):
    phi = rng.normal(size=(500, 3)) * rng.uniform(0, 1, (500, 1)) * 3
    ref = Rotation.from_rotvec(phi).as_matrix()
    np.testing.assert_allclose(so3_exp_batch(phi), ref, atol=1e-14)
    np.testing.assert_allclose(so3_log_batch(ref), Rotation.from_matrix(ref).as_rotvec(), atol=1e-10)


def test_so3_small_angles():
    for th in (0.0, 1e-12, 1e-9, 1e-7, 1e-4):
        phi = np.array([th, -2 * th, 0.5 * th])
        R = so3_exp(phi)
        np.testing.assert_allclose(R, Rotation.from_rotvec(phi).as_matrix(), atol=1e-15)
        np.testing.assert_allclose(so3_log(R), phi, atol=1e-15)


def test_so3_log_near_pi():
    for axis in ([1, 0, 0], [1, 1, 0], [0.3, -0.2, 0.9]):
        a = np.asarray(axis, float) / np.linalg.norm(axis)
        phi = a * (np.pi - 1e-9)
        out = so3_log(so3_exp(phi))
        np.testing.assert_allclose(so3_exp(out), so3_exp(phi), atol=1e-8)
        assert abs(np.linalg.norm(out) - np.linalg.norm(phi)) < 1e-6


def test_right_jacobian_inverse_and_fd(rng):
    for _ in range(20):
        phi = rng.normal(size=3)
        Jr = so3_right_jacobian(phi)
        np.testing.assert_allclose(Jr @ so3_right_jacobian_inv(phi), np.eye(3), atol=1e-12)
        # Exp(phi + d) ~ Exp(phi) Exp(Jr d)
        d = 1e-6 * rng.normal(size=3)
        lhs = so3_exp(phi + d)
        rhs = so3_exp(phi) @ so3_exp(Jr @ d)
        np.testing.assert_allclose(lhs, rhs, atol=1e-11)


def test_exp_inverse_is_identity(rng):
    for xi in rng.normal(size=(50, 6)):
        T = exp_se3(xi) @ exp_se3(-xi)
        np.testing.assert_allclose(T.matrix(), np.eye(4), atol=1e-9)
        assert exp_se3(xi).is_valid()


@settings(max_examples=200, deadline=None)
@given(vec3, rotvec)
def test_log_exp_round_trip(rho, phi):
    xi = np.concatenate([rho, phi])
    np.testing.assert_allclose(log_se3(exp_se3(xi)), xi, atol=1e-7)


@settings(max_examples=200, deadline=None)
@given(vec3, rotvec, vec3, rotvec, vec3)
def test_apply_distributes_over_composition(ta, ra, tb, rb, p):
    A = SE3Pose(so3_exp(ra), ta)
    B = SE3Pose(so3_exp(rb), tb)
    np.testing.assert_allclose((A @ B).apply(p), A.apply(B.apply(p)), atol=1e-9)
    np.testing.assert_allclose((A @ A.inverse()).matrix(), np.eye(4), atol=1e-9)


def test_pose_is_immutable():
    T = SE3Pose.identity()
    with pytest.raises(ValueError):
        T.rotation[0, 0] = 2.0


def test_scan_checks_timestamps():
    with pytest.raises(ValueError):
        Scan(np.ones((2, 3)), [0.0, 0.2], 0.0, 0.1)
    with pytest.raises(ValueError):
        Scan(np.zeros((1, 3)), [0.0], 0.0, 0.1)


def test_imu_requires_increasing_time():
    with pytest.raises(ValueError):
        ImuData([0.0, 0.0], np.zeros((2, 3)), np.zeros((2, 3)))
    imu = ImuData([0.0, 0.1, 0.2], np.zeros((3, 3)), np.zeros((3, 3)))
    # one extra sample on each side brackets the interval
    np.testing.assert_array_equal(imu.slice(0.05, 0.15).t, [0.0, 0.1, 0.2])


def test_se3_right_jacobian_matches_finite_differences():
    from bievr_lio.geometry import exp_se3, log_se3, se3_right_jacobian

    rng = np.random.default_rng(4)
    for _ in range(20):
        xi = rng.normal(0, 0.5, 6)
        J = se3_right_jacobian(xi)
        base = exp_se3(xi)
        fd = np.empty((6, 6))
        for k in range(6):
            d = np.zeros(6)
            d[k] = 1e-6
            fd[:, k] = (log_se3(base.inverse() @ exp_se3(xi + d)) - log_se3(base.inverse() @ exp_se3(xi - d))) / 2e-6
        np.testing.assert_allclose(J, fd, atol=1e-7)
    np.testing.assert_allclose(se3_right_jacobian(np.zeros(6)), np.eye(6), atol=1e-15)

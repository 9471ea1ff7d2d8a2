import math

import numpy as np
import pytest

from bievr_lio.geometry import ImuData, Scan, SE3Pose, so3_exp, so3_log
from bievr_lio.inertial import (
    GRAVITY,
    ImuCoverageError,
    ImuGapError,
    InertialState,
    SlidingWindow,
    StartupMotionError,
    imu_residual,
    optimize_window,
    predict_pose,
    predict_velocity,
    preintegrate,
    preintegrate_many,
    startup,
    undistort,
)
from bievr_lio.synth.oracles import matrix_angle, rk4_preintegrate
from bievr_lio.synth.simulator import Trajectory, TrajectorySpec, simulate_imu

G = np.array([0.0, 0.0, -GRAVITY])
Z3 = np.zeros(3)


def const_imu(gyro, acc, t_end=1.0, rate=200.0):
    t = np.arange(0.0, t_end + 0.5 / rate, 1.0 / rate)
    return ImuData(t, np.tile(gyro, (len(t), 1)), np.tile(acc, (len(t), 1)))


def random_imu(rng, n=21, dt=0.005):
    t = np.arange(n) * dt
    return ImuData(t, rng.normal(0, 1.0, (n, 3)), rng.normal(0, 3.0, (n, 3)))


def test_zero_signals():
    d = preintegrate(const_imu(Z3, Z3), Z3, Z3, 0.1, 0.7)
    np.testing.assert_array_equal(d.dR, np.eye(3))
    np.testing.assert_array_equal(d.dv, Z3)
    np.testing.assert_array_equal(d.dp, Z3)
    assert abs(d.dt - 0.6) < 1e-15


def test_constant_rate_closed_form():
    d = preintegrate(const_imu([0, 0, 1.0], Z3), Z3, Z3, 0.0, 1.0)
    np.testing.assert_allclose(d.dR, so3_exp([0, 0, 1.0]), atol=1e-6)


def test_constant_rate_and_force_closed_form():
    # body spinning about z while pushed along its own x axis
    w, a = 2.0, 1.5
    d = preintegrate(const_imu([0, 0, w], [a, 0, 0]), Z3, Z3, 0.0, 1.0)
    v = a / w * np.array([math.sin(w), 1 - math.cos(w), 0.0])
    p = a / w * np.array([(1 - math.cos(w)) / w, 1.0 - math.sin(w) / w, 0.0])
    np.testing.assert_allclose(d.dv, v, atol=1e-5)
    np.testing.assert_allclose(d.dp, p, atol=1e-5)


def test_matches_rk4_oracle():
    rng = np.random.default_rng(8)
    for _ in range(50):
        imu = random_imu(rng)
        ba, bg = rng.normal(0, 0.1, 3), rng.normal(0, 0.02, 3)
        d = preintegrate(imu, ba, bg, 0.0, 0.1)
        R, v, p = rk4_preintegrate(imu.t, imu.gyro, imu.acc, ba, bg, 0.0, 0.1)
        assert matrix_angle(d.dR.T @ R) < 1e-5
        assert np.linalg.norm(d.dp - p) < 1e-4
        assert np.linalg.norm(d.dv - v) < 1e-3


def test_unaligned_interval_matches_rk4():
    rng = np.random.default_rng(2)
    imu = random_imu(rng, n=41)
    d = preintegrate(imu, Z3, Z3, 0.0123, 0.1567)
    R, v, p = rk4_preintegrate(imu.t, imu.gyro, imu.acc, Z3, Z3, 0.0123, 0.1567)
    assert matrix_angle(d.dR.T @ R) < 1e-5 and np.linalg.norm(d.dp - p) < 1e-4


def test_batched_equals_single():
    rng = np.random.default_rng(3)
    segs = [(random_imu(rng, n=int(rng.integers(5, 30))), 0.0, None) for _ in range(6)]
    segs = [(imu, 0.001, imu.t[-1] - 0.002) for imu, _, _ in segs]
    ba, bg = rng.normal(0, 0.1, 3), rng.normal(0, 0.01, 3)
    many = preintegrate_many(segs, ba, bg)
    for (imu, tj, tk), m in zip(segs, many):
        one = preintegrate(imu, ba, bg, tj, tk)
        for name in ("dR", "dv", "dp", "J_R_bg", "J_v_ba", "J_v_bg", "J_p_ba", "J_p_bg"):
            np.testing.assert_allclose(getattr(m, name), getattr(one, name), atol=1e-12)


def retraction_error(imu, delta_size, rng):
    ba, bg = rng.normal(0, 0.1, 3), rng.normal(0, 0.01, 3)
    d = preintegrate(imu, ba, bg, 0.0, 0.1)
    u = rng.normal(size=6)
    u /= np.linalg.norm(u)
    da, dg = delta_size * u[:3], delta_size * u[3:]
    exact = preintegrate(imu, ba + da, bg + dg, 0.0, 0.1)
    R, v, p = d.corrected(ba + da, bg + dg)
    return np.linalg.norm(so3_log(R.T @ exact.dR)) + np.linalg.norm(v - exact.dv) + np.linalg.norm(p - exact.dp)


def test_bias_retraction_is_second_order():
    rng = np.random.default_rng(5)
    imu = random_imu(rng)
    e3 = retraction_error(imu, 1e-3, np.random.default_rng(1))
    e4 = retraction_error(imu, 1e-4, np.random.default_rng(1))
    assert e3 / e4 >= 50


def test_gap_and_coverage_errors():
    imu = ImuData(np.array([0.0, 0.05, 0.3, 0.35]), np.zeros((4, 3)), np.zeros((4, 3)))
    with pytest.raises(ImuGapError):
        preintegrate(imu, Z3, Z3, 0.0, 0.35)
    preintegrate(imu, Z3, Z3, 0.0, 0.05)
    with pytest.raises(ImuCoverageError):
        preintegrate(imu, Z3, Z3, 0.3, 0.5)
    with pytest.raises(ValueError):
        preintegrate(imu, Z3, Z3, 0.05, 0.05)


def test_predict_stationary():
    pose = SE3Pose(so3_exp([0.2, -0.1, 0.4]), [1.0, 2.0, 3.0])
    acc = pose.rotation.T @ -G
    d = preintegrate(const_imu(Z3, acc), Z3, Z3, 0.0, 0.1)
    out = predict_pose(pose, Z3, d, G)
    np.testing.assert_allclose(out.translation, pose.translation, atol=1e-6)
    assert matrix_angle(out.rotation.T @ pose.rotation) < 1e-6
    np.testing.assert_allclose(predict_velocity(pose, Z3, d, G), Z3, atol=1e-6)


def test_predict_constant_velocity():
    d = preintegrate(const_imu(Z3, -G), Z3, Z3, 0.0, 0.1)
    out = predict_pose(SE3Pose.identity(), [1.0, 0, 0], d, G)
    np.testing.assert_allclose(out.translation, [0.1, 0, 0], atol=1e-6)


def test_predict_free_fall():
    d = preintegrate(const_imu(Z3, Z3), Z3, Z3, 0.0, 0.3)
    v = np.array([0.5, -1.0, 2.0])
    out = predict_pose(SE3Pose(np.eye(3), [1, 1, 1]), v, d, G)
    np.testing.assert_allclose(out.translation - [1, 1, 1], v * 0.3 + 0.5 * G * 0.09, atol=1e-9)


def test_imu_residual_consistent_states():
    rng = np.random.default_rng(4)
    imu = random_imu(rng)
    ba, bg = rng.normal(0, 0.1, 3), rng.normal(0, 0.01, 3)
    d = preintegrate(imu, ba, bg, 0.0, 0.1)
    Ti = SE3Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    vi = rng.normal(size=3)
    Ti1 = predict_pose(Ti, vi, d, G)
    vi1 = predict_velocity(Ti, vi, d, G)
    r = imu_residual(vi, vi1, G, ba, bg, Ti, Ti1, d)
    assert np.max(np.abs(r)) < 1e-8
    r2 = imu_residual(vi, vi1 + [0.1, 0, 0], G, ba, bg, Ti, Ti1, d)
    np.testing.assert_allclose(r2[3:6] - r[3:6], Ti.rotation.T @ [0.1, 0, 0], atol=1e-9)
    np.testing.assert_allclose(r2[[0, 1, 2, 6, 7, 8]], r[[0, 1, 2, 6, 7, 8]], atol=1e-15)


def test_imu_residual_gyro_bias_first_order():
    rng = np.random.default_rng(6)
    imu = random_imu(rng)
    d = preintegrate(imu, Z3, Z3, 0.0, 0.1)
    T1 = SE3Pose(d.dR, d.dp + 0.5 * G * 0.01)
    errs = []
    for s in (1e-3, 1e-4):
        delta = s * np.array([0.3, -0.5, 0.8])
        exact = preintegrate(imu, Z3, delta, 0.0, 0.1)
        r = imu_residual(Z3, d.dv + G * 0.1, G, Z3, delta, SE3Pose.identity(), T1, d)
        errs.append(np.linalg.norm(r[:3] - so3_log(exact.dR.T @ d.dR)))
    assert errs[0] / errs[1] > 50


def test_undistort_zero_motion():
    rng = np.random.default_rng(0)
    pts = rng.normal(0, 5, (100, 3))
    scan = Scan(pts, np.linspace(0.0, 0.1, 100), 0.0, 0.1)
    T_IL = SE3Pose(so3_exp([0.1, 0.2, 0.3]), [0.1, 0.0, -0.05])
    out, _ = undistort(scan, const_imu(Z3, -G), InertialState(), T_IL, SE3Pose.identity(), 0.0)
    np.testing.assert_allclose(out, T_IL.apply(pts), atol=1e-12)


def test_undistort_constant_velocity():
    pts = np.array([[2.0, 1.0, 0.5], [2.0, 1.0, 0.5]])
    scan = Scan(pts, np.array([0.0, 0.1]), 0.0, 0.1)
    st = InertialState(v=np.array([1.0, 0, 0]))
    out, _ = undistort(scan, const_imu(Z3, -G), st, SE3Pose.identity(), SE3Pose.identity(), 0.0)
    np.testing.assert_allclose(out[1], pts[1], atol=1e-12)
    np.testing.assert_allclose(out[0] - out[1], [-0.1, 0, 0], atol=1e-9)


def rotating_window(gyro_bias=(0.01, -0.004, 0.006), acc_bias=(0.1, -0.05, 0.07), seed=0, duration=10.0, static=False):
    """Window over a body turning in place, with exact poses and noiseless IMU."""
    rng = np.random.default_rng(seed)
    n = int(duration) + 1
    tt = np.linspace(0, duration, n)
    rv = np.zeros((n, 3)) if static else rng.uniform(-0.4, 0.4, (n, 3))
    rv[0] = 0.0
    spec = TrajectorySpec(tt, np.zeros((n, 3)), rv, t_move=0.0, gyro_bias=gyro_bias, acc_bias=acc_bias)
    tr = Trajectory(spec)
    imu = simulate_imu(tr, rng)
    times = np.arange(0.0, duration + 1e-9, 0.1)
    return tr, imu, times


def fill_window(w, tr, imu, times):
    prev = None
    for t in times:
        d = None if prev is None else preintegrate(imu, w.b_a, w.b_g, prev, t)
        w.add(t, tr.pose(t), Z3, d)
        prev = t


def test_window_recovers_biases_and_gravity():
    tr, imu, times = rotating_window()
    tilt = so3_exp(np.radians([3.0, -2.0, 0.0]))
    w = SlidingWindow(10.0, InertialState(gravity=tilt @ G))
    fill_window(w, tr, imu, times)
    res = optimize_window(w, ba_prior=0.0)
    assert res.converged
    np.testing.assert_allclose(res.b_g, [0.01, -0.004, 0.006], atol=1e-6)
    np.testing.assert_allclose(res.b_a, [0.1, -0.05, 0.07], atol=1e-5)
    assert math.acos(np.clip(res.gravity @ G / GRAVITY**2, -1, 1)) < 1e-6
    assert abs(np.linalg.norm(res.gravity) - GRAVITY) < 1e-9
    np.testing.assert_allclose(res.velocities, 0.0, atol=1e-5)
    assert all(b <= a for a, b in zip(res.costs, res.costs[1:]))
    # the default accel-bias prior only nudges an observable window
    reg = optimize_window(w)
    np.testing.assert_allclose(reg.b_a, res.b_a, atol=1e-3)
    np.testing.assert_allclose(reg.b_g, res.b_g, atol=1e-4)


def test_window_single_pair_at_optimum_is_unchanged():
    imu = const_imu(Z3, -G)
    w = SlidingWindow()
    w.add(0.0, SE3Pose.identity(), Z3)
    w.add(0.1, SE3Pose.identity(), Z3, preintegrate(imu, Z3, Z3, 0.0, 0.1))
    res = optimize_window(w)
    np.testing.assert_allclose(res.velocities, 0.0, atol=1e-12)
    np.testing.assert_allclose(res.gravity, G, atol=1e-12)
    np.testing.assert_allclose(res.b_a, 0.0, atol=1e-12)


def test_static_window_cannot_separate_tilt_from_accel_bias():
    from bievr_lio.inertial import _stack_edges, _window_residuals

    tr, imu, times = rotating_window(static=True)
    w = SlidingWindow(10.0)
    fill_window(w, tr, imu, times)
    _, J = _window_residuals(_stack_edges(w), np.zeros((len(times), 3)), G, Z3, Z3, jac=True)
    H = np.einsum("nki,nkj->ij", J[:, :, 6:11], J[:, :, 6:11])  # gravity tangent and b_a
    s = np.linalg.svd(H, compute_uv=False)
    assert s[-1] / s[0] < 1e-10


def test_window_pruning():
    w = SlidingWindow(span=1.0)
    imu = const_imu(Z3, -G, t_end=3.0)
    prev = None
    for t in np.arange(0.0, 3.0 + 1e-9, 0.1):
        w.add(t, SE3Pose.identity(), Z3, None if prev is None else preintegrate(imu, Z3, Z3, prev, t))
        prev = t
    ts = [e.t for e in w.entries]
    assert ts[-1] - ts[0] <= 1.0 + 0.1 + 1e-9
    with pytest.raises(ValueError):
        w.add(ts[-1], SE3Pose.identity(), Z3, None)


def test_startup_static():
    R = so3_exp([0.1, -0.05, 0.7])
    bg = np.array([0.003, -0.002, 0.001])
    imu = const_imu(bg, R.T @ -G, t_end=2.0)
    pose, st, t_end = startup(imu)
    up = pose.rotation @ (R.T @ -G)
    np.testing.assert_allclose(up / GRAVITY, [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(st.b_g, bg, atol=1e-15)
    np.testing.assert_array_equal(st.b_a, Z3)
    assert abs(t_end - 1.0) < 1e-9


def test_startup_errors():
    with pytest.raises(ValueError):
        startup(const_imu(Z3, -G, t_end=0.3))
    rng = np.random.default_rng(0)
    imu = const_imu(Z3, -G, t_end=2.0)
    spin = ImuData(imu.t, rng.normal(0, 0.5, imu.gyro.shape), imu.acc)
    with pytest.raises(StartupMotionError):
        startup(spin)

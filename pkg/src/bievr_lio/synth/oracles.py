"""Brute-force reference computations used to check the estimator.

Nothing here imports the modules under test; rotations are handled with
quaternions so the code paths stay independent of ``geometry``.
"""
from __future__ import annotations

import numpy as np


class OracleError(ValueError):
    pass


def oracle_pca(points):
    """Batch centroid, covariance with an ``n + 1`` denominator, and normal."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) < 3:
        raise OracleError("need at least three points")
    mu = p.mean(axis=0)
    d = p - mu
    sigma = d.T @ d / (len(p) + 1)
    w, V = np.linalg.eigh(sigma)
    if w[1] <= 1e-12 * max(w[2], 1e-300):
        raise OracleError("points are collinear")
    return mu, sigma, V[:, 0]


def fd_jacobian(f, xi, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a 6-vector."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(len(xi))
    for k in range(len(xi)):
        e = np.zeros(len(xi))
        e[k] = step
        a, b = f(xi + e), f(xi - e)
        if a is None or b is None or not np.isfinite(a) or not np.isfinite(b):
            raise OracleError("function undefined at a probe point")
        out[k] = (a - b) / (2 * step)
    return out


# --- quaternion helpers (w, x, y, z) ----------------------------------------------


def quat_mul(a, b):
    """Hamilton product (w, x, y, z); broadcasts over leading axes."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q):
    q = np.asarray(q, float)
    w, x, y, z = np.moveaxis(q / np.linalg.norm(q, axis=-1, keepdims=True), -1, 0)
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def matrix_angle(R) -> float:
    return float(np.arccos(np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)))


def rk4_preintegrate(t, gyro, acc, b_a, b_g, t_j, t_k, substeps: int = 10, gravity=None, R0=None, v0=None, p0=None):
    """Dense RK4 integration of piecewise-linear IMU signals.

    Integrates ``q' = q (0, w)/2``, ``v' = R a (+ g)``, ``p' = v`` with
    ``substeps`` RK4 steps per sample interval. Without ``gravity``/initial
    state it returns the relative increments (dR, dv, dp) in the frame at
    ``t_j``. ``gyro``/``acc`` may carry a leading batch axis ``(B, n, 3)``
    of segments sampled at the common times ``t``; biases then broadcast
    as ``(B, 3)`` or ``(3,)``.
    """
    t = np.asarray(t, float)
    gyro = np.asarray(gyro, float) - np.asarray(b_g, float)[..., None, :]
    acc = np.asarray(acc, float) - np.asarray(b_a, float)[..., None, :]
    batch = gyro.shape[:-2]
    g = np.zeros(3) if gravity is None else np.asarray(gravity, float)

    def sig(x, tau):
        k = int(np.clip(np.searchsorted(t, tau, side="right") - 1, 0, len(t) - 2))
        al = min(max((tau - t[k]) / (t[k + 1] - t[k]), 0.0), 1.0)
        return (1 - al) * x[..., k, :] + al * x[..., k + 1, :]

    def deriv(tau, q, v):
        w = sig(gyro, tau)
        a = sig(acc, tau)
        dq = 0.5 * quat_mul(q, np.concatenate([np.zeros(batch + (1,)), w], axis=-1))
        return dq, np.einsum("...ij,...j->...i", quat_to_matrix(q), a) + g, v

    knots = np.concatenate([[t_j], t[(t > t_j) & (t < t_k)], [t_k]])
    grid = np.concatenate([np.linspace(a, b, substeps + 1)[:-1] for a, b in zip(knots[:-1], knots[1:])] + [[t_k]])
    q = np.broadcast_to(np.array([1.0, 0.0, 0.0, 0.0]) if R0 is None else _matrix_to_quat(R0), batch + (4,)).copy()
    v = np.broadcast_to(np.zeros(3) if v0 is None else np.asarray(v0, float), batch + (3,)).copy()
    p = np.broadcast_to(np.zeros(3) if p0 is None else np.asarray(p0, float), batch + (3,)).copy()
    for a, b in zip(grid[:-1], grid[1:]):
        h = b - a
        k1 = deriv(a, q, v)
        k2 = deriv(a + h / 2, q + h / 2 * k1[0], v + h / 2 * k1[1])
        k3 = deriv(a + h / 2, q + h / 2 * k2[0], v + h / 2 * k2[1])
        k4 = deriv(b, q + h * k3[0], v + h * k3[1])
        q_n = q + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        v_n = v + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        p = p + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        q = q_n / np.linalg.norm(q_n, axis=-1, keepdims=True)
        v = v_n
    return quat_to_matrix(q), v, p


def _matrix_to_quat(R):
    R = np.asarray(R, float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.zeros(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q = np.asarray(q, float)
    return q / np.linalg.norm(q)


def plane_fit_rms(points) -> float:
    """RMS distance of points to their least-squares plane."""
    p = np.asarray(points, float)
    d = p - p.mean(axis=0)
    _, s, _ = np.linalg.svd(d, full_matrices=False)
    return float(s[-1] / np.sqrt(len(p)))

"""Rigid-body math and the sensor data containers shared across the package.

Rotations are plain 3x3 matrices. Twists are ordered ``(rho, phi)``:
translational part first, rotational part second.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import expm

_SMALL_ANGLE = 1e-8


def skew(v) -> np.ndarray:
    """Return the cross-product matrix ``[v]_x`` so that ``skew(v) @ w == cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """(N, 3) -> (N, 3, 3) stack of cross-product matrices."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _rodrigues_coeffs(theta: np.ndarray):
    # A = sin(t)/t, B = (1 - cos t)/t^2, C = (t - sin t)/t^3, with series near 0.
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = t * t
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(t)) / t2)
    c = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (t - np.sin(t)) / (t2 * t))
    return a, b, c


def so3_exp_batch(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula for an (N, 3) stack of rotation vectors."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b, _ = _rodrigues_coeffs(theta)
    # K @ K == phi phi^T - theta^2 I
    out = a[..., None, None] * skew_batch(phi) + b[..., None, None] * (phi[..., :, None] * phi[..., None, :])
    diag = 1.0 - b * theta**2
    for i in range(3):
        out[..., i, i] += diag
    return out


def so3_exp(phi) -> np.ndarray:
    return so3_exp_batch(np.asarray(phi, dtype=float)[None])[0]


def so3_log_batch(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`so3_exp_batch` for rotation angles in ``[0, pi]``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R, axis1=-2, axis2=-1)
    cos_t = np.clip(0.5 * (tr - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_t)
    vee = np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]],
        axis=-1,
    )
    sin_t = np.sin(theta)
    small = theta < 1e-6
    near_pi = theta > np.pi - 1e-4
    scale = np.where(small, 0.5 + theta**2 / 12.0, theta / (2.0 * np.where(small, 1.0, sin_t)))
    out = scale[..., None] * vee
    if np.any(near_pi):
        # vee vanishes at pi; recover the axis from the symmetric part instead.
        for idx in zip(*np.nonzero(near_pi)) if R.ndim > 2 else [()]:
            Ri = R[idx]
            th = theta[idx]
            B = 0.5 * (Ri + Ri.T) - np.cos(th) * np.eye(3)
            col = int(np.argmax(np.diag(B)))
            axis = B[:, col] / np.linalg.norm(B[:, col])
            v = vee[idx]
            if np.dot(axis, v) < 0:
                axis = -axis
            out[idx] = axis * th
    return out


def so3_log(R) -> np.ndarray:
    return so3_log_batch(np.asarray(R, dtype=float)[None])[0]


def so3_right_jacobian(phi) -> np.ndarray:
    """Right Jacobian of SO(3): ``Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)``."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    _, b, c = _rodrigues_coeffs(theta)
    K = skew_batch(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - b[..., None, None] * K + c[..., None, None] * (K @ K)


def so3_right_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < 1e-5
    t = np.where(small, 1.0, theta)
    coef = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / t**2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)),
    )
    K = skew_batch(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + 0.5 * K + coef[..., None, None] * (K @ K)


@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid transform ``p -> R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "SE3Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "SE3Pose") -> "SE3Pose":
        return SE3Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "SE3Pose":
        Rt = self.rotation.T
        return SE3Pose(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform a single point (3,) or a stack (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(
            np.all(np.isfinite(R))
            and np.all(np.isfinite(self.translation))
            and np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) < tol
        )

    def __repr__(self) -> str:
        rv = so3_log(self.rotation)
        return f"SE3Pose(rotvec={np.round(rv, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def apply(pose: SE3Pose, p) -> np.ndarray:
    return pose.apply(p)


def _se3_v_matrix(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    _, b, c = _rodrigues_coeffs(np.array(theta))
    K = skew(phi)
    return np.eye(3) + b * K + c * (K @ K)


def exp_se3(xi) -> SE3Pose:
    """Exponential map of a twist ``(rho, phi)``."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    return SE3Pose(so3_exp(phi), _se3_v_matrix(phi) @ rho)


def log_se3(pose: SE3Pose) -> np.ndarray:
    phi = so3_log(pose.rotation)
    rho = np.linalg.solve(_se3_v_matrix(phi), pose.translation)
    return np.concatenate([rho, phi])


def se3_right_jacobian(xi) -> np.ndarray:
    """Right Jacobian of SE(3): ``Exp(xi + d) ~ Exp(xi) Exp(J(xi) d)``.

    Uses the series ``sum (-ad)^n / (n+1)!``, read off the corner block of
    one 12x12 matrix exponential.
    """
    xi = np.asarray(xi, dtype=float).reshape(6)
    ad = np.zeros((6, 6))
    ad[:3, :3] = ad[3:, 3:] = skew(xi[3:])
    ad[:3, 3:] = skew(xi[:3])
    M = np.zeros((12, 12))
    M[:6, :6] = -ad
    M[:6, 6:] = np.eye(6)
    return expm(M)[:6, 6:]


def pose_from_rotvec(rotvec, translation) -> SE3Pose:
    return SE3Pose(so3_exp(rotvec), translation)


def project_to_so3(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


# --- sensor containers ---------------------------------------------------


@dataclass(frozen=True)
class TimedPoint:
    position: tuple
    timestamp: float

    @property
    def range(self) -> float:
        return float(np.linalg.norm(self.position))


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    angular_velocity: tuple
    linear_acceleration: tuple


class Scan:
    """One LiDAR sweep: points in the sensor frame plus per-point timestamps."""

    def __init__(self, points, times, stamp_begin: float | None = None, stamp_end: float | None = None):
        points = np.ascontiguousarray(points, dtype=float).reshape(-1, 3)
        times = np.ascontiguousarray(times, dtype=float).reshape(-1)
        if len(points) == 0:
            raise ValueError("scan is empty")
        if len(times) != len(points):
            raise ValueError("points and times differ in length")
        if not np.all(np.any(points != 0.0, axis=1)):
            raise ValueError("points at zero range")
        self.points = points
        self.times = times
        self.stamp_begin = float(times.min()) if stamp_begin is None else float(stamp_begin)
        self.stamp_end = float(times.max()) if stamp_end is None else float(stamp_end)
        if times.min() < self.stamp_begin - 1e-9 or times.max() > self.stamp_end + 1e-9:
            raise ValueError("point timestamps outside the scan interval")

    @classmethod
    def from_points(cls, pts: Iterable[TimedPoint], stamp_begin=None, stamp_end=None) -> "Scan":
        pts = list(pts)
        if not pts:
            raise ValueError("scan is empty")
        return cls([p.position for p in pts], [p.timestamp for p in pts], stamp_begin, stamp_end)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)


class ImuData:
    """Column-stored IMU stream (timestamps strictly increasing)."""

    def __init__(self, t, gyro, acc):
        self.t = np.ascontiguousarray(t, dtype=float).reshape(-1)
        self.gyro = np.ascontiguousarray(gyro, dtype=float).reshape(-1, 3)
        self.acc = np.ascontiguousarray(acc, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.gyro) == len(self.acc)):
            raise ValueError("IMU columns differ in length")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("IMU timestamps must be strictly increasing")

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample]) -> "ImuData":
        return cls(
            [s.timestamp for s in samples],
            [s.angular_velocity for s in samples],
            [s.linear_acceleration for s in samples],
        )

    @classmethod
    def empty(cls) -> "ImuData":
        return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.t)

    def samples(self) -> list[ImuSample]:
        return [ImuSample(float(t), tuple(g), tuple(a)) for t, g, a in zip(self.t, self.gyro, self.acc)]

    def slice(self, t0: float, t1: float) -> "ImuData":
        """Samples in ``[t0, t1]`` widened by one sample on each side."""
        i0 = max(int(np.searchsorted(self.t, t0, side="right")) - 1, 0)
        i1 = min(int(np.searchsorted(self.t, t1, side="left")) + 1, len(self.t))
        return ImuData(self.t[i0:i1], self.gyro[i0:i1], self.acc[i0:i1])

    def concat(self, other: "ImuData") -> "ImuData":
        if len(self) == 0:
            return other
        keep = other.t > self.t[-1]
        return ImuData(
            np.concatenate([self.t, other.t[keep]]),
            np.concatenate([self.gyro, other.gyro[keep]]),
            np.concatenate([self.acc, other.acc[keep]]),
        )

"""Trajectory error metrics: aligned ATE and segment relative error."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation


@dataclass
class Trajectory:
    t: np.ndarray
    R: np.ndarray  # (N, 3, 3)
    p: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.t = np.asarray(self.t, float)
        self.p = np.asarray(self.p, float).reshape(-1, 3)
        self.R = np.asarray(self.R, float).reshape(-1, 3, 3)
        if not len(self.t) == len(self.p) == len(self.R):
            raise ValueError("trajectory arrays differ in length")

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def from_poses(cls, times, poses) -> "Trajectory":
        return cls(times, np.stack([q.rotation for q in poses]), np.stack([q.translation for q in poses]))

    @classmethod
    def from_tum(cls, rows) -> "Trajectory":
        rows = np.asarray(rows, float).reshape(-1, 8)
        return cls(rows[:, 0], Rotation.from_quat(rows[:, 4:8]).as_matrix(), rows[:, 1:4])

    def to_tum(self) -> np.ndarray:
        q = Rotation.from_matrix(self.R).as_quat()
        return np.column_stack([self.t, self.p, q])

    def transformed(self, R, t) -> "Trajectory":
        return Trajectory(self.t, np.einsum("ij,njk->nik", R, self.R), self.p @ np.asarray(R).T + t)


def associate(t_est, t_gt, gate: float = 0.01):
    """Nearest-timestamp pairs (est index, gt index) within ``gate`` seconds."""
    t_est = np.asarray(t_est, float)
    t_gt = np.asarray(t_gt, float)
    if len(t_gt) == 0 or len(t_est) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    k = np.clip(np.searchsorted(t_gt, t_est), 1, max(len(t_gt) - 1, 1))
    prev = np.clip(k - 1, 0, len(t_gt) - 1)
    k = np.clip(k, 0, len(t_gt) - 1)
    nearest = np.where(np.abs(t_gt[prev] - t_est) <= np.abs(t_gt[k] - t_est), prev, k)
    ok = np.abs(t_gt[nearest] - t_est) <= gate
    return np.nonzero(ok)[0], nearest[ok]


def align_rigid(src, dst):
    """Rotation and translation minimising ``sum |R src + t - dst|^2``."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    H = (src - ms).T @ (dst - md)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ D @ U.T
    return R, md - R @ ms


def ate_rmse(est: Trajectory, gt: Trajectory, gate: float = 0.01) -> float:
    """Position RMSE after the best rigid alignment of ``est`` onto ``gt``."""
    i, j = associate(est.t, gt.t, gate)
    if len(i) < 3:
        raise ValueError("need at least three associated poses")
    R, t = align_rigid(est.p[i], gt.p[j])
    e = est.p[i] @ R.T + t - gt.p[j]
    return float(np.sqrt(np.mean(np.sum(e * e, axis=1))))


def relative_error(est: Trajectory, gt: Trajectory, segment_len: float = 10.0, gate: float = 0.01) -> float:
    """RMS relative displacement error over ``segment_len`` segments, in percent.

    For every associated start pose the end pose is the first one at least
    ``segment_len`` further along the ground-truth arc length. Displacements
    are compared in the start pose's own frame.
    """
    i, j = associate(est.t, gt.t, gate)
    if len(i) < 2:
        raise ValueError("need at least two associated poses")
    gp = gt.p[j]
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(gp, axis=0), axis=1))])
    if s[-1] < segment_len:
        raise ValueError("trajectory shorter than one segment")
    ends = np.searchsorted(s, s + segment_len - 1e-12)
    starts = np.nonzero(ends < len(s))[0]
    ends = ends[starts]
    ep = est.p[i]
    de = np.einsum("nji,nj->ni", est.R[i][starts], ep[ends] - ep[starts])
    dg = np.einsum("nji,nj->ni", gt.R[j][starts], gp[ends] - gp[starts])
    err = np.linalg.norm(de - dg, axis=1) / segment_len
    return float(100.0 * np.sqrt(np.mean(err**2)))

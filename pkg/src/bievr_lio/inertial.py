"""IMU preintegration, scan undistortion and the sliding-window inertial solve.

Gravity is carried as a world-frame vector of fixed norm ``GRAVITY`` (nominally
``(0, 0, -9.81)``); accelerometers measure ``R^T (a_world - gravity) + b_a``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    ImuData,
    Scan,
    SE3Pose,
    so3_exp,
    so3_exp_batch,
    so3_log,
    so3_log_batch,
    so3_right_jacobian,
    so3_right_jacobian_inv,
    skew,
)

GRAVITY = 9.81


class ImuGapError(ValueError):
    """Consecutive IMU samples are further apart than allowed."""


class ImuCoverageError(ValueError):
    """The IMU stream does not bracket the requested interval."""


@dataclass
class InertialState:
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -GRAVITY]))

    def copy(self) -> "InertialState":
        return InertialState(self.v.copy(), self.b_a.copy(), self.b_g.copy(), self.gravity.copy())


@dataclass
class PreintegratedDelta:
    dR: np.ndarray
    dv: np.ndarray
    dp: np.ndarray
    t_j: float
    t_k: float
    b_a: np.ndarray
    b_g: np.ndarray
    J_R_bg: np.ndarray
    J_v_ba: np.ndarray
    J_v_bg: np.ndarray
    J_p_ba: np.ndarray
    J_p_bg: np.ndarray
    node_t: np.ndarray | None = None
    node_R: np.ndarray | None = None
    node_v: np.ndarray | None = None
    node_p: np.ndarray | None = None
    imu: ImuData | None = None

    @property
    def dt(self) -> float:
        return self.t_k - self.t_j

    def corrected(self, b_a, b_g):
        """First-order bias update of (dR, dv, dp)."""
        dba = np.asarray(b_a) - self.b_a
        dbg = np.asarray(b_g) - self.b_g
        dR = self.dR @ so3_exp(self.J_R_bg @ dbg)
        dv = self.dv + self.J_v_ba @ dba + self.J_v_bg @ dbg
        dp = self.dp + self.J_p_ba @ dba + self.J_p_bg @ dbg
        return dR, dv, dp


def _exp_and_jr(phi):
    """Exp(phi) and the right Jacobian Jr(phi) for a single rotation vector."""
    th2 = float(phi @ phi)
    K = skew(phi)
    K2 = K @ K
    if th2 < 1e-12:
        a, b, c = 1.0 - th2 / 6.0, 0.5 - th2 / 24.0, 1.0 / 6.0 - th2 / 120.0
    else:
        th = math.sqrt(th2)
        a = math.sin(th) / th
        b = (1.0 - math.cos(th)) / th2
        c = (th - math.sin(th)) / (th2 * th)
    eye = np.eye(3)
    return eye + a * K + b * K2, eye - b * K + c * K2


def _interp_rows(t, ts, vals):
    return np.stack([np.interp(t, ts, vals[:, c]) for c in range(vals.shape[1])], axis=-1)


def _skews(v):
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2], out[:, 1, 2] = -v[:, 2], v[:, 1], -v[:, 0]
    out[:, 1, 0], out[:, 2, 0], out[:, 2, 1] = v[:, 2], -v[:, 1], v[:, 0]
    return out


def _nodes(imu: ImuData, t_j: float, t_k: float, max_gap: float):
    """Node times on [t_j, t_k] and the interpolated raw signals there."""
    if not t_k > t_j:
        raise ValueError("need t_k > t_j")
    ts = imu.t
    if len(ts) < 2:
        raise ImuCoverageError("need at least two IMU samples")
    tol = 1e-9
    if ts[0] > t_j + tol or ts[-1] < t_k - tol:
        raise ImuCoverageError(f"IMU [{ts[0]:.6f}, {ts[-1]:.6f}] does not cover [{t_j:.6f}, {t_k:.6f}]")
    lo = max(int(np.searchsorted(ts, t_j, side="right")) - 1, 0)
    hi = min(int(np.searchsorted(ts, t_k, side="left")), len(ts) - 1)
    if hi > lo and np.any(np.diff(ts[lo : hi + 1]) > max_gap):
        raise ImuGapError(f"IMU gap larger than {max_gap} s inside [{t_j}, {t_k}]")
    inner = ts[(ts > t_j + tol) & (ts < t_k - tol)]
    nodes = np.concatenate([[t_j], inner, [t_k]])
    return nodes, _interp_rows(nodes, ts, imu.gyro), _interp_rows(nodes, ts, imu.acc)


def preintegrate(imu: ImuData, b_a, b_g, t_j: float, t_k: float, max_gap: float = 0.1, keep_nodes: bool = False) -> PreintegratedDelta:
    """Integrate bias-corrected IMU signals from ``t_j`` to ``t_k``.

    Angular rate and specific force are treated as piecewise linear between
    samples. Each sub-interval uses the midpoint rule, with the second-order
    commutator term added to the rotation increment. Bias Jacobians are the
    exact derivatives of this discrete recursion.
    """
    b_a = np.asarray(b_a, dtype=float)
    b_g = np.asarray(b_g, dtype=float)
    nodes, gyro, acc = _nodes(imu, t_j, t_k, max_gap)
    gyro = gyro - b_g
    acc = acc - b_a

    R = np.eye(3)
    v = np.zeros(3)
    p = np.zeros(3)
    JR = np.zeros((3, 3))
    Jva = np.zeros((3, 3))
    Jvg = np.zeros((3, 3))
    Jpa = np.zeros((3, 3))
    Jpg = np.zeros((3, 3))
    M = len(nodes)
    acc_skew = _skews(acc)
    if keep_nodes:
        nR = np.zeros((M, 3, 3))
        nv = np.zeros((M, 3))
        np_ = np.zeros((M, 3))
        nR[0] = R
    for m in range(M - 1):
        h = nodes[m + 1] - nodes[m]
        # midpoint increment plus the commutator term of a linearly varying rate
        phi = 0.5 * (gyro[m] + gyro[m + 1]) * h + (h * h / 12.0) * np.cross(gyro[m], gyro[m + 1])
        dphi_dbg = -h * np.eye(3) + (h * h / 12.0) * (skew(gyro[m + 1]) - skew(gyro[m]))
        E, Jr = _exp_and_jr(phi)
        R1 = R @ E
        JR1 = E.T @ JR + Jr @ dphi_dbg
        a0 = R @ acc[m]
        a1 = R1 @ acc[m + 1]
        a_mid = 0.5 * (a0 + a1)
        da_dbg = -0.5 * (R @ acc_skew[m] @ JR + R1 @ acc_skew[m + 1] @ JR1)
        da_dba = -0.5 * (R + R1)
        p = p + v * h + 0.5 * a_mid * h * h
        Jpa = Jpa + Jva * h + 0.5 * da_dba * h * h
        Jpg = Jpg + Jvg * h + 0.5 * da_dbg * h * h
        v = v + a_mid * h
        Jva = Jva + da_dba * h
        Jvg = Jvg + da_dbg * h
        R = R1
        JR = JR1
        if keep_nodes:
            nR[m + 1] = R
            nv[m + 1] = v
            np_[m + 1] = p
    delta = PreintegratedDelta(R, v, p, float(t_j), float(t_k), b_a.copy(), b_g.copy(), JR, Jva, Jvg, Jpa, Jpg)
    if keep_nodes:
        delta.node_t, delta.node_R, delta.node_v, delta.node_p = nodes, nR, nv, np_
    delta.imu = imu.slice(t_j, t_k)
    return delta


def preintegrate_many(segments, b_a, b_g, max_gap: float = 0.1) -> list:
    """Batched ``preintegrate`` over ``(imu, t_j, t_k)`` segments (no nodes kept).

    Shorter segments are padded with zero-length steps, which leave every
    accumulated quantity unchanged, so results equal the one-by-one version.
    """
    b_a = np.asarray(b_a, dtype=float)
    b_g = np.asarray(b_g, dtype=float)
    if not segments:
        return []
    built = [_nodes(imu, tj, tk, max_gap) for imu, tj, tk in segments]
    n_seg = len(built)
    M = max(len(b[0]) for b in built)
    T = np.zeros((n_seg, M))
    G = np.zeros((n_seg, M, 3))
    A = np.zeros((n_seg, M, 3))
    for e, (nd, g, a) in enumerate(built):
        k = len(nd)
        T[e, :k], G[e, :k], A[e, :k] = nd, g, a
        T[e, k:], G[e, k:], A[e, k:] = nd[-1], g[-1], a[-1]
    G -= b_g
    A -= b_a
    eye = np.broadcast_to(np.eye(3), (n_seg, 3, 3))
    R = np.array(eye)
    v = np.zeros((n_seg, 3))
    p = np.zeros((n_seg, 3))
    JR, Jva, Jvg, Jpa, Jpg = (np.zeros((n_seg, 3, 3)) for _ in range(5))
    for m in range(M - 1):
        h = (T[:, m + 1] - T[:, m])[:, None]
        hh = h[:, :, None]
        g0, g1 = G[:, m], G[:, m + 1]
        phi = 0.5 * (g0 + g1) * h + (h * h / 12.0) * np.cross(g0, g1)
        dphi_dbg = -hh * eye + (hh * hh / 12.0) * (_skews(g1) - _skews(g0))
        E = so3_exp_batch(phi)
        Jr = so3_right_jacobian(phi)
        R1 = R @ E
        JR1 = np.swapaxes(E, 1, 2) @ JR + Jr @ dphi_dbg
        a_mid = 0.5 * (np.einsum("nij,nj->ni", R, A[:, m]) + np.einsum("nij,nj->ni", R1, A[:, m + 1]))
        da_dbg = -0.5 * (R @ _skews(A[:, m]) @ JR + R1 @ _skews(A[:, m + 1]) @ JR1)
        da_dba = -0.5 * (R + R1)
        p = p + v * h + 0.5 * a_mid * h * h
        Jpa = Jpa + Jva * hh + 0.5 * da_dba * hh * hh
        Jpg = Jpg + Jvg * hh + 0.5 * da_dbg * hh * hh
        v = v + a_mid * h
        Jva = Jva + da_dba * hh
        Jvg = Jvg + da_dbg * hh
        R, JR = R1, JR1
    out = []
    for e, (imu, tj, tk) in enumerate(segments):
        d = PreintegratedDelta(R[e], v[e], p[e], float(tj), float(tk), b_a.copy(), b_g.copy(), JR[e], Jva[e], Jvg[e], Jpa[e], Jpg[e])
        d.imu = imu
        out.append(d)
    return out


def predict_pose(pose_j: SE3Pose, v_j, delta: PreintegratedDelta, gravity, b_a=None, b_g=None) -> SE3Pose:
    dR, _, dp = (delta.dR, delta.dv, delta.dp) if b_a is None else delta.corrected(b_a, b_g)
    dt = delta.dt
    R = pose_j.rotation
    t = pose_j.translation + np.asarray(v_j) * dt + 0.5 * np.asarray(gravity) * dt * dt + R @ dp
    return SE3Pose(R @ dR, t)


def predict_velocity(pose_j: SE3Pose, v_j, delta: PreintegratedDelta, gravity, b_a=None, b_g=None) -> np.ndarray:
    _, dv, _ = (delta.dR, delta.dv, delta.dp) if b_a is None else delta.corrected(b_a, b_g)
    return np.asarray(v_j) + np.asarray(gravity) * delta.dt + pose_j.rotation @ dv


def relative_poses(delta: PreintegratedDelta, R_j, v_j, gravity, times):
    """Transforms ``T_{I^k I(t)}`` for the given times, interpolated between nodes.

    Returns (R (N,3,3), t (N,3)) such that ``p_k = R p_t + t``.
    """
    if delta.node_t is None:
        raise ValueError("delta was integrated without nodes")
    R_j = np.asarray(R_j)
    vb = R_j.T @ np.asarray(v_j)
    gb = R_j.T @ np.asarray(gravity)
    nt = delta.node_t
    tau = nt - nt[0]
    # node poses expressed in the body frame at t_j
    P = vb[None] * tau[:, None] + 0.5 * gb[None] * tau[:, None] ** 2 + delta.node_p
    Rn = delta.node_R
    times = np.clip(np.asarray(times, dtype=float), nt[0], nt[-1])
    k = np.clip(np.searchsorted(nt, times, side="right") - 1, 0, len(nt) - 2)
    alpha = (times - nt[k]) / (nt[k + 1] - nt[k])
    # per-interval quantities, then one exp per time
    rel = so3_log_batch(np.einsum("nji,njk->nik", Rn[:-1], Rn[1:]))
    Rk = Rn[-1]
    M = np.einsum("ji,njk->nik", Rk, Rn[:-1])
    R_rel = M[k] @ so3_exp_batch(alpha[:, None] * rel[k])
    Pt = (1 - alpha)[:, None] * P[k] + alpha[:, None] * P[k + 1]
    t_rel = (Pt - P[-1]) @ Rk
    return R_rel, t_rel


def undistort(scan: Scan, imu: ImuData, state: InertialState, T_IL: SE3Pose, pose_prev: SE3Pose, t_prev: float, delta: PreintegratedDelta | None = None):
    """Express every scan point in the IMU frame at ``scan.stamp_end``.

    ``pose_prev``/``t_prev`` are the IMU pose and time the state refers to.
    Returns ``(points_imu, delta)``; the delta can be reused for prediction.
    """
    if delta is None:
        delta = preintegrate(imu, state.b_a, state.b_g, t_prev, scan.stamp_end, keep_nodes=True)
    p_i = T_IL.apply(scan.points)
    R_rel, t_rel = relative_poses(delta, pose_prev.rotation, state.v, state.gravity, scan.times)
    return np.einsum("nij,nj->ni", R_rel, p_i) + t_rel, delta


def imu_residual(v_i, v_i1, gravity, b_a, b_g, T_i: SE3Pose, T_i1: SE3Pose, delta: PreintegratedDelta) -> np.ndarray:
    """Rotation, velocity and position residual (9,) of one preintegrated edge."""
    dR, dv, dp = delta.corrected(b_a, b_g)
    dt = delta.dt
    Ri = T_i.rotation
    g = np.asarray(gravity)
    rR = so3_log(dR.T @ Ri.T @ T_i1.rotation)
    rv = Ri.T @ (np.asarray(v_i1) - np.asarray(v_i) - g * dt) - dv
    rp = Ri.T @ (T_i1.translation - T_i.translation - np.asarray(v_i) * dt - 0.5 * g * dt * dt) - dp
    return np.concatenate([rR, rv, rp])


# --- sliding window --------------------------------------------------------------


@dataclass
class WindowEntry:
    t: float
    pose: SE3Pose
    v: np.ndarray
    delta: PreintegratedDelta | None = None  # edge to the next entry


@dataclass
class WindowResult:
    velocities: np.ndarray
    gravity: np.ndarray
    b_a: np.ndarray
    b_g: np.ndarray
    iterations: int
    converged: bool
    costs: list


class SlidingWindow:
    """Fixed poses with free velocities and window-constant gravity/biases."""

    def __init__(self, span: float = 10.0, state: InertialState | None = None, ba_limit: float = 1.0, bg_limit: float = 0.1):
        self.span = span
        self.entries: list[WindowEntry] = []
        st = state or InertialState()
        self.gravity = st.gravity.copy()
        self.b_a = st.b_a.copy()
        self.b_g = st.b_g.copy()
        self.ba_limit = ba_limit
        self.bg_limit = bg_limit

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, t: float, pose: SE3Pose, v, delta_from_prev: PreintegratedDelta | None = None) -> None:
        if self.entries:
            if not t > self.entries[-1].t:
                raise ValueError("window timestamps must increase")
            if delta_from_prev is None:
                raise ValueError("an edge delta is required after the first entry")
            self.entries[-1].delta = delta_from_prev
        self.entries.append(WindowEntry(float(t), pose, np.asarray(v, dtype=float).copy()))
        self.prune()

    def prune(self) -> None:
        t_last = self.entries[-1].t
        while len(self.entries) > 2 and self.entries[1].t <= t_last - self.span:
            self.entries.pop(0)
        while len(self.entries) > 2 and self.entries[0].t < t_last - self.span:
            self.entries.pop(0)

    def state(self) -> InertialState:
        v = self.entries[-1].v if self.entries else np.zeros(3)
        return InertialState(v.copy(), self.b_a.copy(), self.b_g.copy(), self.gravity.copy())


def _tangent_basis(g: np.ndarray) -> np.ndarray:
    n = g / np.linalg.norm(g)
    e = np.eye(3)[int(np.argmin(np.abs(n)))]
    b1 = e - np.dot(e, n) * n
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(n, b1)
    return np.stack([b1, b2], axis=1)


def _window_residuals(E, vel, g, b_a, b_g, jac: bool):
    """Stacked residuals (N, 9) and per-edge Jacobian blocks."""
    Ri = E["Ri"]
    dt = E["dt"]
    dbg = b_g[None] - E["bg0"]
    dba = b_a[None] - E["ba0"]
    phi = np.einsum("nij,nj->ni", E["JR"], dbg)
    dRc = E["dR"] @ so3_exp_batch(phi)
    M = np.einsum("nji,nkj,nkl->nil", dRc, Ri, E["Ri1"])
    rR = so3_log_batch(M)
    RiT = np.swapaxes(Ri, 1, 2)
    vi = vel[:-1]
    vi1 = vel[1:]
    dv = E["dv"] + np.einsum("nij,nj->ni", E["Jva"], dba) + np.einsum("nij,nj->ni", E["Jvg"], dbg)
    dp = E["dp"] + np.einsum("nij,nj->ni", E["Jpa"], dba) + np.einsum("nij,nj->ni", E["Jpg"], dbg)
    rv = np.einsum("nij,nj->ni", RiT, vi1 - vi - g[None] * dt[:, None]) - dv
    rp = np.einsum("nij,nj->ni", RiT, E["dpos"] - vi * dt[:, None] - 0.5 * g[None] * (dt**2)[:, None]) - dp
    r = np.concatenate([rR, rv, rp], axis=1)
    if not jac:
        return r, None
    N = len(dt)
    Bg = GRAVITY * _tangent_basis(g)
    # columns: v_i (3), v_i1 (3), dg (2), b_a (3), b_g (3)
    J = np.zeros((N, 9, 14))
    dR_dbg = -np.einsum(
        "nij,nkj,nkl,nlm->nim",
        so3_right_jacobian_inv(rR),
        so3_exp_batch(rR),
        so3_right_jacobian(phi),
        E["JR"],
    )
    J[:, 0:3, 11:14] = dR_dbg
    J[:, 3:6, 0:3] = -RiT
    J[:, 3:6, 3:6] = RiT
    J[:, 3:6, 6:8] = -(RiT @ Bg) * dt[:, None, None]
    J[:, 3:6, 8:11] = -E["Jva"]
    J[:, 3:6, 11:14] = -E["Jvg"]
    J[:, 6:9, 0:3] = -RiT * dt[:, None, None]
    J[:, 6:9, 6:8] = -0.5 * (RiT @ Bg) * (dt**2)[:, None, None]
    J[:, 6:9, 8:11] = -E["Jpa"]
    J[:, 6:9, 11:14] = -E["Jpg"]
    return r, J


def _stack_edges(window: SlidingWindow):
    ent = window.entries
    deltas = [e.delta for e in ent[:-1]]
    return {
        "Ri": np.stack([e.pose.rotation for e in ent[:-1]]),
        "Ri1": np.stack([e.pose.rotation for e in ent[1:]]),
        "dpos": np.stack([b.pose.translation - a.pose.translation for a, b in zip(ent[:-1], ent[1:])]),
        "dt": np.array([d.dt for d in deltas]),
        "dR": np.stack([d.dR for d in deltas]),
        "dv": np.stack([d.dv for d in deltas]),
        "dp": np.stack([d.dp for d in deltas]),
        "JR": np.stack([d.J_R_bg for d in deltas]),
        "Jva": np.stack([d.J_v_ba for d in deltas]),
        "Jvg": np.stack([d.J_v_bg for d in deltas]),
        "Jpa": np.stack([d.J_p_ba for d in deltas]),
        "Jpg": np.stack([d.J_p_bg for d in deltas]),
        "ba0": np.stack([d.b_a for d in deltas]),
        "bg0": np.stack([d.b_g for d in deltas]),
    }


def _repreintegrate(window: SlidingWindow, ba_tol: float, bg_tol: float) -> bool:
    stale = []
    for e in window.entries[:-1]:
        d = e.delta
        if d.imu is None or len(d.imu) < 2:
            continue
        if np.linalg.norm(window.b_a - d.b_a) > ba_tol or np.linalg.norm(window.b_g - d.b_g) > bg_tol:
            stale.append(e)
    fresh = preintegrate_many([(e.delta.imu, e.delta.t_j, e.delta.t_k) for e in stale], window.b_a, window.b_g, max_gap=np.inf)
    for e, d in zip(stale, fresh):
        e.delta = d
    return bool(stale)


def optimize_window(
    window: SlidingWindow,
    max_iterations: int = 20,
    tol: float = 1e-10,
    repreintegrate: bool = True,
    ba_tol: float = 1e-2,
    bg_tol: float = 1e-3,
    ba_prior: float = 1e-2,
) -> WindowResult:
    """Damped Gauss-Newton over velocities, gravity direction and biases.

    Poses stay fixed. Writes the solution back into ``window`` and returns it.
    ``ba_prior`` weights a residual ``ba_prior * b_a``: without rotation the
    accelerometer bias and the gravity tilt are interchangeable, and this
    weak pull selects the smallest bias instead of letting it wander.
    """
    ent = window.entries
    if len(ent) < 2:
        raise ValueError("window needs at least two entries")
    if repreintegrate:
        _repreintegrate(window, ba_tol, bg_tol)
    E = _stack_edges(window)
    N = len(ent) - 1
    P = 3 * (N + 1) + 8
    vel = np.stack([e.v for e in ent])
    g = window.gravity.copy()
    b_a = window.b_a.copy()
    b_g = window.b_g.copy()

    w2 = ba_prior * ba_prior
    r, _ = _window_residuals(E, vel, g, b_a, b_g, jac=False)
    cost = float(np.sum(r * r)) + w2 * float(b_a @ b_a)
    costs = [cost]
    lam = 1e-6
    converged = False
    it = 0
    vidx = 3 * np.arange(N)[:, None] + np.arange(6)[None]
    gidx = np.broadcast_to(3 * (N + 1) + np.arange(8), (N, 8))
    cols = np.concatenate([vidx, gidx], axis=1)  # (N, 14)
    for it in range(1, max_iterations + 1):
        r, J = _window_residuals(E, vel, g, b_a, b_g, jac=True)
        Hl = np.einsum("nki,nkj->nij", J, J)
        gl = np.einsum("nki,nk->ni", J, r)
        H = np.zeros((P, P))
        grad = np.zeros(P)
        np.add.at(H, (cols[:, :, None], cols[:, None, :]), Hl)
        np.add.at(grad, cols, gl)
        ia = slice(3 * (N + 1) + 2, 3 * (N + 1) + 5)
        H[ia, ia] += w2 * np.eye(3)
        grad[ia] += w2 * b_a
        d = np.maximum(np.diag(H), 1e-12)
        accepted = False
        for _ in range(10):
            step = np.linalg.solve(H + lam * np.diag(d), -grad)
            vel_n = vel + step[: 3 * (N + 1)].reshape(-1, 3)
            off = 3 * (N + 1)
            B = _tangent_basis(g)
            gdir = g / np.linalg.norm(g) + B @ step[off : off + 2]
            g_n = GRAVITY * gdir / np.linalg.norm(gdir)
            ba_n = np.clip(b_a + step[off + 2 : off + 5], -window.ba_limit, window.ba_limit)
            bg_n = np.clip(b_g + step[off + 5 : off + 8], -window.bg_limit, window.bg_limit)
            r_n, _ = _window_residuals(E, vel_n, g_n, ba_n, bg_n, jac=False)
            c_n = float(np.sum(r_n * r_n)) + w2 * float(ba_n @ ba_n)
            if c_n <= cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged = True
            break
        small = np.linalg.norm(step) < tol or cost - c_n <= tol * max(cost, 1e-30)
        vel, g, b_a, b_g, cost = vel_n, g_n, ba_n, bg_n, c_n
        costs.append(cost)
        lam = max(lam * 0.1, 1e-12)
        if small:
            converged = True
            break
    for e, v in zip(ent, vel):
        e.v = v.copy()
    window.gravity = g
    window.b_a = b_a
    window.b_g = b_g
    return WindowResult(vel, g, b_a, b_g, it, converged, costs)


# --- startup ------------------------------------------------------------------


class StartupMotionError(ValueError):
    """The IMU was not quasi-static during initialisation."""


def startup(imu: ImuData, duration: float = 1.0, min_duration: float = 0.5, max_gyro_std: float = 0.05):
    """Initial attitude and biases from a quasi-static IMU segment.

    Returns ``(pose, state, t_end)``: the world frame has z opposing gravity
    and its origin at the IMU.
    """
    if len(imu) < 2:
        raise ValueError("startup needs IMU samples")
    t0 = imu.t[0]
    sel = imu.t <= t0 + duration + 1e-9
    if imu.t[sel][-1] - t0 < min_duration - 1e-9:
        raise ValueError(f"startup needs at least {min_duration} s of IMU data")
    gyro = imu.gyro[sel]
    acc = imu.acc[sel]
    if np.max(np.std(gyro, axis=0)) > max_gyro_std:
        raise StartupMotionError("excessive rotation during startup")
    b_g = gyro.mean(axis=0)
    up = acc.mean(axis=0)
    up /= np.linalg.norm(up)
    ez = np.array([0.0, 0.0, 1.0])
    axis = np.cross(up, ez)
    s = np.linalg.norm(axis)
    c = float(np.dot(up, ez))
    if s < 1e-12:
        R0 = np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    else:
        R0 = so3_exp(axis / s * math.atan2(s, c))
    state = InertialState(np.zeros(3), np.zeros(3), b_g, np.array([0.0, 0.0, -GRAVITY]))
    return SE3Pose(R0, np.zeros(3)), state, float(imu.t[sel][-1])

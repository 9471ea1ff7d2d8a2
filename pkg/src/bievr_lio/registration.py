"""Scan-to-map alignment on bump images.

Each point is mapped into the image frame of its voxel and compared with the
interpolated image height there. The pose is refined with a Huber-weighted
Levenberg-Marquardt loop over a left-composed increment
``T_GI @ Exp(xi)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bievr_map import BievrMap, Voxel, interpolate, interpolate_stencil_gradient
from .geometry import SE3Pose, exp_se3, se3_right_jacobian, skew_batch

GRADIENTS = ("interpolant", "stencil")


@dataclass
class RegistrationConfig:
    huber_delta: float = 0.05
    max_iterations: int = 30
    convergence_eps: float = 1e-5
    lm_lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    max_lm_retries: int = 8
    use_image_gradient: bool = True
    use_bump_heights: bool = True
    gradient: str = "interpolant"
    min_residuals: int = 10

    def validate(self) -> None:
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.gradient not in GRADIENTS:
            raise ValueError(f"gradient must be one of {GRADIENTS}")
        if self.lambda_up <= 1 or not 0 < self.lambda_down < 1:
            raise ValueError("need lambda_up > 1 and 0 < lambda_down < 1")


@dataclass
class RegistrationResult:
    pose: SE3Pose
    iterations: int
    final_cost: float
    residual_count: int
    dropped: int
    out_of_map: int
    insufficient_constraints: bool = False
    converged: bool = False
    diagnostics: list = field(default_factory=list)


def huber(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def huber_weights(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def evaluate(image, weight, dims, R_CG, t_CG, pixel_res, slots, points_imu, T_GI: SE3Pose, cfg, jacobian=True, plane_offset=None):
    """Residuals (and Jacobian rows) for points with known voxel slots.

    Without bump heights the residual is the distance to the voxel plane;
    ``plane_offset`` (per slot) is the image-frame height of that plane.
    Returns ``(r, valid, J)``; ``J`` is None when not requested.
    """
    p = np.asarray(points_imu, dtype=float).reshape(-1, 3)
    Rc = R_CG[slots]
    pg = T_GI.apply(p)
    pc = np.einsum("nij,nj->ni", Rc, pg) + t_CG[slots]
    if cfg.use_bump_heights:
        u = pc[:, 0] / pixel_res
        v = pc[:, 1] / pixel_res
        h, valid, du, dv = interpolate(image, weight, dims, slots, u, v)
        r = pc[:, 2] - h
    else:
        valid = np.ones(len(p), dtype=bool)
        r = pc[:, 2] - (0.0 if plane_offset is None else plane_offset[slots])
    if not jacobian:
        return r, valid, None
    R_CI = Rc @ T_GI.rotation
    dpc = np.concatenate([R_CI, -R_CI @ skew_batch(p)], axis=2)  # (N, 3, 6)
    J = dpc[:, 2, :].copy()
    if cfg.use_bump_heights and cfg.use_image_gradient:
        if cfg.gradient == "stencil":
            du, dv = interpolate_stencil_gradient(image, weight, dims, slots, u, v)
        J -= (du / pixel_res)[:, None] * dpc[:, 0, :] + (dv / pixel_res)[:, None] * dpc[:, 1, :]
    return r, valid, J


def _voxel_arrays(voxel: Voxel):
    if not voxel.has_frame:
        raise ValueError("voxel has no image frame")
    return (
        voxel.image[None],
        voxel.weight[None],
        voxel.dims,
        voxel.R_CG[None],
        voxel.t_CG[None],
        voxel.pixel_res,
    )


def residual(p_imu, voxel: Voxel, T_GI: SE3Pose, xi=None, cfg: RegistrationConfig | None = None):
    """Height residual of one IMU-frame point against one voxel, or None."""
    cfg = cfg or RegistrationConfig()
    T = T_GI if xi is None else T_GI @ exp_se3(xi)
    img, wt, dims, R, t, res = _voxel_arrays(voxel)
    r, valid, _ = evaluate(img, wt, dims, R, t, res, np.array([0]), np.asarray(p_imu)[None], T, cfg, jacobian=False)
    return float(r[0]) if valid[0] else None


def jacobian_row(p_imu, voxel: Voxel, T_GI: SE3Pose, xi=None, cfg: RegistrationConfig | None = None) -> np.ndarray:
    """d residual / d xi, ordered (translation, rotation)."""
    cfg = cfg or RegistrationConfig()
    T = T_GI if xi is None else T_GI @ exp_se3(xi)
    img, wt, dims, R, t, res = _voxel_arrays(voxel)
    r, valid, J = evaluate(img, wt, dims, R, t, res, np.array([0]), np.asarray(p_imu)[None], T, cfg)
    if not valid[0]:
        raise ValueError("residual undefined at this point")
    if xi is None:
        return J[0]
    # the row above is taken about T; chain through Exp to get d/d xi
    return J[0] @ se3_right_jacobian(xi)


def register(bmap: BievrMap, points_imu, prior: SE3Pose, cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Refine ``prior`` (T_GI) so the IMU-frame points sit on the map surface."""
    cfg = cfg or RegistrationConfig()
    cfg.validate()
    pts = np.asarray(points_imu, dtype=float).reshape(-1, 3)
    arrays = (bmap.image, bmap.weight, bmap.dims, bmap.R_CG, bmap.t_CG, bmap.pixel_res)
    offset = None
    if not cfg.use_bump_heights:
        mu = bmap.s / np.maximum(bmap.n, 1)[:, None]
        offset = np.einsum("nj,nj->n", bmap.R_CG[:, 2, :], mu) + bmap.t_CG[:, 2]
    T = prior
    lam = cfg.lm_lambda_init
    diags: list[dict] = []
    cost = 0.0
    n_res = 0
    dropped = 0
    out_of_map = 0
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        slots = bmap.slots_for_points(T.apply(pts)) if len(pts) else np.zeros(0, dtype=np.int64)
        in_map = slots >= 0
        in_map[in_map] = bmap.has_frame[slots[in_map]]
        idx = np.nonzero(in_map)[0]
        out_of_map = len(pts) - len(idx)
        sl = slots[idx]
        r, valid, J = evaluate(*arrays, sl, pts[idx], T, cfg, plane_offset=offset)
        dropped = int((~valid).sum())
        n_res = int(valid.sum())
        if n_res < cfg.min_residuals:
            return RegistrationResult(
                prior, it, float("nan"), n_res, dropped, out_of_map, insufficient_constraints=True, diagnostics=diags
            )
        idx, sl, r, J = idx[valid], sl[valid], r[valid], J[valid]
        w = huber_weights(r, cfg.huber_delta)
        cost = float(huber(r, cfg.huber_delta).sum())
        H = (J * w[:, None]).T @ J
        g = (J * w[:, None]).T @ r
        d = np.diag(H).copy()
        d = np.maximum(d, 1e-6 * max(d.max(), 1e-12))  # keeps null directions damped
        accepted = False
        step = np.zeros(6)
        record = {"iteration": it, "cost": cost, "residuals": n_res, "dropped": dropped}
        for _ in range(cfg.max_lm_retries + 1):
            step = np.linalg.solve(H + lam * np.diag(d), -g)
            T_new = T @ exp_se3(step)
            r_new, valid_new, _ = evaluate(*arrays, sl, pts[idx], T_new, cfg, jacobian=False, plane_offset=offset)
            both = valid_new
            c_old = float(huber(r[both], cfg.huber_delta).sum())
            c_new = float(huber(r_new[both], cfg.huber_delta).sum())
            if both.sum() >= cfg.min_residuals and c_new <= c_old:
                accepted = True
                T = T_new
                lam = max(lam * cfg.lambda_down, 1e-12)
                record.update(cost_before=c_old, cost_after=c_new)
                break
            lam *= cfg.lambda_up
        record.update(accepted=accepted, step_norm=float(np.linalg.norm(step)), lam=lam)
        diags.append(record)
        if not accepted:
            converged = True
            break
        if np.linalg.norm(step) < cfg.convergence_eps:
            converged = True
            break
    return RegistrationResult(T, it, cost, n_res, dropped, out_of_map, converged=converged, diagnostics=diags)

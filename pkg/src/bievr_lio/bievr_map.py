"""Voxel map whose cells carry an oriented height image ("bump image").

Every voxel accumulates the first and second moments of the points that fell
into it, fits a dominant plane, and stores the residual surface relief as a
small image in a frame ``C`` lying in that plane. Pixel ``(i, j)`` covers
``[i r, (i+1) r) x [j r, (j+1) r)`` in ``C`` and its value is the height along
the plane normal. Images are stored row-major as ``image[j, i]``.

Two image layers are kept per voxel: ``image_raw`` is the weighted running
mean of point heights, ``image`` is its masked Gaussian smoothing. Only the
smoothed layer is read by registration, sampling and export.

Storage is struct-of-arrays so a whole scan is integrated with vectorised
numpy; :class:`Voxel` and the module-level operations work on single voxels
through the same kernels.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from . import morton
from .geometry import SE3Pose

_CORNER_OFFSETS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=float)
_EIGEN_TIE_REL = 1e-9
# a plane needs real spread along two axes: middle/largest variance ratio
_MIN_PLANARITY = 1e-4
_MIN_SPREAD = 1e-12  # m^2, below this the cloud is a single point
_SNAPSHOT_MAGIC = b"BIEVRMAP"
_SNAPSHOT_VERSION = 1


@dataclass
class MapConfig:
    voxel_len: float = 0.5
    pixel_res: float = 0.05
    normal_reproject_thresh: float = math.radians(3.0)
    capacity: int = 200_000
    min_points_for_plane: int = 6
    smoothing_sigma: float = 0.85
    origin_shift_thresh: float = 0.01
    max_point_weight: float = 0.5

    def validate(self) -> None:
        if not self.voxel_len > 0 or not self.pixel_res > 0:
            raise ValueError("voxel_len and pixel_res must be positive")
        if self.pixel_res >= self.voxel_len:
            raise ValueError("pixel_res must be smaller than voxel_len")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.min_points_for_plane < 3:
            raise ValueError("min_points_for_plane must be >= 3")
        if not 0 < self.normal_reproject_thresh < math.pi / 2:
            raise ValueError("normal_reproject_thresh out of range")
        if self.smoothing_sigma <= 0 or self.origin_shift_thresh <= 0 or self.max_point_weight <= 0:
            raise ValueError("smoothing_sigma, origin_shift_thresh and max_point_weight must be positive")


def max_image_side(voxel_len: float, pixel_res: float) -> int:
    return int(math.ceil(math.sqrt(3.0) * voxel_len / pixel_res)) + 1


def point_weight(ranges, max_weight: float = 0.5) -> np.ndarray:
    """Per-point confidence ``min(max_weight, 1 / range)``."""
    ranges = np.asarray(ranges, dtype=float)
    with np.errstate(divide="ignore"):
        return np.minimum(max_weight, 1.0 / ranges)


# --- kernels ------------------------------------------------------------------


def plane_moments(s: np.ndarray, C: np.ndarray, n: np.ndarray):
    """Centroid ``s / n`` and covariance ``(C - s mu^T) / (n + 1)``."""
    n = np.asarray(n, dtype=float)
    mu = s / n[..., None]
    sigma = (C - s[..., :, None] * mu[..., None, :]) / (n[..., None, None] + 1.0)
    return mu, sigma


def smallest_eigvec(sigma: np.ndarray):
    """Eigenvector of the smallest eigenvalue plus an ambiguity flag per matrix.

    The flag is set when the two smallest eigenvalues tie, or when the cloud
    is a point or a line and so fixes no plane.
    """
    sym = 0.5 * (sigma + np.swapaxes(sigma, -1, -2))
    evals, evecs = np.linalg.eigh(sym)
    scale = np.maximum(np.abs(evals[..., 2]), 1e-300)
    tie = (evals[..., 1] - evals[..., 0]) <= _EIGEN_TIE_REL * scale
    tie |= (evals[..., 2] <= _MIN_SPREAD) | (evals[..., 1] < _MIN_PLANARITY * scale)
    return evecs[..., :, 0], tie


def in_plane_axes(normal: np.ndarray):
    """Deterministic x/y axes orthogonal to ``normal`` (K, 3)."""
    normal = np.atleast_2d(normal)
    e_idx = np.argmin(np.abs(normal), axis=1)
    e = np.eye(3)[e_idx]
    x = e - np.sum(e * normal, axis=1, keepdims=True) * normal
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = np.cross(normal, x)
    return x, y


def frame_from_normal(normal, mu, corner_min, voxel_len: float, pixel_res: float):
    """Image frame and size for voxels with the given normal and centroid.

    Returns ``(R_CG, t_CG, dims)`` with ``dims[:, 0] = width`` and
    ``dims[:, 1] = height`` in pixels.
    """
    normal = np.atleast_2d(np.asarray(normal, dtype=float))
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    corner_min = np.atleast_2d(np.asarray(corner_min, dtype=float))
    x, y = in_plane_axes(normal)
    R = np.stack([x, y, normal], axis=1)
    corners = corner_min[:, None, :] + voxel_len * _CORNER_OFFSETS[None]
    rel = corners - mu[:, None, :]
    px = np.einsum("kcj,kj->kc", rel, x)
    py = np.einsum("kcj,kj->kc", rel, y)
    xmin, xmax = px.min(axis=1), px.max(axis=1)
    ymin, ymax = py.min(axis=1), py.max(axis=1)
    w = np.ceil((xmax - xmin) / pixel_res - 1e-9).astype(np.int64)
    h = np.ceil((ymax - ymin) / pixel_res - 1e-9).astype(np.int64)
    origin = mu + xmin[:, None] * x + ymin[:, None] * y
    t = -np.einsum("kij,kj->ki", R, origin)
    return R, t, np.stack([w, h], axis=1)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    d = np.arange(-1, 2)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def smooth_images(raw: np.ndarray, weight: np.ndarray, sigma: float) -> np.ndarray:
    """3x3 Gaussian over observed pixels only; unobserved pixels stay 0."""
    obs = weight > 0
    mask = obs.astype(float)
    g = np.exp(-np.arange(-1, 2) ** 2 / (2.0 * sigma**2))
    g /= g.sum()

    def blur(x):
        # the 3x3 kernel is separable: filter rows, then columns
        y = correlate1d(x, g, axis=-1, mode="constant")
        return correlate1d(y, g, axis=-2, mode="constant")

    num = blur(raw * mask)
    den = blur(mask)
    return np.where(obs, num / np.where(obs, den, 1.0), 0.0)


def image_mid(image: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Mean absolute height over observed pixels; 0 when nothing is observed."""
    obs = weight > 0
    cnt = obs.sum(axis=(-2, -1))
    tot = np.where(obs, np.abs(image), 0.0).sum(axis=(-2, -1))
    return np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.0)


def reproject_raw(raw, weight, T_new_old: SE3Pose, pixel_res: float, new_dims, side: int):
    """Forward-scatter observed pixels into a new image frame.

    Each observed pixel centre is lifted to 3D, moved into the new frame and
    written to the pixel it lands in. Collisions merge by weighted average.
    """
    jj, ii = np.nonzero(weight > 0)
    new_raw = np.zeros((side, side))
    new_w = np.zeros((side, side))
    if len(ii) == 0:
        return new_raw, new_w
    p = np.stack([(ii + 0.5) * pixel_res, (jj + 0.5) * pixel_res, raw[jj, ii]], axis=1)
    q = T_new_old.apply(p)
    ni = np.floor(q[:, 0] / pixel_res).astype(np.int64)
    nj = np.floor(q[:, 1] / pixel_res).astype(np.int64)
    wdt, hgt = int(new_dims[0]), int(new_dims[1])
    keep = (ni >= 0) & (ni < wdt) & (nj >= 0) & (nj < hgt)
    flat = nj[keep] * side + ni[keep]
    wts = weight[jj, ii][keep]
    sw = np.bincount(flat, weights=wts, minlength=side * side)
    swz = np.bincount(flat, weights=wts * q[keep, 2], minlength=side * side)
    hit = sw > 0
    new_raw.reshape(-1)[hit] = swz[hit] / sw[hit]
    new_w.reshape(-1)[:] = sw
    return new_raw, new_w


def interpolate(image, weight, dims, slot, u, v):
    """Bilinear height lookup renormalised over observed corner pixels.

    ``u``, ``v`` are continuous pixel coordinates (pixel centre at ``i + 0.5``).
    Returns ``(height, valid, dh_du, dh_dv)``; the derivatives are the exact
    partials of the interpolant, in height units per pixel.
    """
    slot = np.asarray(slot, dtype=np.int64)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    w_img = dims[slot, 0]
    h_img = dims[slot, 1]
    inside = (u >= 0) & (u <= w_img) & (v >= 0) & (v <= h_img) & np.isfinite(u) & np.isfinite(v)
    a = np.where(inside, u - 0.5, 0.0)
    b = np.where(inside, v - 0.5, 0.0)
    i0 = np.floor(a).astype(np.int64)
    j0 = np.floor(b).astype(np.int64)
    fu = a - i0
    fv = b - j0
    side_h, side_w = image.shape[-2:]
    A = np.zeros_like(u)
    B = np.zeros_like(u)
    Au = np.zeros_like(u)
    Bu = np.zeros_like(u)
    Av = np.zeros_like(u)
    Bv = np.zeros_like(u)
    corners = (
        (0, 0, (1 - fu) * (1 - fv), -(1 - fv), -(1 - fu)),
        (1, 0, fu * (1 - fv), (1 - fv), -fu),
        (0, 1, (1 - fu) * fv, -fv, (1 - fu)),
        (1, 1, fu * fv, fv, fu),
    )
    for di, dj, bw, bu, bv in corners:
        ci = i0 + di
        cj = j0 + dj
        ok = inside & (ci >= 0) & (ci < w_img) & (cj >= 0) & (cj < h_img)
        cic = np.clip(ci, 0, side_w - 1)
        cjc = np.clip(cj, 0, side_h - 1)
        obs = ok & (weight[slot, cjc, cic] > 0)
        val = np.where(obs, image[slot, cjc, cic], 0.0)
        m = obs.astype(float)
        A += bw * m * val
        B += bw * m
        Au += bu * m * val
        Bu += bu * m
        Av += bv * m * val
        Bv += bv * m
    valid = inside & (B > 1e-12)
    Bs = np.where(valid, B, 1.0)
    hgt = np.where(valid, A / Bs, 0.0)
    du = np.where(valid, (Au - hgt * Bu) / Bs, 0.0)
    dv = np.where(valid, (Av - hgt * Bv) / Bs, 0.0)
    return hgt, valid, du, dv


def stencil_gradient(image, weight, dims, slot, i, j):
    """Pixel-grid gradient: central differences, one-sided at mask borders.

    A component is undefined (NaN) when fewer than two of the three pixels
    along that axis are observed. Units: height per pixel.
    """
    slot = np.asarray(slot, dtype=np.int64)
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    side_h, side_w = image.shape[-2:]
    w_img = dims[slot, 0]
    h_img = dims[slot, 1]

    def sample(ci, cj):
        ok = (ci >= 0) & (ci < w_img) & (cj >= 0) & (cj < h_img)
        cic = np.clip(ci, 0, side_w - 1)
        cjc = np.clip(cj, 0, side_h - 1)
        obs = ok & (weight[slot, cjc, cic] > 0)
        return np.where(obs, image[slot, cjc, cic], 0.0), obs

    def axis_grad(prev, cen, nxt):
        (vp, op), (vc, oc), (vn, on) = prev, cen, nxt
        g = np.full(vc.shape, np.nan)
        g = np.where(oc & op, vc - vp, g)
        g = np.where(oc & on, vn - vc, g)
        g = np.where(op & on, 0.5 * (vn - vp), g)
        return g

    c = sample(i, j)
    gu = axis_grad(sample(i - 1, j), c, sample(i + 1, j))
    gv = axis_grad(sample(i, j - 1), c, sample(i, j + 1))
    return gu, gv


def interpolate_stencil_gradient(image, weight, dims, slot, u, v):
    """Stencil gradients at the four surrounding pixels, blended bilinearly."""
    slot = np.asarray(slot, dtype=np.int64)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    a = u - 0.5
    b = v - 0.5
    i0 = np.floor(a).astype(np.int64)
    j0 = np.floor(b).astype(np.int64)
    fu = a - i0
    fv = b - j0
    gu_acc = np.zeros_like(u)
    gv_acc = np.zeros_like(u)
    wu = np.zeros_like(u)
    wv = np.zeros_like(u)
    for di, dj, bw in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)), (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        gu, gv = stencil_gradient(image, weight, dims, slot, i0 + di, j0 + dj)
        ok_u = np.isfinite(gu)
        ok_v = np.isfinite(gv)
        gu_acc += np.where(ok_u, bw * np.nan_to_num(gu), 0.0)
        gv_acc += np.where(ok_v, bw * np.nan_to_num(gv), 0.0)
        wu += np.where(ok_u, bw, 0.0)
        wv += np.where(ok_v, bw, 0.0)
    gu_out = np.where(wu > 1e-12, gu_acc / np.where(wu > 1e-12, wu, 1.0), 0.0)
    gv_out = np.where(wv > 1e-12, gv_acc / np.where(wv > 1e-12, wv, 1.0), 0.0)
    return gu_out, gv_out


def scatter_into_images(raw, weight, slot, u_idx, v_idx, w, z, side: int):
    """Weighted running-mean update of raw pixels (in place)."""
    flat = (slot * side + v_idx) * side + u_idx
    uniq, inv = np.unique(flat, return_inverse=True)
    sw = np.bincount(inv, weights=w)
    swz = np.bincount(inv, weights=w * z)
    raw_f = raw.reshape(-1)
    wt_f = weight.reshape(-1)
    old_w = wt_f[uniq]
    raw_f[uniq] = (old_w * raw_f[uniq] + swz) / (old_w + sw)
    wt_f[uniq] = old_w + sw


# --- single-voxel API ---------------------------------------------------------


@dataclass
class Voxel:
    """One map cell. Arrays are owned by the instance (map snapshots are copies)."""

    key: tuple
    voxel_len: float = 0.5
    pixel_res: float = 0.05
    normal_reproject_thresh: float = math.radians(3.0)
    min_points_for_plane: int = 6
    smoothing_sigma: float = 0.85
    max_point_weight: float = 0.5
    origin_shift_thresh: float = 0.01
    s: np.ndarray = field(default_factory=lambda: np.zeros(3))
    C: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    n: int = 0
    has_frame: bool = False
    R_CG: np.ndarray = field(default_factory=lambda: np.eye(3))
    t_CG: np.ndarray = field(default_factory=lambda: np.zeros(3))
    image_w: int = 0
    image_h: int = 0
    image: np.ndarray | None = None
    image_raw: np.ndarray | None = None
    weight: np.ndarray | None = None
    mid: float = 0.0
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    lru_stamp: int = 0

    def __post_init__(self):
        side = self.side
        if self.image is None:
            self.image = np.zeros((side, side))
        if self.image_raw is None:
            self.image_raw = np.zeros((side, side))
        if self.weight is None:
            self.weight = np.zeros((side, side))

    @classmethod
    def at(cls, point, voxel_len: float = 0.5, **kw) -> "Voxel":
        """Empty voxel containing ``point``."""
        ijk = tuple(int(c) for c in morton.grid_coords(np.asarray(point, dtype=float), voxel_len))
        return cls(key=ijk, voxel_len=voxel_len, **kw)

    @property
    def side(self) -> int:
        return max_image_side(self.voxel_len, self.pixel_res)

    @property
    def corner_min(self) -> np.ndarray:
        return np.asarray(self.key, dtype=float) * self.voxel_len

    @property
    def T_CG(self) -> SE3Pose:
        return SE3Pose(self.R_CG, self.t_CG)

    @property
    def mu(self) -> np.ndarray:
        return self.s / self.n

    @property
    def sigma(self) -> np.ndarray:
        return plane_moments(self.s, self.C, self.n)[1]

    @property
    def observed(self) -> np.ndarray:
        return self.weight > 0

    @property
    def dims(self) -> np.ndarray:
        return np.array([[self.image_w, self.image_h]])


def voxel_key_of(p_world, voxel_len: float = 0.5) -> int:
    """Morton key of the voxel containing ``p_world``."""
    return int(morton.keys_of(np.asarray(p_world, dtype=float)[None], voxel_len)[0])


def update_plane_stats(v: Voxel, points_world):
    pts = np.asarray(points_world, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("no points to integrate")
    v.s = v.s + pts.sum(axis=0)
    v.C = v.C + pts.T @ pts
    v.n = v.n + len(pts)
    return plane_moments(v.s, v.C, v.n)


def init_image_frame(v: Voxel, normal=None):
    """Image size and world-to-image transform for the voxel's current plane."""
    normal = v.normal if normal is None else np.asarray(normal, dtype=float)
    R, t, dims = frame_from_normal(normal[None], v.mu[None], v.corner_min[None], v.voxel_len, v.pixel_res)
    return int(dims[0, 0]), int(dims[0, 1]), SE3Pose(R[0], t[0])


def _set_frame(v: Voxel, normal, T_CG: SE3Pose, w: int, h: int) -> None:
    v.normal = np.asarray(normal, dtype=float) / np.linalg.norm(normal)
    v.R_CG = T_CG.rotation.copy()
    v.t_CG = T_CG.translation.copy()
    v.image_w, v.image_h = int(w), int(h)
    v.has_frame = True


def update_normal_frame(v: Voxel, sensor_origin=None) -> bool:
    """Refit the plane normal; re-anchor the image frame when it moved.

    Returns True when the normal rotated by more than the reprojection
    threshold (the image is reprojected). First-time initialisation and
    degenerate covariances report False.
    """
    if v.n < v.min_points_for_plane:
        return False
    normal, tie = smallest_eigvec(v.sigma[None])
    if tie[0]:
        return False
    normal = normal[0]
    mu = v.mu
    if not v.has_frame:
        origin = np.zeros(3) if sensor_origin is None else np.asarray(sensor_origin, dtype=float)
        if np.dot(normal, origin - mu) < 0:
            normal = -normal
        w, h, T = init_image_frame(v, normal)
        _set_frame(v, normal, T, w, h)
        return False
    if np.dot(normal, v.normal) < 0:
        normal = -normal
    angle = math.acos(min(1.0, abs(float(np.dot(normal, v.normal)))))
    if angle > v.normal_reproject_thresh:
        w, h, T_new = init_image_frame(v, normal)
        reproject_image(v, T_new @ v.T_CG.inverse(), w, h)
        return True
    dz = float(v.R_CG[2] @ mu + v.t_CG[2])
    if abs(dz) > v.origin_shift_thresh:
        v.t_CG = v.t_CG - np.array([0.0, 0.0, dz])
        v.image_raw = np.where(v.weight > 0, v.image_raw - dz, 0.0)
        _refresh_display(v)
    return False


def update_image(v: Voxel, points_world, ranges) -> int:
    """Fuse points into the height image; returns how many fell outside it."""
    if not v.has_frame:
        raise ValueError("voxel has no image frame yet")
    pts = np.asarray(points_world, dtype=float).reshape(-1, 3)
    rng = np.asarray(ranges, dtype=float).reshape(-1)
    pc = v.T_CG.apply(pts)
    ui, vi, ok = _pixel_indices(pc, v.pixel_res, np.array([v.image_w]), np.array([v.image_h]))
    w = point_weight(rng, v.max_point_weight)
    if np.any(ok):
        raw = v.image_raw[None]
        wt = v.weight[None]
        scatter_into_images(raw, wt, np.zeros(ok.sum(), dtype=np.int64), ui[ok], vi[ok], w[ok], pc[ok, 2], v.side)
    _refresh_display(v)
    return int((~ok).sum())


def _pixel_indices(pc, pixel_res, w_img, h_img):
    u = pc[:, 0] / pixel_res
    vv = pc[:, 1] / pixel_res
    ui = np.floor(u).astype(np.int64)
    vi = np.floor(vv).astype(np.int64)
    # tolerate round-off on the far image border
    ui = np.where((ui == w_img) & (u < w_img + 1e-6), w_img - 1, ui)
    vi = np.where((vi == h_img) & (vv < h_img + 1e-6), h_img - 1, vi)
    ui = np.where((ui == -1) & (u > -1e-6), 0, ui)
    vi = np.where((vi == -1) & (vv > -1e-6), 0, vi)
    ok = (ui >= 0) & (ui < w_img) & (vi >= 0) & (vi < h_img)
    return ui, vi, ok


def _refresh_display(v: Voxel) -> None:
    v.image = smooth_images(v.image_raw[None], v.weight[None], v.smoothing_sigma)[0]
    v.mid = float(image_mid(v.image, v.weight))


def reproject_image(v: Voxel, T_new_old: SE3Pose, image_w: int | None = None, image_h: int | None = None) -> None:
    """Move the image into ``T_new_old @ T_CG`` and resample it there."""
    w = v.image_w if image_w is None else int(image_w)
    h = v.image_h if image_h is None else int(image_h)
    raw, wt = reproject_raw(v.image_raw, v.weight, T_new_old, v.pixel_res, (w, h), v.side)
    T_new = T_new_old @ v.T_CG
    v.R_CG = T_new.rotation.copy()
    v.t_CG = T_new.translation.copy()
    v.normal = v.R_CG[2].copy()
    v.image_w, v.image_h = w, h
    v.image_raw = raw
    v.weight = wt
    _refresh_display(v)


def mean_image_distance(v: Voxel) -> float:
    return float(image_mid(v.image, v.weight))


def query_height(v: Voxel, u: float, v_coord: float):
    """Interpolated height at continuous pixel coordinates, or None."""
    hgt, valid, _, _ = interpolate(v.image[None], v.weight[None], v.dims, np.array([0]), np.array([u]), np.array([v_coord]))
    return float(hgt[0]) if valid[0] else None


# --- map ----------------------------------------------------------------------


@dataclass
class IntegrationStats:
    points: int = 0
    voxels_touched: int = 0
    voxels_created: int = 0
    frames_initialized: int = 0
    reprojections: int = 0
    origin_shifts: int = 0
    out_of_image: int = 0
    evicted: int = 0


class BievrMap:
    """Morton-keyed voxel table with bounded size (least-recently-updated eviction)."""

    def __init__(self, config: MapConfig | None = None, **overrides):
        cfg = config or MapConfig()
        if overrides:
            cfg = MapConfig(**{**cfg.__dict__, **overrides})
        cfg.validate()
        self.config = cfg
        self.voxel_len = cfg.voxel_len
        self.pixel_res = cfg.pixel_res
        self.side = max_image_side(cfg.voxel_len, cfg.pixel_res)
        self.update_counter = 0
        self._size = 0
        self._alloc(min(1024, cfg.capacity + 1))
        self._free: list[int] = list(range(self._size - 1, -1, -1))
        self._count = 0
        self._lookup_dirty = True
        self._sorted_keys = np.zeros(0, dtype=np.uint64)
        self._sorted_slots = np.zeros(0, dtype=np.int64)

    # storage -----------------------------------------------------------
    def _alloc(self, size: int) -> None:
        S = self.side
        old = self._size
        fields = {
            "keys": ((), np.uint64),
            "alive": ((), bool),
            "s": ((3,), float),
            "C": ((3, 3), float),
            "n": ((), np.int64),
            "has_frame": ((), bool),
            "R_CG": ((3, 3), float),
            "t_CG": ((3,), float),
            "dims": ((2,), np.int64),
            "image": ((S, S), float),
            "image_raw": ((S, S), float),
            "weight": ((S, S), float),
            "mid": ((), float),
            "normal": ((3,), float),
            "stamp": ((), np.int64),
        }
        for name, (shape, dtype) in fields.items():
            arr = np.zeros((size,) + shape, dtype=dtype)
            if old:
                arr[:old] = getattr(self, name)
            setattr(self, name, arr)
        self._size = size

    def _grow(self, needed: int) -> None:
        new = max(needed, 2 * self._size)
        old = self._size
        self._alloc(new)
        self._free.extend(range(new - 1, old - 1, -1))

    def _reset_slot(self, sl: np.ndarray) -> None:
        self.s[sl] = 0.0
        self.C[sl] = 0.0
        self.n[sl] = 0
        self.has_frame[sl] = False
        self.R_CG[sl] = np.eye(3)
        self.t_CG[sl] = 0.0
        self.dims[sl] = 0
        self.image[sl] = 0.0
        self.image_raw[sl] = 0.0
        self.weight[sl] = 0.0
        self.mid[sl] = 0.0
        self.normal[sl] = (0.0, 0.0, 1.0)

    def __len__(self) -> int:
        return self._count

    def __contains__(self, key) -> bool:
        return bool(self.lookup(np.array([key], dtype=np.uint64))[0] >= 0)

    @property
    def capacity(self) -> int:
        return self.config.capacity

    def _refresh_lookup(self) -> None:
        if not self._lookup_dirty:
            return
        slots = np.nonzero(self.alive)[0]
        order = np.argsort(self.keys[slots], kind="stable")
        self._sorted_slots = slots[order]
        self._sorted_keys = self.keys[self._sorted_slots]
        self._lookup_dirty = False

    def lookup(self, keys) -> np.ndarray:
        """Slot index per key, -1 where the voxel is absent."""
        self._refresh_lookup()
        keys = np.asarray(keys, dtype=np.uint64)
        if len(self._sorted_keys) == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, len(self._sorted_keys) - 1)
        hit = self._sorted_keys[pos] == keys
        return np.where(hit, self._sorted_slots[pos], -1)

    def slots_for_points(self, points_world) -> np.ndarray:
        return self.lookup(morton.keys_of(points_world, self.voxel_len))

    def alive_slots(self) -> np.ndarray:
        self._refresh_lookup()
        return self._sorted_slots.copy()

    def voxel_keys(self) -> np.ndarray:
        self._refresh_lookup()
        return self._sorted_keys.copy()

    def _create(self, keys: np.ndarray) -> np.ndarray:
        k = len(keys)
        if k > len(self._free):
            self._grow(self._size + k - len(self._free))
        slots = np.array([self._free.pop() for _ in range(k)], dtype=np.int64)
        self._reset_slot(slots)
        self.keys[slots] = keys
        self.alive[slots] = True
        self._count += k
        self._lookup_dirty = True
        return slots

    def _evict(self) -> int:
        excess = self._count - self.config.capacity
        if excess <= 0:
            return 0
        slots = np.nonzero(self.alive)[0]
        order = np.lexsort((self.keys[slots], self.stamp[slots]))
        victims = slots[order[:excess]]
        self.alive[victims] = False
        self._free.extend(int(s) for s in victims[::-1])
        self._count -= excess
        self._lookup_dirty = True
        return excess

    # access -------------------------------------------------------------
    def slot_of(self, key) -> int:
        sl = int(self.lookup(np.array([key], dtype=np.uint64))[0])
        if sl < 0:
            raise KeyError(key)
        return sl

    def voxel(self, key) -> Voxel:
        """Copy of one voxel as a standalone :class:`Voxel`."""
        sl = self.slot_of(key)
        cfg = self.config
        ijk = tuple(int(c) for c in morton.decode(np.uint64(key)))
        return Voxel(
            key=ijk,
            voxel_len=cfg.voxel_len,
            pixel_res=cfg.pixel_res,
            normal_reproject_thresh=cfg.normal_reproject_thresh,
            min_points_for_plane=cfg.min_points_for_plane,
            smoothing_sigma=cfg.smoothing_sigma,
            max_point_weight=cfg.max_point_weight,
            origin_shift_thresh=cfg.origin_shift_thresh,
            s=self.s[sl].copy(),
            C=self.C[sl].copy(),
            n=int(self.n[sl]),
            has_frame=bool(self.has_frame[sl]),
            R_CG=self.R_CG[sl].copy(),
            t_CG=self.t_CG[sl].copy(),
            image_w=int(self.dims[sl, 0]),
            image_h=int(self.dims[sl, 1]),
            image=self.image[sl].copy(),
            image_raw=self.image_raw[sl].copy(),
            weight=self.weight[sl].copy(),
            mid=float(self.mid[sl]),
            normal=self.normal[sl].copy(),
            lru_stamp=int(self.stamp[sl]),
        )

    def mid_of_keys(self, keys) -> np.ndarray:
        sl = self.lookup(keys)
        return np.where(sl >= 0, self.mid[np.maximum(sl, 0)], 0.0)

    # integration -----------------------------------------------------------
    def integrate_scan(self, points_world, ranges, sensor_origin=None) -> IntegrationStats:
        """Fuse an undistorted world-frame scan into the map.

        ``ranges`` are the sensor-frame ranges of the points (they set the
        pixel weights); ``sensor_origin`` orients the normals of voxels that
        get their first plane in this scan.
        """
        cfg = self.config
        pts = np.asarray(points_world, dtype=float).reshape(-1, 3)
        rng = np.asarray(ranges, dtype=float).reshape(-1)
        if len(rng) != len(pts):
            raise ValueError("points and ranges differ in length")
        stats = IntegrationStats(points=len(pts))
        if len(pts) == 0:
            return stats
        origin = np.zeros(3) if sensor_origin is None else np.asarray(sensor_origin, dtype=float)

        keys = morton.keys_of(pts, cfg.voxel_len)
        ukeys, first_idx, inv = np.unique(keys, return_index=True, return_inverse=True)
        inv = inv.reshape(-1)
        slots_u = self.lookup(ukeys)
        missing = slots_u < 0
        if np.any(missing):
            slots_u[missing] = self._create(ukeys[missing])
            stats.voxels_created = int(missing.sum())
        stats.voxels_touched = len(ukeys)

        # LRU stamps follow first appearance order within the batch
        rank = np.empty(len(ukeys), dtype=np.int64)
        rank[np.argsort(first_idx, kind="stable")] = np.arange(len(ukeys))
        self.stamp[slots_u] = self.update_counter + 1 + rank
        self.update_counter += len(ukeys)

        U = len(ukeys)
        ssum = np.stack([np.bincount(inv, weights=pts[:, a], minlength=U) for a in range(3)], axis=1)
        csum = np.stack(
            [np.bincount(inv, weights=pts[:, a] * pts[:, b], minlength=U) for a in range(3) for b in range(3)],
            axis=1,
        ).reshape(U, 3, 3)
        self.s[slots_u] += ssum
        self.C[slots_u] += csum
        self.n[slots_u] += np.bincount(inv, minlength=U)

        cand = slots_u[self.n[slots_u] >= cfg.min_points_for_plane]
        refreshed: list[int] = []
        if len(cand):
            mu, sigma = plane_moments(self.s[cand], self.C[cand], self.n[cand])
            normals, tie = smallest_eigvec(sigma)
            fresh = ~self.has_frame[cand] & ~tie
            if np.any(fresh):
                sl = cand[fresh]
                nv = normals[fresh]
                flip = np.sum(nv * (origin - mu[fresh]), axis=1) < 0
                nv[flip] *= -1
                corner = morton.decode(self.keys[sl]).astype(float) * cfg.voxel_len
                R, t, dims = frame_from_normal(nv, mu[fresh], corner, cfg.voxel_len, cfg.pixel_res)
                self.R_CG[sl] = R
                self.t_CG[sl] = t
                self.dims[sl] = dims
                self.normal[sl] = nv
                self.has_frame[sl] = True
                stats.frames_initialized = len(sl)
            old = self.has_frame[cand] & ~fresh & ~tie
            if np.any(old):
                sl = cand[old]
                nv = normals[old]
                last = self.normal[sl]
                dots = np.sum(nv * last, axis=1)
                nv[dots < 0] *= -1
                ang = np.arccos(np.clip(np.abs(dots), -1.0, 1.0))
                big = ang > cfg.normal_reproject_thresh
                for k in np.nonzero(big)[0]:
                    self._refresh_frame(int(sl[k]), nv[k], mu[old][k])
                    refreshed.append(int(sl[k]))
                stats.reprojections = int(big.sum())
            # keep the image plane through the current centroid
            framed = cand[self.has_frame[cand]]
            if len(framed):
                mu_f = self.s[framed] / self.n[framed][:, None]
                dz = np.einsum("kj,kj->k", self.R_CG[framed, 2], mu_f) + self.t_CG[framed, 2]
                shift = np.abs(dz) > cfg.origin_shift_thresh
                if np.any(shift):
                    sl = framed[shift]
                    d = dz[shift]
                    self.t_CG[sl, 2] -= d
                    obs = self.weight[sl] > 0
                    self.image_raw[sl] -= np.where(obs, d[:, None, None], 0.0)
                    stats.origin_shifts = int(shift.sum())

        # pixel update
        pslots = slots_u[inv]
        framed_pt = self.has_frame[pslots]
        if np.any(framed_pt):
            ps = pslots[framed_pt]
            pc = np.einsum("nij,nj->ni", self.R_CG[ps], pts[framed_pt]) + self.t_CG[ps]
            ui, vi, ok = _pixel_indices(pc, cfg.pixel_res, self.dims[ps, 0], self.dims[ps, 1])
            stats.out_of_image = int((~ok).sum())
            w = point_weight(rng[framed_pt], cfg.max_point_weight)
            scatter_into_images(self.image_raw, self.weight, ps[ok], ui[ok], vi[ok], w[ok], pc[ok, 2], self.side)

        touched = slots_u[self.has_frame[slots_u]]
        if len(touched):
            self.image[touched] = smooth_images(self.image_raw[touched], self.weight[touched], cfg.smoothing_sigma)
            self.mid[touched] = image_mid(self.image[touched], self.weight[touched])

        stats.evicted = self._evict()
        return stats

    def _refresh_frame(self, sl: int, normal: np.ndarray, mu: np.ndarray) -> None:
        cfg = self.config
        corner = morton.decode(self.keys[sl]).astype(float) * cfg.voxel_len
        R, t, dims = frame_from_normal(normal[None], mu[None], corner[None], cfg.voxel_len, cfg.pixel_res)
        T_old = SE3Pose(self.R_CG[sl], self.t_CG[sl])
        T_new = SE3Pose(R[0], t[0])
        raw, wt = reproject_raw(self.image_raw[sl], self.weight[sl], T_new @ T_old.inverse(), cfg.pixel_res, dims[0], self.side)
        self.R_CG[sl] = R[0]
        self.t_CG[sl] = t[0]
        self.dims[sl] = dims[0]
        self.normal[sl] = normal
        self.image_raw[sl] = raw
        self.weight[sl] = wt

    def reproject_voxel(self, key, T_new_old: SE3Pose) -> None:
        """Move one voxel's image frame by ``T_new_old`` (same image size)."""
        sl = self.slot_of(key)
        if not self.has_frame[sl]:
            raise ValueError("voxel has no image frame")
        T_old = SE3Pose(self.R_CG[sl], self.t_CG[sl])
        raw, wt = reproject_raw(self.image_raw[sl], self.weight[sl], T_new_old, self.pixel_res, self.dims[sl], self.side)
        T_new = T_new_old @ T_old
        self.R_CG[sl] = T_new.rotation
        self.t_CG[sl] = T_new.translation
        self.normal[sl] = T_new.rotation[2]
        self.image_raw[sl] = raw
        self.weight[sl] = wt
        self.image[sl] = smooth_images(raw[None], wt[None], self.config.smoothing_sigma)[0]
        self.mid[sl] = image_mid(self.image[sl], wt)

    def query(self, points_world):
        """Interpolated map heights for world points (slot, height, valid)."""
        pts = np.asarray(points_world, dtype=float).reshape(-1, 3)
        sl = self.slots_for_points(pts)
        ok = sl >= 0
        ok[ok] = self.has_frame[sl[ok]]
        slc = np.maximum(sl, 0)
        pc = np.einsum("nij,nj->ni", self.R_CG[slc], pts) + self.t_CG[slc]
        h, valid, _, _ = interpolate(self.image, self.weight, self.dims, slc, pc[:, 0] / self.pixel_res, pc[:, 1] / self.pixel_res)
        valid &= ok
        return sl, np.where(valid, h, np.nan), valid

    # export -------------------------------------------------------------
    def snapshot(self) -> "MapSnapshot":
        sl = self.alive_slots()
        return MapSnapshot(
            voxel_len=self.voxel_len,
            pixel_res=self.pixel_res,
            keys=self.keys[sl].copy(),
            R_CG=self.R_CG[sl].copy(),
            t_CG=self.t_CG[sl].copy(),
            dims=np.where(self.has_frame[sl, None], self.dims[sl], 0),
            image=self.image[sl].copy(),
            weight=self.weight[sl].copy(),
        )


@dataclass
class MapSnapshot:
    """Frozen, serialisable view of the map: frames and (image, weight) per voxel."""

    voxel_len: float
    pixel_res: float
    keys: np.ndarray
    R_CG: np.ndarray
    t_CG: np.ndarray
    dims: np.ndarray
    image: np.ndarray
    weight: np.ndarray

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def side(self) -> int:
        return self.image.shape[-1] if len(self.image) else max_image_side(self.voxel_len, self.pixel_res)

    def write(self, path) -> None:
        """Little-endian binary layout, see README ("Map snapshot")."""
        with open(path, "wb") as fh:
            fh.write(_SNAPSHOT_MAGIC)
            fh.write(struct.pack("<IddQ", _SNAPSHOT_VERSION, self.voxel_len, self.pixel_res, len(self.keys)))
            for k in range(len(self.keys)):
                w, h = (int(x) for x in self.dims[k])
                fh.write(struct.pack("<Q", int(self.keys[k])))
                fh.write(np.asarray(self.R_CG[k], dtype="<f8").tobytes())
                fh.write(np.asarray(self.t_CG[k], dtype="<f8").tobytes())
                fh.write(struct.pack("<II", w, h))
                pairs = np.stack([self.image[k, :h, :w], self.weight[k, :h, :w]], axis=-1)
                fh.write(np.ascontiguousarray(pairs, dtype="<f8").tobytes())

    @classmethod
    def read(cls, path) -> "MapSnapshot":
        data = Path(path).read_bytes()
        if data[:8] != _SNAPSHOT_MAGIC:
            raise ValueError("not a map snapshot")
        version, vlen, res, count = struct.unpack_from("<IddQ", data, 8)
        if version != _SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        off = 8 + struct.calcsize("<IddQ")
        side = max_image_side(vlen, res)
        keys = np.zeros(count, dtype=np.uint64)
        R = np.zeros((count, 3, 3))
        t = np.zeros((count, 3))
        dims = np.zeros((count, 2), dtype=np.int64)
        img = np.zeros((count, side, side))
        wt = np.zeros((count, side, side))
        for k in range(count):
            (keys[k],) = struct.unpack_from("<Q", data, off)
            off += 8
            R[k] = np.frombuffer(data, "<f8", 9, off).reshape(3, 3)
            off += 72
            t[k] = np.frombuffer(data, "<f8", 3, off)
            off += 24
            w, h = struct.unpack_from("<II", data, off)
            off += 8
            dims[k] = (w, h)
            pairs = np.frombuffer(data, "<f8", 2 * w * h, off).reshape(h, w, 2)
            off += 16 * w * h
            img[k, :h, :w] = pairs[..., 0]
            wt[k, :h, :w] = pairs[..., 1]
        return cls(vlen, res, keys, R, t, dims, img, wt)

    def dump_text(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# voxel_len {self.voxel_len} pixel_res {self.pixel_res} voxels {len(self.keys)}\n")
            for k in range(len(self.keys)):
                w, h = (int(x) for x in self.dims[k])
                ijk = morton.decode(self.keys[k]).tolist()
                fh.write(f"voxel {int(self.keys[k])} ijk {ijk} dims {w} {h}\n")
                fh.write("R " + " ".join(f"{x:.9g}" for x in self.R_CG[k].ravel()) + "\n")
                fh.write("t " + " ".join(f"{x:.9g}" for x in self.t_CG[k]) + "\n")
                for j in range(h):
                    row = (
                        f"{self.image[k, j, i]:.4g}:{self.weight[k, j, i]:.3g}" if self.weight[k, j, i] > 0 else "."
                        for i in range(w)
                    )
                    fh.write(" ".join(row) + "\n")


def check_invariants(m: BievrMap, tol: float = 1e-9) -> list[str]:
    """Human-readable list of violated voxel invariants (empty when healthy)."""
    errs: list[str] = []
    cfg = m.config
    if len(m) > cfg.capacity:
        errs.append(f"voxel count {len(m)} exceeds capacity {cfg.capacity}")
    sl = m.alive_slots()
    if len(sl) != len(m):
        errs.append("alive slot count mismatch")
    if np.any(m.n[sl] < 1):
        errs.append("voxel with n < 1")
    limit = max_image_side(cfg.voxel_len, cfg.pixel_res)
    d = m.dims[sl]
    if np.any(d < 0) or np.any(d > limit):
        errs.append("image dims out of range")
    obs = m.weight[sl] > 0
    if np.any(m.weight[sl] < 0):
        errs.append("negative weight")
    if np.any(np.where(obs, 0.0, np.abs(m.image[sl])) > 0):
        errs.append("unobserved pixel carries a value")
    # observed pixels must lie inside the image
    S = m.side
    jj, ii = np.meshgrid(np.arange(S), np.arange(S), indexing="ij")
    outside = (ii[None] >= d[:, 0, None, None]) | (jj[None] >= d[:, 1, None, None])
    if np.any(obs & outside):
        errs.append("observed pixel outside image bounds")
    mid = image_mid(m.image[sl], m.weight[sl])
    if np.any(np.abs(mid - m.mid[sl]) > 1e-12):
        errs.append("stale MID")
    fr = sl[m.has_frame[sl]]
    if len(fr):
        R = m.R_CG[fr]
        if np.any(np.abs(np.einsum("kji,kjl->kil", R, R) - np.eye(3)) > tol):
            errs.append("non-orthonormal image frame")
        if np.any(np.abs(np.linalg.norm(m.normal[fr], axis=1) - 1.0) > tol):
            errs.append("normal not unit length")
        if np.any(np.abs(R[:, 2] - m.normal[fr]) > tol):
            errs.append("frame z-axis differs from stored normal")
        mu = m.s[fr] / m.n[fr][:, None]
        z = np.einsum("kj,kj->k", R[:, 2], mu) + m.t_CG[fr, 2]
        if np.any(np.abs(z) > cfg.voxel_len * math.sqrt(3.0) / 2.0):
            errs.append("centroid far from image plane")
    nf = sl[~m.has_frame[sl]]
    if np.any(m.weight[nf] > 0):
        errs.append("frameless voxel holds image data")
    return errs

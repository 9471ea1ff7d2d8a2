"""Analytic-surface LiDAR and IMU simulator.

Rays are cast against closed-form surfaces, so every return is exact up to the
injected range noise. Trajectories hold still until ``t_move`` and then follow
quintic splines (position and rotation vector) with zero end velocity and
acceleration, which keeps the IMU signals continuous.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_interp_spline

from ..geometry import ImuData, Scan, SE3Pose, so3_exp_batch, so3_right_jacobian

GRAVITY_VEC = np.array([0.0, 0.0, -9.81])


# --- surfaces ------------------------------------------------------------------


def _first_positive(*ts):
    t = np.full(ts[0].shape, np.inf)
    for x in ts:
        t = np.where((x > 1e-9) & (x < t), x, t)
    return t


@dataclass
class Plane:
    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)

    def intersect(self, o, d):
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        den = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(self.point) - o) @ n) / den
        return np.where(np.abs(den) > 1e-12, np.where(t > 1e-9, t, np.inf), np.inf)


def _slabs(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    return tmin, tmax


@dataclass
class Box:
    """Solid axis-aligned box seen from outside."""

    center: tuple = (0.0, 0.0, 0.5)
    size: tuple = (1.0, 1.0, 1.0)

    def intersect(self, o, d):
        c = np.asarray(self.center, float)
        h = 0.5 * np.asarray(self.size, float)
        tmin, tmax = _slabs(o, d, c - h, c + h)
        hit = (tmax >= tmin) & (tmin > 1e-9)
        return np.where(hit, tmin, np.inf)


@dataclass
class Room:
    """Hollow axis-aligned box seen from inside."""

    center: tuple = (0.0, 0.0, 1.5)
    size: tuple = (10.0, 8.0, 3.0)

    def intersect(self, o, d):
        c = np.asarray(self.center, float)
        h = 0.5 * np.asarray(self.size, float)
        tmin, tmax = _slabs(o, d, c - h, c + h)
        return np.where((tmax >= tmin) & (tmax > 1e-9), tmax, np.inf)


@dataclass
class Tunnel:
    """Open rectangular tube along +x with sinusoidal side walls.

    The walls sit at ``y = +-(width/2 + A sin(2 pi x / wavelength))``; floor
    ``z = z_floor`` and ceiling ``z = z_floor + height`` are flat.
    """

    length: float = 60.0
    width: float = 2.5
    height: float = 3.0
    x0: float = -5.0
    z_floor: float = 0.0
    amplitude: float = 0.02
    wavelength: float = 1.0

    def wall_offset(self, x):
        return self.amplitude * np.sin(2 * np.pi * np.asarray(x) / self.wavelength)

    def _wall(self, o, d, side):
        hw = 0.5 * self.width
        k = 2 * np.pi / self.wavelength
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (side * hw - o[:, 1]) / d[:, 1]
        t = np.where(np.isfinite(t), t, np.inf)
        ok = np.isfinite(t) & (t > 0)
        t = np.where(ok, t, 1.0)
        for _ in range(12):
            x = o[:, 0] + d[:, 0] * t
            f = o[:, 1] + d[:, 1] * t - side * (hw + self.amplitude * np.sin(k * x))
            df = d[:, 1] - side * self.amplitude * k * np.cos(k * x) * d[:, 0]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = t - np.where(np.abs(df) > 1e-12, f / df, 0.0)
        x = o[:, 0] + d[:, 0] * t
        f = o[:, 1] + d[:, 1] * t - side * (hw + self.amplitude * np.sin(k * x))
        ok &= (np.abs(f) < 1e-9) & (t > 1e-9)
        return np.where(ok, t, np.inf)

    def intersect(self, o, d):
        z1 = self.z_floor + self.height
        with np.errstate(divide="ignore", invalid="ignore"):
            tf = (self.z_floor - o[:, 2]) / d[:, 2]
            tc = (z1 - o[:, 2]) / d[:, 2]
        tf = np.where(np.isfinite(tf), tf, np.inf)
        tc = np.where(np.isfinite(tc), tc, np.inf)
        t = _first_positive(tf, tc, self._wall(o, d, 1.0), self._wall(o, d, -1.0))
        x = o[:, 0] + d[:, 0] * np.where(np.isfinite(t), t, 0.0)
        inside = (x >= self.x0) & (x <= self.x0 + self.length)
        return np.where(inside, t, np.inf)


@dataclass
class BumpField:
    """Ground plane ``z = 0`` with hemispherical bumps."""

    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    radius: float = 0.3

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -o[:, 2] / d[:, 2]
        t = np.where(np.isfinite(t) & (t > 1e-9), t, np.inf)
        r2 = self.radius**2
        for cx, cy in np.asarray(self.centers).reshape(-1, 2):
            oc = o - np.array([cx, cy, 0.0])
            b = np.einsum("ij,ij->i", oc, d)
            c = np.einsum("ij,ij->i", oc, oc) - r2
            disc = b * b - c
            ts = -b - np.sqrt(np.maximum(disc, 0.0))
            z = o[:, 2] + d[:, 2] * ts
            hit = (disc >= 0) & (ts > 1e-9) & (z >= 0)
            t = np.where(hit & (ts < t), ts, t)
        return t


@dataclass
class SceneSpec:
    surfaces: list
    max_range: float = 40.0
    min_range: float = 0.3
    seed: int = 0

    def cast(self, origins, dirs):
        o = np.asarray(origins, float)
        d = np.asarray(dirs, float)
        t = np.full(len(d), np.inf)
        for s in self.surfaces:
            t = np.minimum(t, s.intersect(o, d))
        t[(t > self.max_range) | (t < self.min_range)] = np.inf
        return t


def room_scene(seed: int = 0) -> SceneSpec:
    return SceneSpec(
        [
            Room((0.0, 0.0, 1.5), (12.0, 9.0, 3.5)),
            Box((2.5, 2.0, 0.4), (1.2, 0.8, 0.8)),
            Box((-3.0, -2.2, 0.6), (0.9, 1.4, 1.2)),
            Box((-1.0, 3.2, 0.9), (2.0, 0.6, 1.8)),
            Box((3.7, -2.9, 0.35), (0.7, 0.7, 0.7)),
        ],
        max_range=30.0,
        seed=seed,
    )


def tunnel_scene(seed: int = 0, amplitude: float = 0.02, wavelength: float = 1.0, length: float = 70.0) -> SceneSpec:
    """Wide, low tube along +x for a vehicle driving at y = z = 0.

    Walls, floor and ceiling lie 5 cm inside 0.5 m voxel faces, so the
    wall/floor creases fill only thin slivers of their voxels instead of
    forming L-shaped ones.
    """
    return SceneSpec([Tunnel(length, 10.1, 3.0, -8.0, -1.05, amplitude, wavelength)], max_range=25.0, seed=seed)


def box_on_plane_scene(seed: int = 0, box_height: float = 0.3) -> SceneSpec:
    return SceneSpec(
        [Plane((0, 0, 0), (0, 0, 1)), Box((1.0, 0.0, box_height / 2), (1.0, 1.0, box_height))],
        max_range=20.0,
        seed=seed,
    )


def bump_field_scene(seed: int = 0, n_bumps: int = 40, radius: float = 0.3, extent: float = 20.0) -> SceneSpec:
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-extent / 2, extent / 2, size=(n_bumps, 2))
    return SceneSpec([BumpField(centers, radius)], max_range=25.0, seed=seed)


SCENES = {
    "room": room_scene,
    "tunnel": tunnel_scene,
    "box-on-plane": box_on_plane_scene,
    "bump-field": bump_field_scene,
}


# --- trajectories ----------------------------------------------------------------


@dataclass
class LidarModel:
    pattern: str = "spinning"  # "raster", "nonrepetitive" or "rosette"
    beams: int = 24
    azimuth_steps: int = 900
    fov_up: float = 25.0
    fov_down: float = -25.0
    h_fov: float = 70.0  # raster only
    rate: float = 10.0
    range_sigma: float = 0.0

    @property
    def rays_per_scan(self) -> int:
        return self.beams * self.azimuth_steps

    def directions(self, rng: np.random.Generator | None = None):
        """Unit ray directions (N,3) in firing order and their time fractions.

        The non-repetitive pattern draws fresh directions uniformly over the
        field of view for every scan, so successive scans cover new spots.
        """
        if self.pattern in ("nonrepetitive", "rosette"):
            if rng is None:
                raise ValueError("non-repetitive patterns need a generator")
            n = self.rays_per_scan
            if self.pattern == "nonrepetitive":
                A = np.deg2rad(rng.uniform(-self.h_fov / 2, self.h_fov / 2, n))
                E = np.deg2rad(rng.uniform(self.fov_down, self.fov_up, n))
            else:
                A, E = self._rosette(n, rng)
            d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
            return d, np.arange(n) / n
        el = np.deg2rad(np.linspace(self.fov_down, self.fov_up, self.beams))
        if self.pattern == "spinning":
            az = 2 * np.pi * np.arange(self.azimuth_steps) / self.azimuth_steps
        elif self.pattern == "raster":
            az = np.deg2rad(np.linspace(-self.h_fov / 2, self.h_fov / 2, self.azimuth_steps))
        else:
            raise ValueError(f"unknown LiDAR pattern {self.pattern!r}")
        if self.pattern == "spinning":
            A, E = np.meshgrid(az, el, indexing="ij")  # column by column
        else:
            E, A = np.meshgrid(el, az, indexing="ij")  # row by row
        d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)
        if self.pattern == "spinning":
            frac = np.repeat(np.arange(self.azimuth_steps) / self.azimuth_steps, self.beams)
        else:
            frac = np.arange(len(d)) / len(d)
        return d, frac

    def _rosette(self, n: int, rng):
        """Azimuth/elevation of a two-prism (Risley) scanner.

        Two wedges counter-rotate at incommensurate rates so each emitter
        traces a rosette that is densest at the centre of the circular field
        of view; a random start phase per scan keeps scans from repeating.
        Six emitters sit side by side a few degrees apart.
        """
        half = np.deg2rad(self.h_fov / 2) / 2  # deflection per prism
        w1, w2 = 2 * np.pi * 7294 / 60, -2 * np.pi * 4664 / 60  # rad/s
        t = np.arange(n) / n / self.rate
        p1, p2 = rng.uniform(0, 2 * np.pi, 2)
        x = half * (np.cos(w1 * t + p1) + np.cos(w2 * t + p2))
        y = half * (np.sin(w1 * t + p1) + np.sin(w2 * t + p2))
        offsets = np.deg2rad(np.linspace(-4.0, 4.0, 6))
        y = y + offsets[np.arange(n) % 6]
        return x, y


@dataclass
class TrajectorySpec:
    """Waypoint trajectory of the IMU body in the scene frame.

    ``times`` are relative to ``t_move``; before it the body rests at the
    first waypoint for ``t_move`` seconds.
    """

    times: np.ndarray
    positions: np.ndarray
    rotvecs: np.ndarray | None = None
    t_move: float = 1.0
    imu_rate: float = 200.0
    lidar: LidarModel = field(default_factory=LidarModel)
    T_IL: SE3Pose = field(default_factory=SE3Pose.identity)
    gyro_sigma: float = 0.0
    acc_sigma: float = 0.0
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    acc_bias: tuple = (0.0, 0.0, 0.0)
    gyro_bias_walk: float = 0.0
    acc_bias_walk: float = 0.0
    scan_start: float | None = None  # defaults to t_move

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.positions = np.asarray(self.positions, float)
        self.rotvecs = np.zeros_like(self.positions) if self.rotvecs is None else np.asarray(self.rotvecs, float)
        if len(self.times) < 2 or np.any(np.diff(self.times) <= 0) or self.times[0] != 0.0:
            raise ValueError("waypoint times must start at 0 and increase")

    @property
    def duration(self) -> float:
        return self.t_move + self.times[-1]


class Trajectory:
    """Evaluates pose and derivatives of a ``TrajectorySpec``."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        bc = ([(1, np.zeros(3)), (2, np.zeros(3))], [(1, np.zeros(3)), (2, np.zeros(3))])
        if len(spec.times) >= 2:
            self._p = make_interp_spline(spec.times, spec.positions, k=5, bc_type=bc)
            self._r = make_interp_spline(spec.times, spec.rotvecs, k=5, bc_type=bc)

    def _tau(self, t):
        return np.clip(np.asarray(t, float) - self.spec.t_move, 0.0, self.spec.times[-1])

    def position(self, t):
        return self._p(self._tau(t))

    def velocity(self, t):
        t = np.asarray(t, float)
        moving = (t > self.spec.t_move) & (t < self.spec.duration)
        return self._p(self._tau(t), 1) * moving[..., None]

    def acceleration(self, t):
        t = np.asarray(t, float)
        moving = (t > self.spec.t_move) & (t < self.spec.duration)
        return self._p(self._tau(t), 2) * moving[..., None]

    def rotation(self, t):
        return so3_exp_batch(np.atleast_2d(self._r(self._tau(t))))

    def angular_velocity(self, t):
        """Body-frame angular rate."""
        t = np.atleast_1d(np.asarray(t, float))
        moving = (t > self.spec.t_move) & (t < self.spec.duration)
        phi = self._r(self._tau(t))
        dphi = self._r(self._tau(t), 1) * moving[:, None]
        return np.einsum("nij,nj->ni", so3_right_jacobian(phi), dphi)

    def pose(self, t) -> SE3Pose:
        return SE3Pose(self.rotation(t)[0], self.position(t))


def straight_trajectory(length: float, speed: float, wobble: float = 0.03, lateral: float = 0.1, seed: int = 0, **kw) -> TrajectorySpec:
    """Drive along +x with gentle lateral, vertical and attitude variation."""
    rng = np.random.default_rng(seed)
    T = length / speed
    n = max(int(T / 1.5), 4)
    tt = np.linspace(0.0, T + 2.0, n + 1)
    # ramp in and out over one second at each end
    s = np.clip((tt - 1.0) / T, 0.0, 1.0)
    x = length * s
    y = lateral * np.sin(2 * np.pi * s * 3) * (s > 0) * (s < 1)
    z = 0.5 * lateral * np.sin(2 * np.pi * s * 5 + 0.3) * (s > 0) * (s < 1)
    rv = wobble * rng.uniform(-1, 1, size=(n + 1, 3))
    rv[0] = rv[-1] = 0.0
    rv[:, 2] *= 0.5
    return TrajectorySpec(tt, np.stack([x, y, z], axis=1), rv, **kw)


def livox_lidar(range_sigma: float = 0.01) -> LidarModel:
    """Solid-state rosette scanner: 24k rays per 10 Hz scan, 70 deg circular field of view."""
    return LidarModel(pattern="rosette", beams=24, azimuth_steps=1000, h_fov=70.0, range_sigma=range_sigma)


def tunnel_trajectory(seed: int = 0, length: float = 50.0, speed: float = 2.0, **kw) -> TrajectorySpec:
    """Straight tunnel drive with a MEMS-grade IMU and constant biases."""
    opts = dict(
        lidar=livox_lidar(),
        gyro_sigma=1e-3,
        acc_sigma=1e-2,
        gyro_bias=(0.002, -0.001, 0.001),
        acc_bias=(0.05, -0.03, 0.02),
    )
    opts.update(kw)
    return straight_trajectory(length, speed, seed=seed, **opts)


def room_trajectory(duration: float = 10.0, seed: int = 0, **kw) -> TrajectorySpec:
    rng = np.random.default_rng(seed)
    n = max(int(duration / 1.0), 4)
    tt = np.linspace(0.0, duration, n + 1)
    pos = np.column_stack([rng.uniform(-2.5, 2.5, n + 1), rng.uniform(-1.8, 1.8, n + 1), rng.uniform(1.0, 1.8, n + 1)])
    pos[0] = (0.0, 0.0, 1.2)
    rv = np.column_stack([rng.uniform(-0.1, 0.1, n + 1), rng.uniform(-0.1, 0.1, n + 1), np.cumsum(rng.uniform(-0.6, 0.6, n + 1))])
    rv[0] = 0.0
    return TrajectorySpec(tt, pos, rv, **kw)


def static_trajectory(position=(0.0, 0.0, 1.0), rotvec=(0.0, 0.0, 0.0), duration: float = 2.0, **kw) -> TrajectorySpec:
    p = np.tile(np.asarray(position, float), (2, 1))
    r = np.tile(np.asarray(rotvec, float), (2, 1))
    return TrajectorySpec(np.array([0.0, duration]), p, r, **kw)


# --- simulation ----------------------------------------------------------------


@dataclass
class SimResult:
    scans: list
    imu: ImuData
    gt_times: np.ndarray
    gt_poses: list
    T_IL: SE3Pose
    trajectory: Trajectory


def simulate_imu(traj: Trajectory, rng: np.random.Generator, t_end: float | None = None) -> ImuData:
    spec = traj.spec
    t_end = spec.duration if t_end is None else t_end
    t = np.arange(0.0, t_end + 0.5 / spec.imu_rate, 1.0 / spec.imu_rate)
    R = traj.rotation(t)
    gyro = traj.angular_velocity(t)
    acc = np.einsum("nji,nj->ni", R, traj.acceleration(t) - GRAVITY_VEC)
    n = len(t)
    dt = 1.0 / spec.imu_rate
    bg = np.asarray(spec.gyro_bias, float) + np.cumsum(rng.normal(0, spec.gyro_bias_walk * math.sqrt(dt), (n, 3)), axis=0)
    ba = np.asarray(spec.acc_bias, float) + np.cumsum(rng.normal(0, spec.acc_bias_walk * math.sqrt(dt), (n, 3)), axis=0)
    gyro = gyro + bg + rng.normal(0, spec.gyro_sigma, (n, 3))
    acc = acc + ba + rng.normal(0, spec.acc_sigma, (n, 3))
    return ImuData(t, gyro, acc)


def simulate_scan(scene: SceneSpec, traj: Trajectory, t0: float, rng: np.random.Generator) -> Scan:
    spec = traj.spec
    lid = spec.lidar
    period = 1.0 / lid.rate
    dirs_l, frac = lid.directions(rng)
    times = t0 + frac * period
    R = traj.rotation(times)
    p = traj.position(times)
    R_GL = R @ spec.T_IL.rotation
    o = p + np.einsum("nij,j->ni", R, spec.T_IL.translation)
    d = np.einsum("nij,nj->ni", R_GL, dirs_l)
    rng_t = scene.cast(o, d)
    hit = np.isfinite(rng_t)
    ranges = rng_t[hit]
    if lid.range_sigma > 0:
        ranges = ranges + rng.normal(0, lid.range_sigma, len(ranges))
    pts = dirs_l[hit] * ranges[:, None]
    return Scan(pts, times[hit], t0, t0 + period)


def simulate(scene: SceneSpec, traj: TrajectorySpec, seed: int | None = None, n_scans: int | None = None) -> SimResult:
    """Scans (LiDAR frame), the IMU stream and ground-truth IMU poses at scan ends."""
    seed = scene.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    tr = Trajectory(traj)
    period = 1.0 / traj.lidar.rate
    start = traj.t_move if traj.scan_start is None else traj.scan_start
    count = int(math.floor((traj.duration - start) / period + 1e-9)) if n_scans is None else n_scans
    imu = simulate_imu(tr, rng, t_end=max(traj.duration, start + count * period) + 0.05)
    scans = []
    gt_t = []
    gt = []
    for k in range(count):
        t0 = start + k * period
        scans.append(simulate_scan(scene, tr, t0, rng))
        gt_t.append(t0 + period)
        gt.append(tr.pose(t0 + period))
    return SimResult(scans, imu, np.array(gt_t), gt, traj.T_IL, tr)

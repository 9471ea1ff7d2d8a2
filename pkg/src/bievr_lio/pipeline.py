"""Frame-by-frame odometry: predict, undistort, sample, register, window, integrate."""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import morton
from .bievr_map import BievrMap, MapConfig, MapSnapshot
from .geometry import ImuData, Scan, SE3Pose, so3_exp
from .inertial import (
    InertialState,
    SlidingWindow,
    optimize_window,
    predict_pose,
    predict_velocity,
    preintegrate,
    startup,
    undistort,
)
from .registration import RegistrationConfig, register
from .sampling import SamplingConfig, informed_sample_indices


class ConfigError(ValueError):
    pass


@dataclass
class OdometryConfig:
    map: MapConfig = field(default_factory=MapConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    extrinsic_translation: tuple = (0.0, 0.0, 0.0)
    extrinsic_rotvec: tuple = (0.0, 0.0, 0.0)
    window_span: float = 10.0
    window_min_entries: int = 3
    window_max_iterations: int = 20
    ba_limit: float = 1.0
    bg_limit: float = 0.1
    imu_max_gap: float = 0.1
    startup_duration: float = 1.0
    startup_min_duration: float = 0.5
    startup_max_gyro_std: float = 0.05
    output_trajectory: str = ""
    output_log: str = ""

    @property
    def T_IL(self) -> SE3Pose:
        return SE3Pose(so3_exp(np.asarray(self.extrinsic_rotvec, float)), np.asarray(self.extrinsic_translation, float))

    def validate(self) -> None:
        self.map.validate()
        self.sampling.validate()
        self.registration.validate()
        if self.window_span <= 0:
            raise ConfigError("window_span must be positive")
        if self.window_min_entries < 2 or self.window_max_iterations < 1:
            raise ConfigError("window_min_entries >= 2 and window_max_iterations >= 1 required")
        if self.ba_limit <= 0 or self.bg_limit <= 0 or self.imu_max_gap <= 0:
            raise ConfigError("bias limits and imu_max_gap must be positive")
        if not 0 < self.startup_min_duration <= self.startup_duration:
            raise ConfigError("need 0 < startup_min_duration <= startup_duration")
        if len(self.extrinsic_translation) != 3 or len(self.extrinsic_rotvec) != 3:
            raise ConfigError("extrinsics need three components")

    # key = value files -------------------------------------------------
    def items(self):
        """Flattened ``(dotted_key, value)`` pairs."""
        out = []
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if dataclasses.is_dataclass(val):
                out += [(f"{f.name}.{g.name}", getattr(val, g.name)) for g in dataclasses.fields(val)]
            else:
                out.append((f.name, val))
        return out

    def set(self, key: str, text: str) -> None:
        parts = key.strip().split(".")
        target = self
        for p in parts[:-1]:
            if not hasattr(target, p) or not dataclasses.is_dataclass(getattr(target, p)):
                raise ConfigError(f"unknown config key {key!r}")
            target = getattr(target, p)
        name = parts[-1]
        if not dataclasses.is_dataclass(target) or name not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        old = getattr(target, name)
        if dataclasses.is_dataclass(old):
            raise ConfigError(f"{key!r} is a section, not a value")
        setattr(target, name, _parse_like(old, text.strip(), key))

    @classmethod
    def from_text(cls, text: str, overrides=()) -> "OdometryConfig":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            k, v = line.split("=", 1)
            cfg.set(k, v)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r}: expected key=value")
            k, v = item.split("=", 1)
            cfg.set(k, v)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides=()) -> "OdometryConfig":
        return cls.from_text(Path(path).read_text(), overrides)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())


def _parse_like(old, text: str, key: str):
    try:
        if isinstance(old, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(old, int):
            return int(float(text)) if float(text).is_integer() else int(text)
        if isinstance(old, float):
            return float(text)
        if isinstance(old, tuple):
            vals = tuple(float(x) for x in text.replace(",", " ").split())
            if len(vals) != len(old):
                raise ValueError(text)
            return vals
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from None


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return " ".join(repr(float(x)) for x in v)
    return str(v)


@dataclass
class FrameResult:
    timestamp: float
    pose: SE3Pose
    velocity: np.ndarray
    prior: SE3Pose
    times: dict
    total_time: float
    input_points: int
    registration_points: int
    dropped: int
    out_of_map: int
    iterations: int
    insufficient_constraints: bool
    window_converged: bool
    bias_acc: np.ndarray
    bias_gyro: np.ndarray
    gravity: np.ndarray

    def record(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "translation": self.pose.translation.tolist(),
            "rotation": self.pose.rotation.tolist(),
            "velocity": np.asarray(self.velocity).tolist(),
            "times": self.times,
            "total_time": self.total_time,
            "input_points": self.input_points,
            "registration_points": self.registration_points,
            "dropped": self.dropped,
            "out_of_map": self.out_of_map,
            "iterations": self.iterations,
            "insufficient_constraints": self.insufficient_constraints,
            "window_converged": self.window_converged,
            "bias_acc": np.asarray(self.bias_acc).tolist(),
            "bias_gyro": np.asarray(self.bias_gyro).tolist(),
            "gravity": np.asarray(self.gravity).tolist(),
        }


class NotInitializedError(RuntimeError):
    pass


class Odometry:
    """Loosely coupled LiDAR-inertial odometry over a bump-image voxel map."""

    def __init__(self, config: OdometryConfig | None = None):
        self.config = config or OdometryConfig()
        self.config.validate()
        self.map = BievrMap(self.config.map)
        self.T_IL = self.config.T_IL
        self.imu = ImuData.empty()
        self.state: InertialState | None = None
        self.pose: SE3Pose | None = None
        self.t_last: float | None = None
        self.window: SlidingWindow | None = None
        self.rng = np.random.default_rng(self.config.sampling.seed)
        self.results: list[FrameResult] = []
        self.last_registration_input = None

    @property
    def initialized(self) -> bool:
        return self.state is not None

    def add_imu(self, imu: ImuData) -> None:
        if len(imu) == 0:
            return
        if len(self.imu):
            keep = imu.t > self.imu.t[-1]
            imu = ImuData(imu.t[keep], imu.gyro[keep], imu.acc[keep])
            if len(imu) == 0:
                return
        self.imu = self.imu.concat(imu) if len(self.imu) else imu

    def startup(self, imu: ImuData | None = None) -> None:
        if imu is not None:
            self.add_imu(imu)
        c = self.config
        pose, state, t_end = startup(self.imu, c.startup_duration, c.startup_min_duration, c.startup_max_gyro_std)
        self.pose, self.state, self.t_last = pose, state, t_end
        self.window = SlidingWindow(c.window_span, state, c.ba_limit, c.bg_limit)
        self.window.add(t_end, pose, state.v)

    def _trim_imu(self) -> None:
        # keep enough history to re-integrate every edge still in the window
        t0 = self.window.entries[0].t - 1.0
        if len(self.imu) and self.imu.t[0] < t0:
            k = max(int(np.searchsorted(self.imu.t, t0)) - 1, 0)
            self.imu = ImuData(self.imu.t[k:], self.imu.gyro[k:], self.imu.acc[k:])

    def process_frame(self, scan: Scan, imu: ImuData | None = None) -> FrameResult:
        """Advance the estimate by one scan; ``imu`` may carry new samples."""
        if not self.initialized:
            raise NotInitializedError("call startup() first")
        if scan is None or len(scan) == 0:
            raise ValueError("empty scan")
        if scan.stamp_end <= self.t_last:
            raise ValueError("scan ends before the current state")
        c = self.config
        times = {}
        t_start = time.perf_counter()
        if imu is not None:
            self.add_imu(imu)

        tic = time.perf_counter()
        st = self.state
        delta = preintegrate(self.imu, st.b_a, st.b_g, self.t_last, scan.stamp_end, max_gap=c.imu_max_gap, keep_nodes=True)
        prior = predict_pose(self.pose, st.v, delta, st.gravity)
        v_pred = predict_velocity(self.pose, st.v, delta, st.gravity)
        pts_imu, _ = undistort(scan, self.imu, st, self.T_IL, self.pose, self.t_last, delta=delta)
        times["undistortion"] = time.perf_counter() - tic

        tic = time.perf_counter()
        idx = informed_sample_indices(prior.apply(pts_imu), self.map, c.sampling, rng=self.rng)
        sample = pts_imu[idx]
        times["sampling"] = time.perf_counter() - tic

        tic = time.perf_counter()
        self.last_registration_input = (sample, prior)
        reg = register(self.map, sample, prior, c.registration)
        pose = reg.pose
        times["registration"] = time.perf_counter() - tic

        tic = time.perf_counter()
        self.window.add(scan.stamp_end, pose, v_pred, delta)
        converged = True
        if len(self.window) >= c.window_min_entries:
            res = optimize_window(self.window, max_iterations=c.window_max_iterations)
            converged = res.converged
        else:
            self.window.entries[-1].v = v_pred
        self.state = self.window.state()
        times["window"] = time.perf_counter() - tic

        tic = time.perf_counter()
        origin = pose.apply(self.T_IL.translation)
        self.map.integrate_scan(pose.apply(pts_imu), scan.ranges, sensor_origin=origin)
        times["map_update"] = time.perf_counter() - tic

        self.pose = pose
        self.t_last = scan.stamp_end
        self._trim_imu()
        total = time.perf_counter() - t_start
        result = FrameResult(
            timestamp=scan.stamp_end,
            pose=pose,
            velocity=self.state.v.copy(),
            prior=prior,
            times=times,
            total_time=total,
            input_points=len(scan),
            registration_points=len(sample),
            dropped=reg.dropped,
            out_of_map=reg.out_of_map,
            iterations=reg.iterations,
            insufficient_constraints=reg.insufficient_constraints,
            window_converged=converged,
            bias_acc=self.state.b_a.copy(),
            bias_gyro=self.state.b_g.copy(),
            gravity=self.state.gravity.copy(),
        )
        self.results.append(result)
        return result

    def run(self, scans, imu: ImuData, progress=None) -> list[FrameResult]:
        """Start up on ``imu`` and process every scan ending after startup."""
        self.add_imu(imu)
        if not self.initialized:
            self.startup()
        out = []
        for k, scan in enumerate(scans):
            if scan.stamp_end <= self.t_last or len(scan) == 0:
                continue
            out.append(self.process_frame(scan))
            if progress is not None:
                progress(k, out[-1])
        return out

    def trajectory(self):
        return [r.timestamp for r in self.results], [r.pose for r in self.results]

    def export_elevation(self, center, extent=(4.0, 4.0), cell_res: float = 0.05):
        return export_elevation(self.map, center, extent, cell_res)


def export_elevation(bmap, center, extent=(4.0, 4.0), cell_res: float = 0.05):
    """Max-height grid around ``center`` from observed map pixels.

    ``bmap`` is a ``BievrMap`` or ``MapSnapshot``. Returns
    ``(grid (rows, cols), origin_xy)`` with ``nan`` for unknown cells; row
    index follows y and column index follows x.
    """
    ex, ey = (float(extent), float(extent)) if np.isscalar(extent) else map(float, extent)
    cols = int(math.ceil(ex / cell_res - 1e-9))
    rows = int(math.ceil(ey / cell_res - 1e-9))
    origin = np.asarray(center, float)[:2] - 0.5 * np.array([ex, ey])
    grid = np.full(rows * cols, -np.inf)
    if isinstance(bmap, MapSnapshot):
        keys, R, t, dims, image, weight = bmap.keys, bmap.R_CG, bmap.t_CG, bmap.dims, bmap.image, bmap.weight
        sl = np.arange(len(keys))
    else:
        sl = bmap.alive_slots()
        sl = sl[bmap.has_frame[sl]]
        keys, R, t, dims, image, weight = bmap.keys, bmap.R_CG, bmap.t_CG, bmap.dims, bmap.image, bmap.weight
    if len(sl):
        vl = bmap.voxel_len
        ijk = morton.decode(keys[sl])
        lo = ijk[:, :2] * vl
        near = np.all(lo + vl > origin, axis=1) & np.all(lo < origin + [ex, ey], axis=1) & np.all(dims[sl] > 0, axis=1)
        sl = sl[near]
    if len(sl):
        res = bmap.pixel_res
        obs = weight[sl] > 0
        n_idx, j_idx, i_idx = np.nonzero(obs)
        s = sl[n_idx]
        pc = np.column_stack([(i_idx + 0.5) * res, (j_idx + 0.5) * res, image[s, j_idx, i_idx]])
        pw = np.einsum("nji,nj->ni", R[s], pc - t[s])
        cx = np.floor((pw[:, 0] - origin[0]) / cell_res).astype(np.int64)
        cy = np.floor((pw[:, 1] - origin[1]) / cell_res).astype(np.int64)
        ok = (cx >= 0) & (cx < cols) & (cy >= 0) & (cy < rows)
        np.maximum.at(grid, cy[ok] * cols + cx[ok], pw[ok, 2])
    grid[~np.isfinite(grid)] = np.nan
    return grid.reshape(rows, cols), origin

"""Ablation benchmark: one simulated drive, replayed under every map/sampling mode."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..pipeline import Odometry, OdometryConfig
from .metrics import Trajectory, ate_rmse, relative_error
from .simulator import LidarModel, SimResult, room_scene, room_trajectory, simulate, tunnel_scene, tunnel_trajectory

# mode name -> config overrides
MODES = {
    "plane-x-hr": {"registration.use_bump_heights": "false", "registration.use_image_gradient": "false", "sampling.mode": "HR"},
    "bievr-x-hr": {"registration.use_image_gradient": "false", "sampling.mode": "HR"},
    "bievr-v-hr": {"sampling.mode": "HR"},
    "bievr-v-rd": {"sampling.mode": "RD"},
    "bievr-v-id": {"sampling.mode": "ID"},
}


def _room_drive(seed: int = 0):
    return room_trajectory(
        duration=12.0,
        seed=seed,
        lidar=LidarModel(pattern="spinning", beams=24, azimuth_steps=900, fov_up=25.0, fov_down=-25.0, range_sigma=0.01),
        gyro_sigma=1e-3,
        acc_sigma=1e-2,
        gyro_bias=(0.002, -0.001, 0.001),
        acc_bias=(0.05, -0.03, 0.02),
    )


# scene name -> (scene factory, trajectory factory), both taking a seed
SCENARIOS = {
    "tunnel": (tunnel_scene, tunnel_trajectory),
    "room": (room_scene, _room_drive),
}


class BenchmarkError(ValueError):
    """Unknown scene or mode."""


def check_names(scene: str, modes) -> list:
    if scene not in SCENARIOS:
        raise BenchmarkError(f"unknown scene {scene!r}; choose from {', '.join(SCENARIOS)}")
    modes = list(MODES) if modes is None else list(modes)
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise BenchmarkError(f"unknown mode(s) {', '.join(bad)}; choose from {', '.join(MODES)}")
    return modes


def make_scenario(scene: str = "tunnel", seed: int = 0, n_scans: int | None = None) -> SimResult:
    check_names(scene, [])
    make_scene, make_traj = SCENARIOS[scene]
    return simulate(make_scene(seed=seed), make_traj(seed=seed), n_scans=n_scans)


@dataclass
class ModeReport:
    mode: str
    ate: float
    re: float  # percent, nan when the drive is shorter than one segment
    mean_points: float
    mean_frame_ms: float
    stage_ms: dict
    frames: int
    times: np.ndarray = field(repr=False)
    poses: list = field(repr=False)

    def record(self) -> dict:
        return {
            "mode": self.mode,
            "ate_m": self.ate,
            "re_percent": self.re,
            "mean_points": self.mean_points,
            "mean_frame_ms": self.mean_frame_ms,
            "stage_ms": self.stage_ms,
            "frames": self.frames,
        }


@dataclass
class BenchmarkReport:
    scene: str
    seed: int
    modes: list

    def __getitem__(self, mode: str) -> ModeReport:
        for m in self.modes:
            if m.mode == mode:
                return m
        raise KeyError(mode)

    def records(self) -> list:
        return [dict(scene=self.scene, seed=self.seed, **m.record()) for m in self.modes]

    def table(self) -> str:
        stages = sorted({k for m in self.modes for k in m.stage_ms})
        head = ["mode", "ATE [m]", "RE [%]", "points", "frame [ms]"] + [f"{s} [ms]" for s in stages]
        rows = [
            [m.mode, f"{m.ate:.4f}", f"{m.re:.3f}", f"{m.mean_points:.0f}", f"{m.mean_frame_ms:.1f}"]
            + [f"{m.stage_ms.get(s, 0.0):.1f}" for s in stages]
            for m in self.modes
        ]
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
        lines = [f"scene {self.scene}, seed {self.seed}", fmt(head), fmt(["-" * w for w in widths])]
        return "\n".join(lines + [fmt(r) for r in rows])


def run_mode(sim: SimResult, mode: str, config: OdometryConfig | None = None) -> ModeReport:
    """Run the pipeline over ``sim`` with the overrides of ``mode`` applied to ``config``."""
    check_names("tunnel", [mode])
    cfg = copy.deepcopy(config) if config is not None else OdometryConfig()
    for key, value in MODES[mode].items():
        cfg.set(key, value)
    odo = Odometry(cfg)
    results = odo.run(sim.scans, sim.imu)
    times, poses = odo.trajectory()
    est = Trajectory.from_poses(times, poses)
    gt = Trajectory.from_poses(sim.gt_times, sim.gt_poses)
    try:
        re = relative_error(est, gt, 10.0)
    except ValueError:
        re = float("nan")
    stages = sorted({k for r in results for k in r.times})
    return ModeReport(
        mode=mode,
        ate=ate_rmse(est, gt),
        re=re,
        mean_points=float(np.mean([r.registration_points for r in results])),
        mean_frame_ms=1000.0 * float(np.mean([r.total_time for r in results])),
        stage_ms={s: 1000.0 * float(np.mean([r.times.get(s, 0.0) for r in results])) for s in stages},
        frames=len(results),
        times=np.asarray(times),
        poses=poses,
    )


def run_benchmark(
    scene: str = "tunnel", modes=None, seed: int = 0, config: OdometryConfig | None = None, sim=None, progress=None, n_scans: int | None = None
) -> BenchmarkReport:
    """Simulate ``scene`` once and run each mode over the same data.

    Args:
        scene: key of ``SCENARIOS``.
        modes: subset of ``MODES`` (all when None).
        seed: scene and trajectory seed.
        config: base configuration; mode overrides are applied on a copy.
        sim: pre-simulated data to reuse instead of simulating.
        progress: optional callable receiving each finished ``ModeReport``.
        n_scans: truncate the drive to this many scans (whole drive when None).

    Raises:
        BenchmarkError: unknown scene or mode.
    """
    modes = check_names(scene, modes)
    sim = make_scenario(scene, seed, n_scans) if sim is None else sim
    out = []
    for m in modes:
        out.append(run_mode(sim, m, config))
        if progress is not None:
            progress(out[-1])
    return BenchmarkReport(scene, seed, out)

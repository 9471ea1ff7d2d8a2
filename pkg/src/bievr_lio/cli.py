"""Command-line entry point: ``bievr-lio <verb> ...``."""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .bievr_map import MapSnapshot
from .pipeline import ConfigError, Odometry, OdometryConfig, export_elevation
from .synth import benchmark
from .synth.metrics import ate_rmse, relative_error
from .synth.simulator import SCENES, livox_lidar, simulate, static_trajectory, tunnel_trajectory

TRAJECTORIES = {
    "straight": lambda seed: tunnel_trajectory(seed=seed),
    "room": lambda seed: benchmark.SCENARIOS["room"][1](seed=seed),
    "static": lambda seed: static_trajectory((0.0, 0.0, 0.0), duration=3.0, lidar=livox_lidar()),
    # looking straight down from beside the box corner, so two box faces are in view
    "hover": lambda seed: static_trajectory((-0.2, 0.9, 1.6), (0.0, math.pi / 2, 0.0), duration=3.0, lidar=livox_lidar()),
}
DEFAULT_TRAJ = {"tunnel": "straight", "room": "room", "box-on-plane": "hover", "bump-field": "hover"}


def _cmd_simulate(a) -> int:
    scene = SCENES[a.scene](seed=a.seed)
    traj = TRAJECTORIES[a.traj or DEFAULT_TRAJ[a.scene]](a.seed)
    sim = simulate(scene, traj, seed=a.seed, n_scans=a.scans)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_scans(out / "scans", sim.scans)
    io.write_imu(out / "imu.txt", sim.imu)
    io.write_tum(out / "groundtruth.tum", sim.gt_times, sim.gt_poses)
    print(f"wrote {len(sim.scans)} scans, {len(sim.imu.t)} IMU samples to {out}")
    return 0


def _cmd_run(a) -> int:
    cfg = OdometryConfig.load(a.config, a.set) if a.config else OdometryConfig.from_text("", a.set)
    odo = Odometry(cfg)
    imu = io.read_imu(a.imu)
    odo.add_imu(imu)
    odo.startup()
    traj_path = a.out or cfg.output_trajectory
    log_path = a.log or cfg.output_log
    rows, records = [], []
    for scan in io.iter_scans(a.scans):
        if scan.stamp_end <= odo.t_last or len(scan) == 0:
            continue
        r = odo.process_frame(scan)
        rows.append(io.format_tum_row(r.timestamp, r.pose))
        records.append(r.record())
        if not a.quiet:
            print(f"{r.timestamp:.3f}  points {r.registration_points:6d}  {1000 * r.total_time:6.1f} ms", file=sys.stderr)
    if traj_path:
        Path(traj_path).write_text("".join(x + "\n" for x in rows))
    else:
        sys.stdout.write("".join(x + "\n" for x in rows))
    if log_path:
        io.write_jsonl(log_path, records)
    if a.map:
        odo.map.snapshot().write(a.map)
    return 0


def _cmd_eval(a) -> int:
    est = io.read_tum(a.est)
    gt = io.read_tum(a.gt)
    out = {}
    for m in a.metrics.split(","):
        if m == "ate":
            out["ate_m"] = ate_rmse(est, gt, a.gate)
        elif m == "re":
            out["re_percent"] = relative_error(est, gt, a.segment, a.gate)
        else:
            raise ValueError(f"unknown metric {m!r}")
    print(json.dumps(out, sort_keys=True))
    return 0


def _cmd_bench(a) -> int:
    modes = a.modes.split(",") if a.modes else None
    benchmark.check_names(a.scene, modes)
    cfg = OdometryConfig.load(a.config) if a.config else None
    report = benchmark.run_benchmark(
        a.scene, modes, seed=a.seed, config=cfg, progress=lambda m: print(f"done {m.mode}", file=sys.stderr), n_scans=a.scans
    )
    print(report.table())
    if a.json:
        Path(a.json).write_text(json.dumps(report.records(), indent=1, sort_keys=True) + "\n")
    return 0


def _cmd_export(a) -> int:
    snap = MapSnapshot.read(a.map)
    grid, origin = export_elevation(snap, a.center, tuple(a.extent), a.res)
    io.write_elevation(a.out, grid, origin, a.res)
    known = np.isfinite(grid).mean() if grid.size else 0.0
    print(f"{grid.shape[1]}x{grid.shape[0]} cells, {100 * known:.1f}% known -> {a.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bievr-lio", description="LiDAR-inertial odometry on bump-image voxel maps.")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("simulate", help="render a synthetic drive to scan/IMU/ground-truth files")
    s.add_argument("--scene", choices=sorted(SCENES), default="tunnel")
    s.add_argument("--traj", choices=sorted(TRAJECTORIES), help="defaults to the scene's usual drive")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scans", type=int, help="number of scans (default: whole drive)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=_cmd_simulate)

    s = sub.add_parser("run", help="run odometry over recorded scans and IMU")
    s.add_argument("--config", help="key = value file")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
    s.add_argument("--scans", required=True, help="scan directory with manifest.txt")
    s.add_argument("--imu", required=True, help="IMU table")
    s.add_argument("--out", help="TUM trajectory (default: config output_trajectory, else stdout)")
    s.add_argument("--log", help="per-frame JSONL log")
    s.add_argument("--map", help="write a map snapshot at the end")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=_cmd_run)

    s = sub.add_parser("eval", help="ATE / RE of a TUM trajectory against ground truth")
    s.add_argument("--est", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--metrics", default="ate,re")
    s.add_argument("--segment", type=float, default=10.0, help="RE segment length [m]")
    s.add_argument("--gate", type=float, default=0.01, help="timestamp association gate [s]")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("bench", help="ablation table over map/sampling modes")
    s.add_argument("--scene", default="tunnel", help=f"one of {', '.join(benchmark.SCENARIOS)}")
    s.add_argument("--modes", help=f"comma list from {', '.join(benchmark.MODES)} (default: all)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="base config file")
    s.add_argument("--scans", type=int, help="truncate the drive to this many scans")
    s.add_argument("--json", help="also write the rows as JSON")
    s.set_defaults(func=_cmd_bench)

    s = sub.add_parser("export-elevation", help="max-height grid from a map snapshot")
    s.add_argument("--map", required=True, help="map snapshot file")
    s.add_argument("--center", type=float, nargs=2, required=True, metavar=("X", "Y"))
    s.add_argument("--extent", type=float, nargs=2, default=(4.0, 4.0), metavar=("W", "H"))
    s.add_argument("--res", type=float, default=0.05, help="cell size [m]")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    try:
        return a.func(a)
    except (benchmark.BenchmarkError, ConfigError) as e:
        parser.error(str(e))  # usage error, exit status 2
    except (OSError, ValueError) as e:
        print(f"bievr-lio: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

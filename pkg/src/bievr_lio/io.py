"""Plain-text and binary file formats.

IMU table
    One sample per line: ``t gx gy gz ax ay az`` (s, rad/s, m/s^2). Lines
    starting with ``#`` are ignored.
Scan directory
    ``manifest.txt`` lists ``index stamp_begin stamp_end count file`` per
    scan; each file is a flat little-endian float64 array of ``(t, x, y, z)``
    rows in the LiDAR frame.
Trajectory
    TUM: ``t tx ty tz qx qy qz qw`` with 9 significant digits.
Frame log
    One JSON object per line.
Elevation grid
    Header line ``origin_x origin_y cell_res cols rows`` followed by ``rows``
    lines of ``cols`` values each (row-major, increasing y then x); unknown
    cells are ``nan``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import ImuData, Scan, SE3Pose
from .synth.metrics import Trajectory

MANIFEST = "manifest.txt"


def write_imu(path, imu: ImuData) -> None:
    data = np.column_stack([imu.t, imu.gyro, imu.acc])
    np.savetxt(path, data, fmt="%.17g", header="t gx gy gz ax ay az")


def read_imu(path) -> ImuData:
    data = np.loadtxt(path, comments="#", ndmin=2)
    if data.shape[1] != 7:
        raise ValueError(f"{path}: expected 7 columns, got {data.shape[1]}")
    return ImuData(data[:, 0], data[:, 1:4], data[:, 4:7])


def write_scans(directory, scans) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["# index stamp_begin stamp_end count file"]
    for k, s in enumerate(scans):
        name = f"scan_{k:06d}.bin"
        np.column_stack([s.times, s.points]).astype("<f8").tofile(d / name)
        lines.append(f"{k} {s.stamp_begin:.17g} {s.stamp_end:.17g} {len(s)} {name}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")


def read_scan(path, stamp_begin=None, stamp_end=None) -> Scan:
    raw = np.fromfile(path, dtype="<f8")
    if raw.size % 4:
        raise ValueError(f"{path}: size is not a multiple of 4 doubles")
    rows = raw.reshape(-1, 4)
    return Scan(rows[:, 1:4], rows[:, 0], stamp_begin, stamp_end)


def iter_scans(directory):
    d = Path(directory)
    for line in (d / MANIFEST).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        _, b, e, count, name = line.split()
        if int(count) == 0:
            continue
        yield read_scan(d / name, float(b), float(e))


def read_scans(directory) -> list:
    return list(iter_scans(directory))


def format_tum_row(t: float, pose: SE3Pose) -> str:
    from scipy.spatial.transform import Rotation

    q = Rotation.from_matrix(pose.rotation).as_quat()
    vals = [t, *pose.translation, *q]
    return " ".join(f"{x:.9g}" for x in vals)


def write_tum(path, times, poses) -> None:
    Path(path).write_text("".join(format_tum_row(t, p) + "\n" for t, p in zip(times, poses)))


def read_tum(path) -> Trajectory:
    return Trajectory.from_tum(np.loadtxt(path, comments="#", ndmin=2))


def write_jsonl(path, records) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def write_elevation(path, grid: np.ndarray, origin, cell_res: float) -> None:
    rows, cols = grid.shape
    lines = [f"{origin[0]:.9g} {origin[1]:.9g} {cell_res:.9g} {cols} {rows}"]
    lines += [" ".join("nan" if not np.isfinite(x) else f"{x:.6f}" for x in row) for row in grid]
    Path(path).write_text("\n".join(lines) + "\n")


def read_elevation(path):
    lines = Path(path).read_text().splitlines()
    ox, oy, res, cols, rows = lines[0].split()
    grid = np.array([[float(x) for x in ln.split()] for ln in lines[1 : 1 + int(rows)]]).reshape(int(rows), int(cols))
    return grid, (float(ox), float(oy)), float(res)

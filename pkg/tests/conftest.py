import numpy as np
import pytest

from bievr_lio.bievr_map import Voxel, image_mid


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0, max_angle)


def ramp_voxel(a=0.003, b=-0.002, c=0.01, mask=None, pixel_res=0.05):
    """Axis-aligned voxel whose display image is the ramp ``a u + b v + c``.

    ``u``/``v`` are continuous pixel coordinates (centres at ``i + 0.5``); no
    smoothing is applied, so the image is exactly linear over the mask.
    """
    v = Voxel(key=(0, 0, 0), pixel_res=pixel_res)
    v.has_frame = True
    v.image_w = v.image_h = 10
    v.n = 10
    v.s = np.array([0.25, 0.25, 0.0]) * 10
    jj, ii = np.mgrid[0 : v.side, 0 : v.side]
    img = a * (ii + 0.5) + b * (jj + 0.5) + c
    inside = (ii < 10) & (jj < 10)
    obs = inside if mask is None else inside & mask
    v.weight = np.where(obs, 0.5, 0.0)
    v.image = np.where(obs, img, 0.0)
    v.image_raw = v.image.copy()
    v.mid = float(image_mid(v.image, v.weight))
    return v


def random_voxel_case(rng, observed=0.85):
    """Random framed voxel, IMU pose, twist and a point with a defined residual.

    The image holds random heights on a random mask; the point is placed at
    least 0.02 px away from the pixel-centre lines where the bilinear
    interpolant has kinks, so central differences stay on one smooth piece.
    """
    from bievr_lio.bievr_map import init_image_frame, _set_frame
    from bievr_lio.geometry import SE3Pose, exp_se3, so3_exp

    key = tuple(int(k) for k in rng.integers(-40, 40, 3))
    v = Voxel(key=key)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    v.s = v.corner_min + rng.uniform(0.1, 0.4, 3)
    v.n = 1
    w, h, T = init_image_frame(v, n)
    _set_frame(v, n, T, w, h)
    jj, ii = np.mgrid[0 : v.side, 0 : v.side]
    inside = (ii < w) & (jj < h)
    mask = inside & (rng.uniform(size=inside.shape) < observed)
    v.weight = np.where(mask, rng.uniform(0.1, 0.5, mask.shape), 0.0)
    v.image = np.where(mask, rng.normal(0, 0.02, mask.shape), 0.0)
    v.image_raw = v.image.copy()
    v.mid = float(image_mid(v.image, v.weight))
    T_GI = SE3Pose(so3_exp(random_rotation(rng)), v.corner_min + rng.normal(0, 3, 3))
    xi = np.concatenate([rng.normal(0, 0.01, 3), rng.normal(0, 0.01, 3)])
    while True:
        uv = rng.uniform(0.5, [w - 0.5, h - 0.5])
        frac = (uv - 0.5) % 1.0
        i0, j0 = np.floor(uv - 0.5).astype(int)
        corners = mask[[j0, j0, j0 + 1, j0 + 1], [i0, i0 + 1, i0, i0 + 1]]
        if np.all((frac > 0.02) & (frac < 0.98)) and corners.any():
            break
    pc = np.array([uv[0] * v.pixel_res, uv[1] * v.pixel_res, rng.normal(0, 0.05)])
    p_world = v.T_CG.inverse().apply(pc)
    p_imu = (T_GI @ exp_se3(xi)).inverse().apply(p_world)
    return v, T_GI, xi, p_imu


def twist_matrix_exp(xi):
    """SE(3) exponential through the 4x4 matrix exponential (independent of geometry)."""
    from scipy.linalg import expm

    rho, phi = np.asarray(xi[:3]), np.asarray(xi[3:])
    A = np.zeros((4, 4))
    A[:3, :3] = [[0, -phi[2], phi[1]], [phi[2], 0, -phi[0]], [-phi[1], phi[0], 0]]
    A[:3, 3] = rho
    return expm(A)


def static_scans(scene, positions, yaws, lidar, seed=0):
    """One scan per (position, yaw) from a body at rest; returns (pose, scan) pairs."""
    from bievr_lio.synth.simulator import Trajectory, simulate_scan, static_trajectory

    rng = np.random.default_rng(seed)
    out = []
    for p, yaw in zip(positions, yaws):
        tr = Trajectory(static_trajectory(p, (0.0, 0.0, yaw), duration=0.5, lidar=lidar, t_move=0.0))
        out.append((tr.pose(0.1), simulate_scan(scene, tr, 0.0, rng)))
    return out


def map_from_scans(pairs, **map_kw):
    from bievr_lio.bievr_map import BievrMap

    m = BievrMap(**map_kw)
    for T, s in pairs:
        m.integrate_scan(T.apply(s.points), s.ranges, T.translation)
    return m


ROOM_VIEWS = (
    [(0, 0, 1.2), (1, 0.5, 1.3), (-1, -0.5, 1.1), (0.5, -1, 1.4), (0, 0.8, 1.2), (-0.6, 0.3, 1.5)],
    [0.0, 0.5, -0.4, 1.0, 2.0, -1.5],
)


def room_lidar(range_sigma=0.01):
    from bievr_lio.synth.simulator import LidarModel

    return LidarModel(pattern="spinning", beams=32, azimuth_steps=900, fov_up=30.0, fov_down=-30.0, range_sigma=range_sigma)


@pytest.fixture(scope="session")
def room_map():
    from bievr_lio.synth.simulator import room_scene

    return map_from_scans(static_scans(room_scene(), *ROOM_VIEWS, room_lidar()))

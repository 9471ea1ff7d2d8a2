"""
Bump images on a wavy floor
===========================

A voxel keeps a plane fit (centroid, covariance, normal) plus a small height
image in the plane's frame. On a flat patch the image is zero; on a bumpy
patch it records the bumps, and its mean absolute height (MID) says how much
texture the voxel carries.
"""
import numpy as np

from bievr_lio.bievr_map import BievrMap

rng = np.random.default_rng(0)

# two floor patches at mid-voxel height (voxels are 0.5 m cubes), one flat
# and one with a 2 cm cosine swell, one period across the voxel
Z = 0.25
xy = rng.uniform(0.0, 0.5, (4000, 2))
flat = np.column_stack([xy, np.full(len(xy), Z)])
bumpy = np.column_stack([xy + [1.0, 0.0], Z + 0.02 * np.cos(2 * np.pi * xy[:, 0] / 0.5)])

m = BievrMap()
pts = np.vstack([flat, bumpy])
m.integrate_scan(pts, np.full(len(pts), 3.0), sensor_origin=(0.5, 0.25, 2.0))

for name, p in [("flat", (0.25, 0.25, Z)), ("bumpy", (1.25, 0.25, Z))]:
    sl = m.slots_for_points(np.array([p]))[0]
    print(f"{name:5s} voxel: normal {np.round(m.normal[sl], 3)}, MID {1e3 * m.mid[sl]:.2f} mm, "
          f"{int((m.weight[sl] > 0).sum())} observed pixels")

# the display image is the running mean per 5 cm pixel after a light
# Gaussian blur, so the swell comes back slightly flattened
q = np.column_stack([np.linspace(1.05, 1.45, 9), np.full(9, 0.25), np.full(9, Z)])
_, h, ok = m.query(q)
print("bumpy heights along x [mm]:", np.round(1e3 * h, 1))
print("analytic                   :", np.round(1e3 * 0.02 * np.cos(2 * np.pi * (q[:, 0] - 1.0) / 0.5), 1))
print(f"analytic MID {1e3 * 0.02 * 2 / np.pi:.2f} mm")

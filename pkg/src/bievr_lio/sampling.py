"""Map-informed dual-resolution point selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import morton
from .bievr_map import BievrMap

MODES = ("ID", "HR", "RD")


@dataclass
class SamplingConfig:
    fine_res: float = 0.1
    coarse_res: float = 0.5
    top_k_voxels: int = 300
    mode: str = "ID"
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.fine_res < self.coarse_res:
            raise ValueError("need 0 < fine_res < coarse_res")
        if self.top_k_voxels < 0:
            raise ValueError("top_k_voxels must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


def grid_downsample_indices(points, res: float) -> np.ndarray:
    """Indices of one representative point per ``res`` cell.

    The representative is the point closest to its cell centre (ties go to the
    lower index); output is ordered by ascending cell Morton code.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    if res <= 0:
        raise ValueError("res must be positive")
    cells = morton.grid_coords(pts, res)
    codes = morton.encode(cells)
    d2 = np.sum((pts - (cells + 0.5) * res) ** 2, axis=1)
    order = np.lexsort((np.arange(len(pts)), d2, codes))
    first = np.ones(len(order), dtype=bool)
    first[1:] = codes[order[1:]] != codes[order[:-1]]
    return order[first]


def grid_downsample(points, res: float) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return pts[grid_downsample_indices(pts, res)]


def informed_sample_indices(scan_world, bmap: BievrMap | None, cfg: SamplingConfig, rng=None) -> np.ndarray:
    """Indices (ascending) of the points kept for registration.

    ``scan_world`` must already be in the world frame (prior pose applied).
    RD mode draws its high-resolution voxels from ``rng`` (a fresh generator
    seeded with ``cfg.seed`` when omitted).
    """
    cfg.validate()
    pts = np.asarray(scan_world, dtype=float).reshape(-1, 3)
    fine = grid_downsample_indices(pts, cfg.fine_res)
    if cfg.mode == "HR":
        return np.sort(fine)
    fine_pts = pts[fine]
    keep_fine = np.zeros(len(fine), dtype=bool)
    if bmap is not None and len(bmap) and cfg.top_k_voxels > 0 and len(fine):
        keys = morton.keys_of(fine_pts, bmap.voxel_len)
        slots = bmap.lookup(keys)
        present = slots >= 0
        cand_keys = np.unique(keys[present])
        if len(cand_keys):
            if cfg.mode == "ID":
                mids = bmap.mid_of_keys(cand_keys)
                order = np.lexsort((cand_keys, -mids))
                chosen = cand_keys[order[: cfg.top_k_voxels]]
            else:
                gen = np.random.default_rng(cfg.seed) if rng is None else rng
                k = min(cfg.top_k_voxels, len(cand_keys))
                chosen = np.sort(gen.choice(cand_keys, size=k, replace=False))
            keep_fine = np.isin(keys, chosen) & present
    rest = fine[~keep_fine]
    coarse = rest[grid_downsample_indices(pts[rest], cfg.coarse_res)]
    return np.sort(np.concatenate([fine[keep_fine], coarse]))


def informed_sample(scan_world, bmap: BievrMap | None, cfg: SamplingConfig, rng=None) -> np.ndarray:
    pts = np.asarray(scan_world, dtype=float).reshape(-1, 3)
    return pts[informed_sample_indices(pts, bmap, cfg, rng)]

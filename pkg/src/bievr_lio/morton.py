"""63-bit Morton codes for signed 3D grid coordinates (21 bits per axis)."""
from __future__ import annotations

import numpy as np

BITS = 21
OFFSET = 1 << (BITS - 1)
COORD_MIN = -OFFSET
COORD_MAX = OFFSET - 1

_M = np.uint64


class MortonRangeError(ValueError):
    """Grid coordinate cannot be packed into 21 bits."""


def _spread(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64) & _M(0x1FFFFF)
    x = (x | (x << _M(32))) & _M(0x1F00000000FFFF)
    x = (x | (x << _M(16))) & _M(0x1F0000FF0000FF)
    x = (x | (x << _M(8))) & _M(0x100F00F00F00F00F)
    x = (x | (x << _M(4))) & _M(0x10C30C30C30C30C3)
    x = (x | (x << _M(2))) & _M(0x1249249249249249)
    return x


def _compact(x: np.ndarray) -> np.ndarray:
    x = x & _M(0x1249249249249249)
    x = (x ^ (x >> _M(2))) & _M(0x10C30C30C30C30C3)
    x = (x ^ (x >> _M(4))) & _M(0x100F00F00F00F00F)
    x = (x ^ (x >> _M(8))) & _M(0x1F0000FF0000FF)
    x = (x ^ (x >> _M(16))) & _M(0x1F00000000FFFF)
    x = (x ^ (x >> _M(32))) & _M(0x1FFFFF)
    return x


def encode(ijk) -> np.ndarray:
    """Pack integer coordinates (..., 3) into uint64 codes (...)."""
    ijk = np.asarray(ijk, dtype=np.int64)
    if ijk.size and (ijk.min() < COORD_MIN or ijk.max() > COORD_MAX):
        raise MortonRangeError(f"grid coordinate outside [{COORD_MIN}, {COORD_MAX}]")
    u = (ijk + OFFSET).astype(np.uint64)
    return _spread(u[..., 0]) | (_spread(u[..., 1]) << _M(1)) | (_spread(u[..., 2]) << _M(2))


def decode(code) -> np.ndarray:
    code = np.asarray(code, dtype=np.uint64)
    cols = [_compact(code >> _M(s)).astype(np.int64) - OFFSET for s in range(3)]
    return np.stack(cols, axis=-1)


def grid_coords(points, cell: float) -> np.ndarray:
    """floor(p / cell) as int64; points on a boundary go to the upper cell."""
    p = np.asarray(points, dtype=float)
    if not np.all(np.isfinite(p)):
        raise MortonRangeError("non-finite coordinate")
    g = np.floor(p / cell)
    if g.size and (g.min() < COORD_MIN or g.max() > COORD_MAX):
        raise MortonRangeError("point outside the Morton-encodable range")
    return g.astype(np.int64)


def keys_of(points, cell: float) -> np.ndarray:
    return encode(grid_coords(points, cell))

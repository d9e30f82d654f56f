"""ROI box, rays, point clouds and voxel grids in the ego frame.

Binary formats (all little-endian):

``LPCD``  magic | u32 version | 3 x f32 sensor origin | u64 count | count x 3 x f32 points
``VOXG``  magic | u32 version | 6 x f32 roi (min, max) | 3 x f32 voxel size | 3 x u32 dims |
          packed occupancy bits | u8 flag (1 = visibility follows) | packed visibility bits

Bit packing is C-order over (x, y, z) with numpy's big-endian bit order per byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateRayError, FormatError, OutOfRoiError

FORMAT_VERSION = 1
ROI_TOL = 1e-9


@dataclass(frozen=True)
class RoiBox:
    min: tuple
    max: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min)
        hi = tuple(float(v) for v in self.max)
        if len(lo) != 3 or len(hi) != 3:
            raise ContractError("RoiBox corners must be 3-vectors")
        if not all(a < b for a, b in zip(lo, hi)):
            raise ContractError(f"RoiBox min {lo} must be < max {hi} componentwise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.min)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.max)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, points, tol: float = ROI_TOL) -> np.ndarray:
        """Inclusive containment test for ``(N, 3)`` points."""
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=-1)

    def to_list(self) -> list:
        return [list(self.min), list(self.max)]

    @classmethod
    def from_list(cls, value) -> "RoiBox":
        return cls(tuple(value[0]), tuple(value[1]))


PAPER_ROI = RoiBox((-40.0, -40.0, -1.0), (40.0, 40.0, 5.4))
# same height band, smaller footprint so a 64 x 64 BEV grid resolves 0.5 m
DESK_ROI = RoiBox((-16.0, -16.0, -1.0), (16.0, 16.0, 5.4))


@dataclass(frozen=True)
class Ray:
    origin: tuple
    direction: tuple
    hit_distance: Optional[float] = None

    def __post_init__(self):
        o = tuple(float(v) for v in self.origin)
        d = np.asarray(self.direction, dtype=np.float64)
        n = float(np.linalg.norm(d))
        if len(o) != 3 or d.shape != (3,):
            raise ContractError("ray origin and direction must be 3-vectors")
        if abs(n - 1.0) > 1e-9:
            raise ContractError(f"ray direction must be unit length, |d| = {n}")
        if self.hit_distance is not None and not self.hit_distance > 0:
            raise ContractError(f"hit distance must be positive, got {self.hit_distance}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", tuple(float(v) for v in d))

    def at(self, t) -> np.ndarray:
        return np.asarray(self.origin) + np.multiply.outer(t, self.direction)


@dataclass
class RayBatch:
    """Structure-of-arrays view over many rays; indexing yields :class:`Ray`.

    ``hit_distance`` uses NaN for non-returning rays.
    """

    origins: np.ndarray
    directions: np.ndarray
    hit_distance: np.ndarray = None

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        if len(self.origins) == 1 and len(self.directions) > 1:
            self.origins = np.repeat(self.origins, len(self.directions), axis=0)
        if self.hit_distance is None:
            self.hit_distance = np.full(len(self.directions), np.nan)
        self.hit_distance = np.asarray(self.hit_distance, dtype=np.float64).reshape(-1)
        if not (len(self.origins) == len(self.directions) == len(self.hit_distance)):
            raise ContractError("ray batch arrays must have matching lengths")

    def __len__(self) -> int:
        return len(self.directions)

    def __getitem__(self, i) -> Ray:
        d = self.hit_distance[i]
        return Ray(tuple(self.origins[i]), tuple(self.directions[i]),
                   None if np.isnan(d) else float(d))

    def __iter__(self) -> Iterator[Ray]:
        for i in range(len(self)):
            yield self[i]

    @property
    def has_hit(self) -> np.ndarray:
        return np.isfinite(self.hit_distance)

    def subset(self, index) -> "RayBatch":
        return RayBatch(self.origins[index], self.directions[index], self.hit_distance[index])

    def points(self, t=None) -> np.ndarray:
        t = self.hit_distance if t is None else np.asarray(t, dtype=np.float64)
        return self.origins + t[:, None] * self.directions

    @classmethod
    def from_rays(cls, rays: Sequence[Ray]) -> "RayBatch":
        if isinstance(rays, RayBatch):
            return rays
        rays = list(rays)
        if not rays:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
        return cls(np.array([r.origin for r in rays]), np.array([r.direction for r in rays]),
                   np.array([np.nan if r.hit_distance is None else r.hit_distance for r in rays]))


@dataclass
class PointCloud:
    points: np.ndarray
    sensor_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.sensor_origin = np.asarray(self.sensor_origin, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.sensor_origin))):
            raise ContractError("point cloud coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)


def rays_from_cloud(cloud: PointCloud) -> RayBatch:
    """One ray per point from the sensor origin, with the point distance as hit."""
    if len(cloud) == 0:
        raise ContractError("rays_from_cloud needs at least one point")
    vec = cloud.points - cloud.sensor_origin
    dist = np.linalg.norm(vec, axis=1)
    bad = np.flatnonzero(dist == 0.0)
    if bad.size:
        raise DegenerateRayError(bad.tolist())
    return RayBatch(np.broadcast_to(cloud.sensor_origin, vec.shape).copy(), vec / dist[:, None],
                    dist)


def normalize_point(p, roi: RoiBox, tol: float = ROI_TOL) -> np.ndarray:
    """Affine map of the ROI onto [-1, 1]^3 (works on ``(..., 3)`` arrays).

    Points within ``tol`` outside the box are clamped onto it; anything
    further out raises :class:`OutOfRoiError`.
    """
    p = np.asarray(p, dtype=np.float64)
    inside = roi.contains(p, tol)
    if not np.all(inside):
        bad = np.flatnonzero(~np.atleast_1d(inside))
        raise OutOfRoiError(f"{bad.size} point(s) outside ROI, first index {bad[0]}")
    q = 2.0 * (p - roi.lo) / roi.extent - 1.0
    return np.clip(q, -1.0, 1.0)


def denormalize_point(q, roi: RoiBox) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return roi.lo + (q + 1.0) * 0.5 * roi.extent


def clip_rays_to_roi(origins, directions, roi: RoiBox):
    """Vectorized slab test. Returns ``(t_enter, t_exit, hit)`` with t_enter >= 0."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    lo, hi = roi.lo, roi.hi
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    par = d == 0.0
    inside_slab = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside_slab, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside_slab, np.inf, -np.inf), tmax)
    t_enter = np.maximum(tmin.max(axis=1), 0.0)
    t_exit = tmax.min(axis=1)
    hit = t_exit >= t_enter
    return t_enter, t_exit, hit


def clip_ray_to_roi(ray: Ray, roi: RoiBox):
    """``(t_enter, t_exit)`` of the ray inside the box, or None when it misses."""
    te, tx, hit = clip_rays_to_roi(ray.origin, ray.direction, roi)
    return (float(te[0]), float(tx[0])) if hit[0] else None


# -- voxel grids -------------------------------------------------------------

def grid_dims(roi: RoiBox, voxel_size) -> tuple:
    vs = np.broadcast_to(np.asarray(voxel_size, dtype=np.float64), (3,))
    if np.any(vs <= 0):
        raise ContractError("voxel size must be positive")
    return tuple(int(v) for v in np.round(roi.extent / vs))


@dataclass
class VoxelGrid:
    roi: RoiBox
    voxel_size: np.ndarray
    occupancy: np.ndarray
    visibility: Optional[np.ndarray] = None

    def __post_init__(self):
        self.voxel_size = np.broadcast_to(np.asarray(self.voxel_size, dtype=np.float64),
                                          (3,)).copy()
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        dims = grid_dims(self.roi, self.voxel_size)
        if self.occupancy.shape != dims:
            raise ContractError(f"occupancy shape {self.occupancy.shape} != dims {dims}")
        if self.visibility is not None:
            self.visibility = np.asarray(self.visibility, dtype=bool)
            if self.visibility.shape != dims:
                raise ContractError("visibility mask must match occupancy dims")

    @property
    def dims(self) -> tuple:
        return self.occupancy.shape

    def voxel_centers(self) -> np.ndarray:
        """``(X, Y, Z, 3)`` array of voxel center coordinates."""
        axes = [self.roi.min[i] + (np.arange(n) + 0.5) * self.voxel_size[i]
                for i, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def voxel_centers(roi: RoiBox, voxel_size) -> np.ndarray:
    dims = grid_dims(roi, voxel_size)
    return VoxelGrid(roi, voxel_size, np.zeros(dims, bool)).voxel_centers()


# -- binary IO -----------------------------------------------------------------

def _check_magic(buf: bytes, magic: bytes):
    if len(buf) < 8 or buf[:4] != magic:
        raise FormatError(f"not a {magic.decode()} file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {version}")


def encode_lpcd(cloud: PointCloud) -> bytes:
    head = b"LPCD" + struct.pack("<I3fQ", FORMAT_VERSION, *cloud.sensor_origin, len(cloud))
    return head + cloud.points.astype("<f4").tobytes()


def decode_lpcd(buf: bytes) -> PointCloud:
    _check_magic(buf, b"LPCD")
    ox, oy, oz, n = struct.unpack_from("<3fQ", buf, 8)
    off = 8 + 12 + 8
    if len(buf) != off + n * 12:
        raise FormatError(f"LPCD payload size mismatch for {n} points")
    pts = np.frombuffer(buf, dtype="<f4", count=n * 3, offset=off).reshape(n, 3)
    return PointCloud(pts.astype(np.float64), np.array([ox, oy, oz]))


def encode_voxg(grid: VoxelGrid) -> bytes:
    out = [b"VOXG", struct.pack("<I", FORMAT_VERSION),
           struct.pack("<6f", *grid.roi.min, *grid.roi.max),
           struct.pack("<3f", *grid.voxel_size),
           struct.pack("<3I", *grid.dims),
           np.packbits(grid.occupancy.reshape(-1)).tobytes()]
    if grid.visibility is None:
        out.append(b"\x00")
    else:
        out.append(b"\x01")
        out.append(np.packbits(grid.visibility.reshape(-1)).tobytes())
    return b"".join(out)


def decode_voxg(buf: bytes) -> VoxelGrid:
    _check_magic(buf, b"VOXG")
    vals = struct.unpack_from("<6f3f3I", buf, 8)
    lo, hi, vs, dims = vals[0:3], vals[3:6], np.array(vals[6:9]), tuple(vals[9:12])
    off = 8 + 24 + 12 + 12
    n = int(np.prod(dims))
    nbytes = (n + 7) // 8
    if len(buf) < off + nbytes + 1:
        raise FormatError("VOXG truncated")
    occ = np.unpackbits(np.frombuffer(buf, np.uint8, nbytes, off), count=n).astype(bool)
    off += nbytes
    flag = buf[off]
    off += 1
    vis = None
    if flag == 1:
        if len(buf) != off + nbytes:
            raise FormatError("VOXG visibility payload size mismatch")
        vis = np.unpackbits(np.frombuffer(buf, np.uint8, nbytes, off), count=n)
        vis = vis.astype(bool).reshape(dims)
    elif flag != 0 or len(buf) != off:
        raise FormatError("VOXG trailing bytes or bad flag")
    roi = RoiBox(lo, hi)
    # f32 storage perturbs extents; keep the stored dims authoritative
    grid = VoxelGrid.__new__(VoxelGrid)
    grid.roi, grid.voxel_size = roi, vs
    grid.occupancy, grid.visibility = occ.reshape(dims), vis
    return grid


def save_lpcd(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(encode_lpcd(cloud))


def load_lpcd(path) -> PointCloud:
    return decode_lpcd(Path(path).read_bytes())


def save_voxg(path, grid: VoxelGrid) -> None:
    Path(path).write_bytes(encode_voxg(grid))


def load_voxg(path) -> VoxelGrid:
    return decode_voxg(Path(path).read_bytes())

"""Turn an occupancy field into ray depths, point clouds and voxel grids.

A *field* is any callable mapping ``(N, 3)`` points (m, ego frame) to ``(N,)``
occupancy probabilities: a frozen network handle, or ``oracle_field(scene)``.

Ray rendering marches samples ``t_i = t_enter + i * step`` up to
``min(t_exit, max_range)`` and accumulates

    T_i = prod_{j<i} (1 - o_j),   w_i = o_i T_i,   depth = sum_i t_i w_i

without normalizing by the total weight ``sum_i w_i``. Marching stops early
once every ray in a batch has ``T <= TRANSMITTANCE_EPS``; the dropped tail
changes depth by at most ``TRANSMITTANCE_EPS * max_range``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import ConfigError
from .geometry import DESK_ROI, PointCloud, Ray, RayBatch, RoiBox, VoxelGrid, clip_rays_to_roi
from .geometry import grid_dims

Field = Callable[[np.ndarray], np.ndarray]

TRANSMITTANCE_EPS = 1e-10
WEIGHT_FLOOR = 0.5
_WINDOW = 32
_CHUNK_POINTS = 1 << 16


@dataclass(frozen=True)
class RayRenderConfig:
    step: float = 0.05
    max_range: float = 60.0

    def __post_init__(self):
        if not self.step > 0:
            raise ConfigError(f"step must be positive, got {self.step}")
        if not self.max_range > 0:
            raise ConfigError(f"max_range must be positive, got {self.max_range}")


@dataclass(frozen=True)
class VoxelRenderConfig:
    samples: int = 8
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ConfigError(f"samples must be >= 1, got {self.samples}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")


class RayDepth(NamedTuple):
    depth: float
    weight: float
    intersects: bool


class DepthBatch(NamedTuple):
    depth: np.ndarray
    weight: np.ndarray
    intersects: np.ndarray


def oracle_field(scene) -> Field:
    """The scene's analytic indicator: 1 inside solids, 0 elsewhere."""
    return lambda points: scene.occupied(points).astype(np.float64)


def _eval(field: Field, points: np.ndarray) -> np.ndarray:
    out = np.empty(len(points))
    for s in range(0, len(points), _CHUNK_POINTS):
        out[s:s + _CHUNK_POINTS] = field(points[s:s + _CHUNK_POINTS])
    return out


def composite(occupancy, t):
    """Depth, total weight and per-sample weights/transmittance for ``(..., S)`` samples."""
    o = np.asarray(occupancy, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    trans = np.cumprod(np.concatenate([np.ones(o.shape[:-1] + (1,)), 1.0 - o[..., :-1]],
                                      axis=-1), axis=-1)
    w = o * trans
    return (w * t).sum(axis=-1), w.sum(axis=-1), w, trans


def _span(origins, directions, cfg: RayRenderConfig, roi: RoiBox):
    te, tx, hit = clip_rays_to_roi(origins, directions, roi)
    end = np.minimum(tx, cfg.max_range)
    ok = hit & (end >= te)
    count = np.where(ok, np.floor((end - te) / cfg.step + 1e-9).astype(np.int64) + 1, 0)
    return te, count, ok


def render_depths(field: Field, rays: RayBatch, cfg: RayRenderConfig = RayRenderConfig(),
                  roi: RoiBox = DESK_ROI) -> DepthBatch:
    """Vectorized ray rendering; rays missing the ROI get depth 0, weight 0."""
    o, d = rays.origins, rays.directions
    n = len(o)
    te, count, ok = _span(o, d, cfg, roi)
    depth = np.zeros(n)
    weight = np.zeros(n)
    trans = np.ones(n)
    active = np.flatnonzero(ok)
    k = 0
    while active.size:
        idx = np.arange(k, k + _WINDOW)
        valid = idx[None, :] < count[active, None]
        t = te[active, None] + idx[None, :] * cfg.step
        r, c = np.nonzero(valid)
        pts = o[active[r]] + t[r, c, None] * d[active[r]]
        occ = np.zeros(valid.shape)
        occ[r, c] = _eval(field, pts)
        part_d, part_w, _, part_t = composite(occ, t)
        depth[active] += trans[active] * part_d
        weight[active] += trans[active] * part_w
        trans[active] *= part_t[:, -1] * (1.0 - occ[:, -1])
        k += _WINDOW
        keep = (count[active] > k) & (trans[active] > TRANSMITTANCE_EPS)
        active = active[keep]
    return DepthBatch(depth, weight, ok)


def render_ray_depth(field: Field, ray: Ray, cfg: RayRenderConfig = RayRenderConfig(),
                     roi: RoiBox = DESK_ROI) -> RayDepth:
    res = render_depths(field, RayBatch.from_rays([ray]), cfg, roi)
    return RayDepth(float(res.depth[0]), float(res.weight[0]), bool(res.intersects[0]))


def ray_samples(field: Field, ray: Ray, cfg: RayRenderConfig = RayRenderConfig(),
                roi: RoiBox = DESK_ROI) -> dict:
    """Every sample of one ray: ``t``, occupancy, transmittance and weight."""
    o = np.asarray(ray.origin, dtype=np.float64)[None]
    d = np.asarray(ray.direction, dtype=np.float64)[None]
    te, count, _ = _span(o, d, cfg, roi)
    t = te[0] + np.arange(count[0]) * cfg.step
    occ = _eval(field, o + t[:, None] * d)
    _, _, w, trans = composite(occ, t)
    return {"t": t, "occupancy": occ, "transmittance": trans, "weight": w}


def dump_ray_samples(path, field: Field, ray: Ray, cfg: RayRenderConfig = RayRenderConfig(),
                     roi: RoiBox = DESK_ROI) -> None:
    s = ray_samples(field, ray, cfg, roi)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "occupancy", "transmittance", "weight"])
        for row in zip(s["t"], s["occupancy"], s["transmittance"], s["weight"]):
            w.writerow([repr(float(v)) for v in row])


class RenderedCloud(NamedTuple):
    cloud: PointCloud
    kept: np.ndarray
    dropped: int
    depths: DepthBatch


def render_point_cloud(field: Field, rays: RayBatch, cfg: RayRenderConfig = RayRenderConfig(),
                       roi: RoiBox = DESK_ROI, weight_floor: float = WEIGHT_FLOOR) -> RenderedCloud:
    """One point per ray whose total weight exceeds ``weight_floor``."""
    if len(rays) == 0:
        empty = DepthBatch(np.zeros(0), np.zeros(0), np.zeros(0, bool))
        return RenderedCloud(PointCloud(np.zeros((0, 3))), np.zeros(0, bool), 0, empty)
    res = render_depths(field, rays, cfg, roi)
    kept = res.weight > weight_floor
    pts = rays.origins[kept] + res.depth[kept, None] * rays.directions[kept]
    cloud = PointCloud(pts, rays.origins[0])
    return RenderedCloud(cloud, kept, int((~kept).sum()), res)


def _voxel_offsets(seed: int, chunk_id: int, n: int, m: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, chunk_id]))
    return rng.random((n, m, 3))


def voxel_scores(field: Field, roi: RoiBox, voxel_size,
                 cfg: VoxelRenderConfig = VoxelRenderConfig(),
                 mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-voxel max of the field over ``cfg.samples`` uniform interior points.

    Sample positions depend only on ``cfg.seed`` and the voxel index, so a
    ``mask`` (voxels to evaluate; others score 0) never changes a score.
    """
    dims = grid_dims(roi, voxel_size)
    vs = np.broadcast_to(np.asarray(voxel_size, dtype=np.float64), (3,))
    total = int(np.prod(dims))
    flat_mask = None if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    scores = np.zeros(total)
    m = cfg.samples
    per_chunk = max(1, _CHUNK_POINTS // m)
    for cid, start in enumerate(range(0, total, per_chunk)):
        stop = min(start + per_chunk, total)
        ids = np.arange(start, stop)
        if flat_mask is not None:
            sel = flat_mask[start:stop]
            if not sel.any():
                continue
        else:
            sel = np.ones(stop - start, bool)
        off = _voxel_offsets(cfg.seed, cid, stop - start, m)[sel]
        ijk = np.stack(np.unravel_index(ids[sel], dims), axis=1).astype(np.float64)
        pts = roi.lo + (ijk[:, None, :] + off) * vs
        pts = np.minimum(pts, roi.hi)
        occ = _eval(field, pts.reshape(-1, 3)).reshape(-1, m)
        scores[ids[sel]] = occ.max(axis=1)
    return scores.reshape(dims)


def render_voxel_grid(field: Field, roi: RoiBox, voxel_size,
                      cfg: VoxelRenderConfig = VoxelRenderConfig(),
                      mask: Optional[np.ndarray] = None) -> VoxelGrid:
    """Binary grid: voxel occupied iff its max sampled occupancy >= threshold."""
    scores = voxel_scores(field, roi, voxel_size, cfg, mask)
    return VoxelGrid(roi, voxel_size, scores >= cfg.threshold)

"""Metrics: AbsRel along rays, Chamfer distance, voxel F1/IoU in the visible
region, and average rank across results tables.

Chamfer distance is ``0.5 * (mean_a NN(a, b) + mean_b NN(b, a))`` with
unsquared Euclidean nearest-neighbour distances in meters.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from .errors import ContractError, EmptyMetricError, FormatError, IncompleteTableError
from .geometry import PointCloud, RayBatch, RoiBox, VoxelGrid, clip_rays_to_roi, grid_dims
from .geometry import rays_from_cloud
from .rendering import RayRenderConfig, VoxelRenderConfig, render_point_cloud, render_voxel_grid
from .simulator import SceneSpec, box_overlaps_solid, simulate_lidar

VISIBILITY_SUPERSAMPLE = 4
_BRUTE_CHUNK = 1024


# -- depth and point-set metrics ---------------------------------------------

class AbsRel(NamedTuple):
    value: float
    used: int
    excluded: int


def absrel_counts(pred, gt) -> AbsRel:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise ContractError(f"absrel: {pred.size} predictions vs {gt.size} ground-truth depths")
    valid = np.isfinite(gt) & (gt > 0)
    if not valid.any():
        raise EmptyMetricError("absrel: no ray has a positive ground-truth depth")
    rel = np.abs(pred[valid] - gt[valid]) / gt[valid]
    return AbsRel(float(rel.mean()), int(valid.sum()), int((~valid).sum()))


def absrel(pred, gt) -> float:
    """Mean ``|pred - gt| / gt`` over rays with ``gt > 0``."""
    return absrel_counts(pred, gt).value


def _points(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
    return pts.reshape(-1, 3)


def _dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a - b
    return np.sqrt(np.einsum("...i,...i->...", diff, diff))


def nearest_distances(src, dst, method: str = "kdtree") -> np.ndarray:
    """Distance from each ``src`` point to its nearest ``dst`` point."""
    a, b = _points(src), _points(dst)
    if len(a) == 0 or len(b) == 0:
        raise ContractError("nearest-neighbour query needs two non-empty clouds")
    if method == "kdtree":
        _, idx = cKDTree(b).query(a, k=1)
        # recompute with the brute-force formula so both methods agree bit for bit
        return _dist(a, b[idx])
    if method == "brute":
        out = np.empty(len(a))
        for s in range(0, len(a), _BRUTE_CHUNK):
            d = _dist(a[s:s + _BRUTE_CHUNK, None, :], b[None, :, :])
            out[s:s + _BRUTE_CHUNK] = d.min(axis=1)
        return out
    raise ContractError(f"unknown nearest-neighbour method {method!r}")


def chamfer(a, b, method: str = "kdtree") -> float:
    """Symmetric Chamfer distance (m) between two non-empty clouds."""
    ab = nearest_distances(a, b, method).mean()
    ba = nearest_distances(b, a, method).mean()
    return float(0.5 * (ab + ba))


# -- voxel metrics -----------------------------------------------------------

class OccupancyScores(NamedTuple):
    f1: float
    iou: float
    tp: int
    fp: int
    fn: int
    visible: int


def scores_from_confusion(tp: int, fp: int, fn: int) -> tuple:
    """``(f1, iou)``; both 1.0 when there is nothing to find and nothing predicted."""
    denom = tp + fp + fn
    if denom == 0:
        return 1.0, 1.0
    return 2 * tp / (2 * tp + fp + fn), tp / denom


def occupancy_scores(pred: VoxelGrid, gt: VoxelGrid) -> OccupancyScores:
    """F1 and IoU of occupied voxels, restricted to ``gt.visibility``."""
    if pred.dims != gt.dims:
        raise ContractError(f"grid dims differ: {pred.dims} vs {gt.dims}")
    if not (np.allclose(pred.roi.lo, gt.roi.lo, atol=1e-5)
            and np.allclose(pred.roi.hi, gt.roi.hi, atol=1e-5)):
        raise ContractError("grids cover different ROI boxes")
    if gt.visibility is None:
        raise ContractError("ground-truth grid carries no visibility mask")
    vis = gt.visibility
    if not vis.any():
        raise EmptyMetricError("no visible voxels")
    p, g = pred.occupancy[vis], gt.occupancy[vis]
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    f1, iou = scores_from_confusion(tp, fp, fn)
    return OccupancyScores(f1, iou, tp, fp, fn, int(vis.sum()))


def voxelize_scene(scene: SceneSpec, roi: Optional[RoiBox] = None,
                   voxel_size=0.4) -> np.ndarray:
    """Analytic ground truth: a voxel is occupied iff it overlaps a solid with positive volume."""
    roi = scene.roi if roi is None else roi
    dims = grid_dims(roi, voxel_size)
    vs = np.broadcast_to(np.asarray(voxel_size, dtype=np.float64), (3,))
    ijk = np.stack(np.meshgrid(*[np.arange(n) for n in dims], indexing="ij"), -1).reshape(-1, 3)
    lo = roi.lo + ijk * vs
    hi = lo + vs
    occ = np.zeros(len(ijk), bool)
    for prim in scene.primitives:
        occ |= box_overlaps_solid(prim, lo, hi)
    return occ.reshape(dims)


def walk_voxels(origins, directions, t_stop, roi: RoiBox, voxel_size,
                tol: float = 1e-9) -> np.ndarray:
    """Boolean grid of voxels traversed by rays over ``[t_enter, min(t_stop, t_exit)]``.

    Regular-grid line walk (one voxel step per boundary crossing); a voxel
    whose boundary the ray reaches exactly at ``t_stop`` counts as traversed.
    """
    dims = np.array(grid_dims(roi, voxel_size))
    vs = np.broadcast_to(np.asarray(voxel_size, dtype=np.float64), (3,))
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    o = np.broadcast_to(o, d.shape)
    te, tx, hit = clip_rays_to_roi(o, d, roi)
    stop = np.minimum(np.where(np.isfinite(t_stop), t_stop, np.inf), tx)
    live = hit & (stop >= te)
    out = np.zeros(tuple(dims), bool)
    o, d, te, stop = o[live], d[live], te[live], stop[live]
    if len(o) == 0:
        return out
    p0 = o + te[:, None] * d
    idx = np.clip(np.floor((p0 - roi.lo) / vs).astype(np.int64), 0, dims - 1)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(d != 0, vs / np.abs(d), np.inf)
        bound = roi.lo + (idx + (step > 0)) * vs
        t_max = np.where(d != 0, (bound - o) / d, np.inf)
    active = np.arange(len(o))
    while active.size:
        i = idx[active]
        out[i[:, 0], i[:, 1], i[:, 2]] = True
        tm = t_max[active]
        axis = tm.argmin(axis=1)
        rows = np.arange(active.size)
        nxt = tm[rows, axis]
        go = nxt <= stop[active] + tol
        active, axis, rows = active[go], axis[go], rows[go]
        idx[active, axis] += step[active, axis]
        t_max[active, axis] += t_delta[active, axis]
        inside = np.all((idx[active] >= 0) & (idx[active] < dims), axis=1)
        active = active[inside]
    return out


def visibility_mask(scene: SceneSpec, roi: Optional[RoiBox] = None, voxel_size=0.4,
                    supersample: int = VISIBILITY_SUPERSAMPLE,
                    cameras: Optional[Sequence] = None) -> np.ndarray:
    """Voxels traversed by some camera ray before (or at) its first surface hit."""
    roi = scene.roi if roi is None else roi
    cams = scene.cameras if cameras is None else cameras
    vis = np.zeros(grid_dims(roi, voxel_size), bool)
    for cam in cams:
        rays = cam.pixel_rays(supersample)
        t = scene.cast_rays(rays.origins, rays.directions)
        vis |= walk_voxels(rays.origins, rays.directions, t, roi, voxel_size)
    return vis


def ground_truth_grid(scene: SceneSpec, voxel_size=0.4,
                      supersample: int = VISIBILITY_SUPERSAMPLE) -> VoxelGrid:
    """Analytic occupancy plus camera visibility for ``scene.roi``."""
    occ = voxelize_scene(scene, scene.roi, voxel_size)
    vis = visibility_mask(scene, scene.roi, voxel_size, supersample)
    return VoxelGrid(scene.roi, voxel_size, occ, vis)


def eval_occupancy(field, scene: SceneSpec, voxel_size=0.4,
                   cfg: VoxelRenderConfig = VoxelRenderConfig(),
                   gt: Optional[VoxelGrid] = None) -> MetricReport:
    """Voxel F1/IoU of a field against the analytic grid, inside the visible mask.

    Only visible voxels are rendered since the rest never enter the score.
    """
    gt = ground_truth_grid(scene, voxel_size) if gt is None else gt
    pred = render_voxel_grid(field, gt.roi, voxel_size, cfg, mask=gt.visibility)
    sc = occupancy_scores(pred, gt)
    return MetricReport({"f1": sc.f1, "iou": sc.iou},
                        {"tp": sc.tp, "fp": sc.fp, "fn": sc.fn, "visible": sc.visible},
                        {"voxel_size": float(np.max(voxel_size)), "samples": cfg.samples,
                         "threshold": cfg.threshold, "seed": cfg.seed})


# -- ranking -----------------------------------------------------------------

@dataclass
class RankTable:
    """Methods x (dataset, metric) scores with a per-column orientation."""

    methods: List[str]
    columns: List[tuple]
    scores: np.ndarray
    orientation: List[str]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.methods), len(self.columns)):
            raise ContractError("score matrix shape does not match methods x columns")
        bad = [o for o in self.orientation if o not in ("lower", "higher")]
        if bad or len(self.orientation) != len(self.columns):
            raise ContractError("orientation must be 'lower' or 'higher' for every column")

    def ranks(self) -> np.ndarray:
        missing = np.argwhere(~np.isfinite(self.scores))
        if len(missing):
            i, j = missing[0]
            ds, metric = self.columns[j]
            raise IncompleteTableError(f"missing score for {self.methods[i]} on {ds}:{metric}")
        cols = []
        for j, orient in enumerate(self.orientation):
            s = self.scores[:, j] if orient == "lower" else -self.scores[:, j]
            cols.append(rankdata(s, method="min"))
        return np.column_stack(cols)

    def average_rank(self) -> Dict[str, float]:
        r = self.ranks()
        return {m: float(v) for m, v in zip(self.methods, r.mean(axis=1))}


def average_rank(table: RankTable) -> Dict[str, float]:
    """Mean per-column placement of each method (ties share the minimum rank)."""
    return table.average_rank()


def parse_rank_table(text: str) -> RankTable:
    """CSV: header ``method,<dataset>:<metric>,...``; an ``orientation`` row; one row per method."""
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if len(rows) < 2 or rows[0][0].strip() != "method":
        raise FormatError("rank table must start with a 'method' header row")
    columns = []
    for h in rows[0][1:]:
        ds, sep, metric = h.strip().partition(":")
        if not sep:
            raise FormatError(f"column {h!r} is not 'dataset:metric'")
        columns.append((ds, metric))
    orient, methods, scores = None, [], []
    for r in rows[1:]:
        name, cells = r[0].strip(), [c.strip() for c in r[1:]]
        if len(cells) != len(columns):
            raise FormatError(f"row {name!r} has {len(cells)} cells, expected {len(columns)}")
        if name == "orientation":
            orient = cells
            continue
        methods.append(name)
        try:
            scores.append([float(c) if c else np.nan for c in cells])
        except ValueError as err:
            raise FormatError(f"row {name!r}: {err}") from None
    if orient is None:
        raise FormatError("rank table lacks an 'orientation' row")
    return RankTable(methods, columns, np.array(scores).reshape(len(methods), len(columns)),
                     orient)


def load_rank_table(path) -> RankTable:
    with open(path, newline="") as fh:
        return parse_rank_table(fh.read())


def bundled_table2() -> RankTable:
    """Published pointmap results (depth-unprojection rows for multi-variant baselines)."""
    text = resources.files("bevocc").joinpath("data/table2.csv").read_text()
    return parse_rank_table(text)


# -- reports -----------------------------------------------------------------

@dataclass
class MetricReport:
    values: Dict[str, float]
    counts: Dict[str, int]
    config: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.values.items():
            if not np.isfinite(v):
                raise ContractError(f"metric {k} is not finite")

    def to_json(self) -> str:
        return json.dumps({"values": self.values, "counts": self.counts, "config": self.config},
                          indent=2, sort_keys=True)


def lidar_rays(scene: SceneSpec, in_roi: bool = True) -> RayBatch:
    """Ground-truth LiDAR rays, optionally only those returning inside the ROI."""
    rays = rays_from_cloud(simulate_lidar(scene))
    if in_roi:
        rays = rays.subset(np.flatnonzero(scene.roi.contains(rays.points())))
    if len(rays) == 0:
        raise EmptyMetricError("no LiDAR return inside the ROI")
    return rays


def _check_rays(scene: SceneSpec, rays: RayBatch, tol: float = 1e-6):
    if not np.allclose(rays.origins, np.asarray(scene.lidar.origin), atol=tol):
        raise ContractError("ray origins do not match the scene's LiDAR origin")
    t = scene.cast_rays(rays.origins, rays.directions)
    ok = np.isfinite(t) & np.isfinite(rays.hit_distance)
    if not ok.all() or np.max(np.abs(t - rays.hit_distance)) > tol:
        raise ContractError("ray hit distances are inconsistent with the scene")


def eval_pointmap(source, scene: SceneSpec, rays: Optional[RayBatch] = None,
                  cfg: RayRenderConfig = RayRenderConfig()) -> MetricReport:
    """AbsRel along GT LiDAR rays and Chamfer distance to the GT returns.

    ``source`` is an occupancy field (rendered along the rays) or a
    ray-aligned ``PointCloud`` with one predicted point per ray.
    """
    rays = lidar_rays(scene) if rays is None else rays
    _check_rays(scene, rays)
    gt = rays.hit_distance
    gt_cloud = PointCloud(rays.points(), rays.origins[0])
    if isinstance(source, PointCloud):
        if len(source) != len(rays):
            raise ContractError(f"baseline cloud has {len(source)} points for {len(rays)} rays")
        pred = np.linalg.norm(source.points - rays.origins, axis=1)
        cloud, dropped = source, 0
    else:
        rendered = render_point_cloud(source, rays, cfg, scene.roi)
        pred = rendered.depths.depth
        cloud, dropped = rendered.cloud, rendered.dropped
    ar = absrel_counts(pred, gt)
    values = {"absrel": ar.value}
    counts = {"rays": ar.used, "excluded_rays": ar.excluded, "dropped_points": dropped,
              "points": len(cloud)}
    if len(cloud):
        values["chamfer"] = chamfer(cloud, gt_cloud)
    return MetricReport(values, counts, {"step": cfg.step, "max_range": cfg.max_range})


def camera_sectors(directions, cameras) -> np.ndarray:
    """Index of the camera whose yaw is closest to each ray's azimuth."""
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    az = np.degrees(np.arctan2(d[:, 1], d[:, 0]))
    yaw = np.array([c.yaw_deg for c in cameras])
    diff = np.abs((az[:, None] - yaw[None, :] + 180.0) % 360.0 - 180.0)
    return diff.argmin(axis=1)


def sector_absrel(pred, rays: RayBatch, cameras) -> Dict[int, float]:
    """AbsRel of rendered depths grouped by the camera sector of each ray."""
    sec = camera_sectors(rays.directions, cameras)
    pred = np.asarray(pred, dtype=np.float64)
    out = {}
    for i in range(len(cameras)):
        m = sec == i
        if m.any():
            out[i] = absrel(pred[m], rays.hit_distance[m])
    return out

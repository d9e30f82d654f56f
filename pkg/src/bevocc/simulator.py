"""Procedural synthetic driving scenes with an exact ray-cast / occupancy oracle.

A scene is a union of closed solids (axis-aligned boxes, spheres and a ground
slab), a spinning LiDAR and a rig of pinhole cameras. The rig is used only
here to produce rasters; :class:`RenderedViews` carries no calibration.

Scene JSON (``schema = "bevocc.scene"``, ``version = 1``)::

    {"schema": ..., "version": 1, "seed": int|null,
     "roi": [[xmin, ymin, zmin], [xmax, ymax, zmax]],
     "primitives": [{"type": "box", "center": [3], "size": [3]},
                    {"type": "sphere", "center": [3], "radius": r},
                    {"type": "ground", "height": h, "thickness": 0.2}],
     "lidar": {"origin": [3], "azimuth_count": n, "elevations_deg": [...], "max_range": m},
     "cameras": [{"name": s, "position": [3], "yaw_deg": a, "pitch_deg": b,
                  "fx": f, "fy": f, "cx": c, "cy": c, "width": w, "height": h}]}

``VIEW`` binary: magic | u32 version | u32 camera count | count x (u32 H, u32 W) |
per camera: H*W f32 inverse depth then H*W f32 mask, little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, ContractError, EmptySweepError, FormatError
from .geometry import DESK_ROI, PointCloud, Ray, RayBatch, RoiBox

SCENE_SCHEMA = "bevocc.scene"
SCENE_VERSION = 1
VIEW_VERSION = 1
GROUND_THICKNESS = 0.2
OCCUPANCY_TOL = 1e-9
FACADE_INSET = 0.8
FACADE_HEIGHT = 20.0
_T_MIN = 1e-12


@dataclass(frozen=True)
class Box:
    center: tuple
    size: tuple

    @property
    def lo(self):
        return np.asarray(self.center) - 0.5 * np.asarray(self.size)

    @property
    def hi(self):
        return np.asarray(self.center) + 0.5 * np.asarray(self.size)

    def to_dict(self):
        return {"type": "box", "center": list(self.center), "size": list(self.size)}


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def to_dict(self):
        return {"type": "sphere", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class GroundPlane:
    height: float = 0.0
    thickness: float = GROUND_THICKNESS

    def to_dict(self):
        return {"type": "ground", "height": self.height, "thickness": self.thickness}


Primitive = Union[Box, Sphere, GroundPlane]


def ground_ring_elevations(height: float = 1.8, near: float = 1.0, far: float = 24.0,
                           count: int = 32, upward=tuple(range(0, 37, 3))) -> tuple:
    """Downward beams whose ground hits are evenly spaced in range, plus upward beams.

    Evenly spaced rings keep free/occupied labels dense out to the ROI corners;
    a linear elevation fan bunches its far rings and leaves the outer ground
    unlabeled.
    """
    r = np.linspace(near, far, count)
    down = -np.degrees(np.arctan2(height, r))
    return tuple(round(float(v), 6) for v in np.concatenate([down, np.asarray(upward, float)]))


@dataclass(frozen=True)
class LidarConfig:
    origin: tuple = (0.0, 0.0, 1.8)
    azimuth_count: int = 360
    elevations_deg: tuple = ground_ring_elevations()
    max_range: float = 60.0

    def directions(self) -> np.ndarray:
        az = 2.0 * np.pi * np.arange(self.azimuth_count) / self.azimuth_count
        el = np.deg2rad(np.asarray(self.elevations_deg, dtype=np.float64))
        A, E = np.meshgrid(az, el, indexing="xy")
        d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
        return d.reshape(-1, 3)

    def to_dict(self):
        return {"origin": list(self.origin), "azimuth_count": self.azimuth_count,
                "elevations_deg": list(self.elevations_deg), "max_range": self.max_range}


@dataclass(frozen=True)
class Camera:
    name: str
    position: tuple
    yaw_deg: float
    pitch_deg: float
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def basis(self):
        """Unit (right, down, forward) vectors in the ego frame (x fwd, y left, z up)."""
        yaw, pitch = np.deg2rad(self.yaw_deg), np.deg2rad(self.pitch_deg)
        fwd = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
        right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
        down = np.cross(fwd, right)
        return right, down, fwd

    def pixel_rays(self, supersample: int = 1) -> RayBatch:
        """Rays through pixel centers (or an s x s sub-grid per pixel), row-major."""
        s = supersample
        u = (np.arange(self.width * s) + 0.5) / s
        v = (np.arange(self.height * s) + 0.5) / s
        U, V = np.meshgrid(u, v, indexing="xy")
        xc = (U - self.cx) / self.fx
        yc = (V - self.cy) / self.fy
        right, down, fwd = self.basis()
        d = xc[..., None] * right + yc[..., None] * down + fwd
        d = d.reshape(-1, 3)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return RayBatch(np.asarray(self.position, dtype=np.float64)[None], d)

    def to_dict(self):
        return {"name": self.name, "position": list(self.position), "yaw_deg": self.yaw_deg,
                "pitch_deg": self.pitch_deg, "fx": self.fx, "fy": self.fy, "cx": self.cx,
                "cy": self.cy, "width": self.width, "height": self.height}


def default_rig(image_size: int = 32, height: float = 1.6, pitch_deg: float = -10.0,
                num_cameras: int = 4) -> tuple:
    """Cameras with 90 degree horizontal FOV at evenly spaced yaws."""
    f = image_size / 2.0
    return tuple(Camera(f"cam{i}", (0.0, 0.0, height), 360.0 * i / num_cameras, pitch_deg,
                        f, f, image_size / 2.0, image_size / 2.0, image_size, image_size)
                 for i in range(num_cameras))


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    lidar: LidarConfig = field(default_factory=LidarConfig)
    cameras: tuple = field(default_factory=default_rig)
    roi: RoiBox = DESK_ROI
    seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not self.primitives:
            raise ContractError("scene needs at least one primitive")
        if not self.cameras:
            raise ContractError("scene needs at least one camera")
        for p in self.primitives:
            if not _intersects_roi(p, self.roi):
                raise ContractError(f"primitive {p} does not intersect the ROI")

    # -- oracle -------------------------------------------------------------
    def cast_rays(self, origins, directions, max_range: Optional[float] = None) -> np.ndarray:
        """Nearest hit distance per ray; NaN for misses or hits beyond max range."""
        o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        if len(o) == 1 and len(d) > 1:
            o = np.broadcast_to(o, d.shape)
        best = np.full(len(d), np.inf)
        for prim in self.primitives:
            np.minimum(best, _intersect(prim, o, d), out=best)
        limit = self.lidar.max_range if max_range is None else max_range
        best[best > limit] = np.nan
        best[~np.isfinite(best)] = np.nan
        return best

    def occupied(self, points, tol: float = OCCUPANCY_TOL) -> np.ndarray:
        """True where a point lies in any closed solid (within ``tol``)."""
        p = np.asarray(points, dtype=np.float64)
        flat = p.reshape(-1, 3)
        occ = np.zeros(len(flat), dtype=bool)
        for prim in self.primitives:
            occ |= _inside(prim, flat, tol)
        return occ.reshape(p.shape[:-1])

    def indicator(self, points) -> np.ndarray:
        return self.occupied(points).astype(np.float64)

    def to_dict(self) -> dict:
        return {"schema": SCENE_SCHEMA, "version": SCENE_VERSION, "seed": self.seed,
                "roi": self.roi.to_list(),
                "primitives": [p.to_dict() for p in self.primitives],
                "lidar": self.lidar.to_dict(),
                "cameras": [c.to_dict() for c in self.cameras]}

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneSpec":
        if doc.get("schema") != SCENE_SCHEMA or doc.get("version") != SCENE_VERSION:
            raise FormatError(f"unsupported scene document {doc.get('schema')!r} "
                              f"v{doc.get('version')}")
        _reject_unknown(doc, {"schema", "version", "seed", "roi", "primitives", "lidar",
                              "cameras"}, "scene")
        prims = []
        for p in doc["primitives"]:
            kind = p.get("type")
            if kind == "box":
                _reject_unknown(p, {"type", "center", "size"}, "box")
                prims.append(Box(tuple(p["center"]), tuple(p["size"])))
            elif kind == "sphere":
                _reject_unknown(p, {"type", "center", "radius"}, "sphere")
                prims.append(Sphere(tuple(p["center"]), float(p["radius"])))
            elif kind == "ground":
                _reject_unknown(p, {"type", "height", "thickness"}, "ground")
                prims.append(GroundPlane(float(p["height"]),
                                         float(p.get("thickness", GROUND_THICKNESS))))
            else:
                raise FormatError(f"unknown primitive type {kind!r}")
        lid = doc["lidar"]
        _reject_unknown(lid, {"origin", "azimuth_count", "elevations_deg", "max_range"}, "lidar")
        lidar = LidarConfig(tuple(lid["origin"]), int(lid["azimuth_count"]),
                            tuple(lid["elevations_deg"]), float(lid["max_range"]))
        cams = []
        for c in doc["cameras"]:
            _reject_unknown(c, set(Camera.__dataclass_fields__), "camera")
            cams.append(Camera(c["name"], tuple(c["position"]), float(c["yaw_deg"]),
                               float(c["pitch_deg"]), float(c["fx"]), float(c["fy"]),
                               float(c["cx"]), float(c["cy"]), int(c["width"]),
                               int(c["height"])))
        return cls(tuple(prims), lidar, tuple(cams), RoiBox.from_list(doc["roi"]), doc.get("seed"))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> "SceneSpec":
        return cls.from_dict(json.loads(text))


def _reject_unknown(doc: dict, allowed: set, where: str):
    extra = set(doc) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")


def save_scene(path, scene: SceneSpec) -> None:
    Path(path).write_text(scene.dumps())


def load_scene(path) -> SceneSpec:
    return SceneSpec.loads(Path(path).read_text())


# -- primitive geometry --------------------------------------------------------

def _slab_hits(lo, hi, o, d):
    """Smallest positive boundary crossing of an axis-aligned slab/box per ray."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    par = d == 0.0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    tn = tmin.max(axis=1)
    tf = tmax.min(axis=1)
    valid = tf >= tn
    t = np.where(tn > _T_MIN, tn, np.where(tf > _T_MIN, tf, np.inf))
    return np.where(valid, t, np.inf)


def _intersect(prim: Primitive, o, d) -> np.ndarray:
    if isinstance(prim, Box):
        return _slab_hits(prim.lo, prim.hi, o, d)
    if isinstance(prim, GroundPlane):
        lo = np.array([-np.inf, -np.inf, prim.height - prim.thickness])
        hi = np.array([np.inf, np.inf, prim.height])
        with np.errstate(invalid="ignore"):
            return _slab_hits(lo, hi, o, d)
    oc = o - np.asarray(prim.center)
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - prim.radius ** 2
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > _T_MIN, t0, np.where(t1 > _T_MIN, t1, np.inf))
    return np.where(ok, t, np.inf)


def _inside(prim: Primitive, p, tol) -> np.ndarray:
    if isinstance(prim, Box):
        return np.all((p >= prim.lo - tol) & (p <= prim.hi + tol), axis=1)
    if isinstance(prim, GroundPlane):
        z = p[:, 2]
        return (z >= prim.height - prim.thickness - tol) & (z <= prim.height + tol)
    r = prim.radius + tol
    return np.sum((p - np.asarray(prim.center)) ** 2, axis=1) <= r * r


def _intersects_roi(prim: Primitive, roi: RoiBox) -> bool:
    if isinstance(prim, Box):
        return bool(np.all(prim.lo <= roi.hi) and np.all(prim.hi >= roi.lo))
    if isinstance(prim, GroundPlane):
        return roi.min[2] <= prim.height and prim.height - prim.thickness <= roi.max[2]
    nearest = np.clip(np.asarray(prim.center), roi.lo, roi.hi)
    return float(np.linalg.norm(nearest - np.asarray(prim.center))) <= prim.radius


def box_overlaps_solid(prim: Primitive, lo: np.ndarray, hi: np.ndarray,
                       tol: float = OCCUPANCY_TOL) -> np.ndarray:
    """Overlap deeper than ``tol`` along every axis between cells ``[lo, hi]`` (N x 3) and a solid.

    The tolerance keeps cells that merely touch a face (up to rounding of
    the cell bounds) from counting as occupied.
    """
    if isinstance(prim, Box):
        return np.all((np.minimum(hi, prim.hi) - np.maximum(lo, prim.lo)) > tol, axis=1)
    if isinstance(prim, GroundPlane):
        return ((np.minimum(hi[:, 2], prim.height)
                 - np.maximum(lo[:, 2], prim.height - prim.thickness)) > tol)
    c = np.asarray(prim.center)
    nearest = np.clip(c, lo, hi)
    return np.sum((nearest - c) ** 2, axis=1) < (prim.radius - tol) ** 2


# -- public operations ---------------------------------------------------------

def cast(scene: SceneSpec, ray: Ray, max_range: Optional[float] = None) -> Optional[float]:
    t = scene.cast_rays(ray.origin, ray.direction, max_range)[0]
    return None if np.isnan(t) else float(t)


def occupied(scene: SceneSpec, p) -> Union[bool, np.ndarray]:
    out = scene.occupied(p)
    return bool(out) if np.ndim(out) == 0 else out


def simulate_lidar(scene: SceneSpec) -> PointCloud:
    """One return per hitting beam of the azimuth x elevation pattern."""
    lid = scene.lidar
    dirs = lid.directions()
    origin = np.asarray(lid.origin, dtype=np.float64)
    t = scene.cast_rays(origin, dirs)
    hit = np.isfinite(t)
    if not hit.any():
        raise EmptySweepError("LiDAR sweep has no returns; check scene geometry and max range")
    return PointCloud(origin + t[hit, None] * dirs[hit], origin)


@dataclass
class RenderedViews:
    """Per-camera ``(2, H, W)`` rasters: inverse depth (1/m) and hit mask."""

    data: np.ndarray
    camera_ids: tuple = ()

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[1] != 2:
            raise ContractError(f"views must be (cameras, 2, H, W), got {self.data.shape}")
        if not self.camera_ids:
            self.camera_ids = tuple(f"cam{i}" for i in range(self.data.shape[0]))
        self.camera_ids = tuple(self.camera_ids)

    @property
    def num_cameras(self) -> int:
        return self.data.shape[0]

    @property
    def image_size(self) -> tuple:
        return self.data.shape[2:]

    @property
    def inverse_depth(self) -> np.ndarray:
        return self.data[:, 0]

    @property
    def mask(self) -> np.ndarray:
        return self.data[:, 1]


def render_views(scene: SceneSpec) -> RenderedViews:
    sizes = {(c.height, c.width) for c in scene.cameras}
    if len(sizes) != 1:
        raise ContractError("all rig cameras must share one image size")
    (H, W), = sizes
    out = np.zeros((len(scene.cameras), 2, H, W))
    for i, cam in enumerate(scene.cameras):
        rays = cam.pixel_rays()
        t = scene.cast_rays(rays.origins, rays.directions).reshape(H, W)
        hit = np.isfinite(t)
        out[i, 0][hit] = 1.0 / t[hit]
        out[i, 1][hit] = 1.0
    return RenderedViews(out, tuple(c.name for c in scene.cameras))


def drop_cameras(views: RenderedViews, keep: Sequence[int]) -> RenderedViews:
    """Zero every camera not in ``keep``; count and order are preserved."""
    keep = set(int(k) for k in keep)
    if not keep:
        raise ContractError("drop_cameras: keep set must be non-empty")
    bad = [k for k in keep if not 0 <= k < views.num_cameras]
    if bad:
        raise ContractError(f"drop_cameras: camera indices {bad} out of range")
    data = views.data.copy()
    for i in range(views.num_cameras):
        if i not in keep:
            data[i] = 0.0
    return RenderedViews(data, views.camera_ids)


def encode_views(views: RenderedViews) -> bytes:
    n, _, H, W = views.data.shape
    parts = [b"VIEW", struct.pack("<II", VIEW_VERSION, n)]
    parts += [struct.pack("<II", H, W)] * n
    parts += [views.data[i].astype("<f4").tobytes() for i in range(n)]
    return b"".join(parts)


def decode_views(buf: bytes) -> RenderedViews:
    if buf[:4] != b"VIEW":
        raise FormatError("not a VIEW file")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != VIEW_VERSION:
        raise FormatError(f"unsupported VIEW version {version}")
    dims = [struct.unpack_from("<II", buf, 12 + 8 * i) for i in range(n)]
    if len(set(dims)) > 1:
        raise FormatError("VIEW cameras with differing sizes are not supported")
    H, W = dims[0]
    off = 12 + 8 * n
    if len(buf) != off + n * 2 * H * W * 4:
        raise FormatError("VIEW payload size mismatch")
    data = np.frombuffer(buf, "<f4", n * 2 * H * W, off).reshape(n, 2, H, W)
    return RenderedViews(data.astype(np.float64))


# -- procedural generation -------------------------------------------------------

def _footprint_clearance(center_xy, half_xy) -> float:
    """Distance from the ego origin to an axis-aligned footprint rectangle."""
    gap = np.maximum(np.abs(center_xy) - half_xy, 0.0)
    return float(np.linalg.norm(gap))


def facade_boxes(roi: RoiBox, inset: float = FACADE_INSET, height: float = FACADE_HEIGHT,
                 thickness: float = 2.0) -> List[Box]:
    """Four tall walls whose faces sit ``inset`` inside the ROI's side faces.

    They reach far above the ROI top so upward LiDAR beams return and label
    the air column inside the ROI as free.
    """
    walls = []
    span = 2.0 * (max(abs(roi.lo[0]), abs(roi.hi[0]), abs(roi.lo[1]), abs(roi.hi[1]))
                  + thickness)
    for axis in (0, 1):
        for side, face in ((-1.0, roi.lo[axis] + inset), (1.0, roi.hi[axis] - inset)):
            center = [0.0, 0.0, height / 2.0]
            size = [span, span, height]
            center[axis] = float(face + side * thickness / 2.0)
            size[axis] = thickness
            walls.append(Box(tuple(center), tuple(size)))
    return walls


def generate_scene(seed: int, roi: RoiBox = DESK_ROI, cameras: Optional[Sequence[Camera]] = None,
                   lidar: Optional[LidarConfig] = None, box_count=(4, 8), sphere_count=(0, 2),
                   float_prob: float = 0.15, clearance: float = 3.0,
                   facades: bool = True) -> SceneSpec:
    """Random ground + boxes + spheres scene, deterministic in ``seed``.

    With ``facades`` the scene is enclosed by ``facade_boxes`` and the random
    primitives stay inside the enclosure.
    """
    rng = np.random.default_rng(seed)
    prims: List[Primitive] = [GroundPlane(0.0)]
    lo, hi = roi.lo.copy(), roi.hi.copy()
    if facades:
        prims += facade_boxes(roi)
        lo[:2] += FACADE_INSET
        hi[:2] -= FACADE_INSET
    top = roi.hi[2] - 0.2

    def place(half_xy):
        for _ in range(1000):
            c = rng.uniform(lo[:2] + half_xy, hi[:2] - half_xy)
            if _footprint_clearance(c, half_xy) >= clearance:
                return c
        raise ConfigError("could not place primitive clear of the ego vehicle")

    for _ in range(int(rng.integers(box_count[0], box_count[1] + 1))):
        size = rng.uniform([1.0, 1.0, 0.8], [4.0, 4.0, 3.0])
        xy = place(size[:2] / 2)
        base = rng.uniform(0.5, 1.5) if rng.random() < float_prob else 0.0
        base = min(base, top - size[2])
        center = (float(xy[0]), float(xy[1]), float(base + size[2] / 2))
        prims.append(Box(center, tuple(float(s) for s in size)))
    for _ in range(int(rng.integers(sphere_count[0], sphere_count[1] + 1))):
        r = float(rng.uniform(0.5, 1.5))
        xy = place(np.array([r, r]))
        base = rng.uniform(0.3, 1.2) if rng.random() < float_prob else 0.0
        z = float(min(base + r, top - r))
        prims.append(Sphere((float(xy[0]), float(xy[1]), z), r))
    return SceneSpec(tuple(prims), lidar or LidarConfig(),
                     tuple(cameras) if cameras is not None else default_rig(), roi, seed)

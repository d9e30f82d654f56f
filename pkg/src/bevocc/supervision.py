"""Self-supervised occupancy labels drawn along LiDAR rays.

For a ray with origin ``o``, direction ``u`` and hit distance ``d`` a point
``o + t u`` is labeled free for ``t`` in ``[0, d)`` and occupied for ``t`` in
``[d, d + tau)``. Free-space points are drawn with one of three strategies:

``random``                uniform on ``[0, d)``
``stratified``            one uniform draw in each of ``K`` equal bins of ``[0, d)``
``stratified_symmetric``  stratified draws plus a fixed share uniform on ``[d - tau, d)``

Points outside the ROI are discarded and replaced by draws from other rays
until the configured counts are met.

Binary format ``LQRY`` (little-endian): magic | u32 version | u64 count |
count x (3 x f32 point, u8 label, u32 ray index).
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, ContractError, FormatError, UnsatisfiableSamplingError
from .geometry import DESK_ROI, FORMAT_VERSION, Ray, RayBatch, RoiBox, clip_rays_to_roi
from .geometry import rays_from_cloud

STRATEGIES = ("random", "stratified", "stratified_symmetric")

KIND_POSITIVE = 0
KIND_FREE = 1
KIND_SYMMETRIC = 2

_MAX_ROUNDS = 200
_RECORD = np.dtype([("p", "<f4", (3,)), ("label", "u1"), ("ray", "<u4")])


@dataclass(frozen=True)
class SamplingConfig:
    strategy: str = "stratified_symmetric"
    bins: int = 5
    tau: float = 0.1
    positives: int = 4096
    negatives: int = 4096
    symmetric: int = 816
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if int(self.bins) < 1:
            raise ConfigError(f"bins must be >= 1, got {self.bins}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.positives <= 0 or self.negatives <= 0:
            raise ConfigError("positive and negative counts must be > 0")
        if self.symmetric < 0 or self.symmetric > self.negatives:
            raise ConfigError(
                f"symmetric share {self.symmetric} must lie in [0, negatives={self.negatives}]")

    @property
    def symmetric_count(self) -> int:
        return self.symmetric if self.strategy == "stratified_symmetric" else 0

    @classmethod
    def paper(cls, **overrides) -> "SamplingConfig":
        """Full-scale counts: 150K positives, 120K stratified + 30K symmetric negatives."""
        base = dict(positives=150_000, negatives=150_000, symmetric=30_000)
        base.update(overrides)
        return cls(**base)

    def with_counts(self, per_class: int, seed: Optional[int] = None) -> "SamplingConfig":
        """Same strategy and symmetric ratio at a different per-class count."""
        share = round(per_class * self.symmetric / self.negatives)
        return SamplingConfig(self.strategy, self.bins, self.tau, per_class, per_class, share,
                              self.seed if seed is None else seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SamplingConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sampling config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class LabeledQuerySet:
    """Query points with occupancy labels and the ray each was drawn from.

    ``t``, ``kind`` and ``group`` are kept in memory only (not serialized):
    the ray parameter, the sampling kind (``KIND_*``) and, for stratified
    negatives, the id of the per-ray draw group (-1 otherwise).
    """

    points: np.ndarray
    labels: np.ndarray
    ray_index: np.ndarray
    t: Optional[np.ndarray] = None
    kind: Optional[np.ndarray] = None
    group: Optional[np.ndarray] = None
    skipped_symmetric: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=bool).reshape(-1)
        self.ray_index = np.asarray(self.ray_index, dtype=np.int64).reshape(-1)
        n = len(self.points)
        if len(self.labels) != n or len(self.ray_index) != n:
            raise ContractError("points, labels and ray_index must have equal length")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def num_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def num_negative(self) -> int:
        return int((~self.labels).sum())

    @classmethod
    def concat(cls, parts: Sequence["LabeledQuerySet"]) -> "LabeledQuerySet":
        def cat(name):
            vals = [getattr(p, name) for p in parts]
            return None if any(v is None for v in vals) else np.concatenate(vals)

        return cls(cat("points"), cat("labels"), cat("ray_index"), cat("t"), cat("kind"),
                   cat("group"), max((p.skipped_symmetric for p in parts), default=0))


class OracleAgreement(NamedTuple):
    overall: float
    negative: float
    positive: float
    count: int


def _as_batch(rays: Union[RayBatch, Sequence[Ray]]) -> RayBatch:
    if isinstance(rays, RayBatch):
        return rays
    rays = list(rays)
    if not rays:
        raise ContractError("no rays to sample from")
    return RayBatch.from_rays(rays)


def _open_below(t, hi):
    """Clamp draws that rounded onto the excluded upper bound back inside."""
    return np.where(t >= hi, np.nextafter(hi, -np.inf), t)


class _Sampler:
    def __init__(self, batch: RayBatch, roi: RoiBox, rng: np.random.Generator):
        self.o = batch.origins
        self.u = batch.directions
        self.d = batch.hit_distance
        self.roi = roi
        self.rng = rng
        self.t_in, self.t_out, self.roi_hit = clip_rays_to_roi(self.o, self.u, roi)

    def _feasible(self, lo, hi):
        return self.roi_hit & (np.maximum(lo, self.t_in) <= np.minimum(hi, self.t_out))

    def _collect(self, need, eligible, draw, what):
        """Rejection-sample ``need`` in-ROI points; ``draw(rays)`` returns (t, ray, group)."""
        if need == 0:
            return [np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64)]
        if eligible.size == 0:
            raise UnsatisfiableSamplingError(f"no rays can produce in-ROI {what} points")
        got = [[], [], []]
        have, rate, rounds = 0, 1.0, 0
        while have < need:
            rounds += 1
            if rounds > _MAX_ROUNDS:
                raise UnsatisfiableSamplingError(
                    f"only {have} of {need} {what} points landed inside the ROI")
            m = int(min(max(64, math.ceil(1.25 * (need - have) / max(rate, 1e-3))), 1 << 20))
            rays = eligible[self.rng.integers(0, eligible.size, m)]
            t, ray, group = draw(rays)
            keep = self.roi.contains(self.o[ray] + t[:, None] * self.u[ray])
            rate = max(keep.mean(), 1e-3)
            for acc, v in zip(got, (t, ray, group)):
                acc.append(v[keep])
            have += int(keep.sum())
        return [np.concatenate(acc)[:need] for acc in got]

    def positives(self, need, tau):
        d = self.d
        elig = np.flatnonzero(self._feasible(d, d + tau))

        def draw(r):
            t = _open_below(d[r] + tau * self.rng.random(r.size), d[r] + tau)
            return t, r, np.full(r.size, -1)

        return self._collect(need, elig, draw, "positive")

    def random_free(self, need):
        d = self.d
        elig = np.flatnonzero(self._feasible(np.zeros_like(d), d))

        def draw(r):
            return _open_below(d[r] * self.rng.random(r.size), d[r]), r, np.full(r.size, -1)

        return self._collect(need, elig, draw, "free-space")

    def stratified_free(self, need, k):
        d = self.d
        elig = np.flatnonzero(self._feasible(np.zeros_like(d), d))
        groups = [0]

        def draw(r):
            b = np.arange(k)
            lo = d[r, None] * b / k
            hi = d[r, None] * (b + 1) / k
            t = _open_below(lo + (hi - lo) * self.rng.random((r.size, k)), hi)
            gid = groups[0] + np.repeat(np.arange(r.size), k)
            groups[0] += r.size
            return t.reshape(-1), np.repeat(r, k), gid

        t, ray, gid = self._collect(need, elig, draw, "free-space")
        # renumber groups densely in draw order
        _, gid = np.unique(gid, return_inverse=True)
        return [t, ray, gid]

    def symmetric(self, need, tau):
        d = self.d
        ok = d > tau
        elig = np.flatnonzero(ok & self._feasible(d - tau, d))

        def draw(r):
            t = (d[r] - tau) + tau * self.rng.random(r.size)
            t = _open_below(np.maximum(t, d[r] - tau), d[r])
            return t, r, np.full(r.size, -1)

        return self._collect(need, elig, draw, "symmetric"), int((~ok).sum())


def sample_queries(rays: Union[RayBatch, Sequence[Ray]], cfg: SamplingConfig,
                   roi: RoiBox = DESK_ROI) -> LabeledQuerySet:
    """Draw a balanced labeled query set along LiDAR rays.

    Rays without a return are ignored. ``ray_index`` refers to positions in
    the input ``rays``.
    """
    batch = _as_batch(rays)
    has = batch.has_hit
    if not has.any():
        raise ContractError("no ray has a hit distance")
    src = np.flatnonzero(has)
    batch = batch.subset(src)
    rng = np.random.default_rng(cfg.seed)
    s = _Sampler(batch, roi, rng)

    pos = s.positives(cfg.positives, cfg.tau)
    n_sym = cfg.symmetric_count
    n_free = cfg.negatives - n_sym
    if cfg.strategy == "random":
        free = s.random_free(n_free)
    else:
        free = s.stratified_free(n_free, int(cfg.bins))
    skipped = 0
    sym = [np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64)]
    if cfg.strategy == "stratified_symmetric":
        sym, skipped = s.symmetric(n_sym, cfg.tau)

    parts = (pos, free, sym)
    kinds = (KIND_POSITIVE, KIND_FREE, KIND_SYMMETRIC)
    t = np.concatenate([p[0] for p in parts])
    ray = np.concatenate([p[1] for p in parts]).astype(np.int64)
    group = np.concatenate([p[2] for p in parts]).astype(np.int64)
    kind = np.concatenate([np.full(len(p[0]), k, np.int8) for p, k in zip(parts, kinds)])
    points = batch.origins[ray] + t[:, None] * batch.directions[ray]
    return LabeledQuerySet(points, kind == KIND_POSITIVE, src[ray], t, kind, group, skipped)


def scene_queries(scene, cfg: SamplingConfig) -> LabeledQuerySet:
    """Simulate the scene's LiDAR sweep and sample queries inside its ROI."""
    from .simulator import simulate_lidar

    return sample_queries(rays_from_cloud(simulate_lidar(scene)), cfg, scene.roi)


def validate_against_oracle(qs: LabeledQuerySet, scene) -> OracleAgreement:
    """Fraction of labels that agree with the scene's analytic occupancy."""
    if len(qs) == 0:
        return OracleAgreement(1.0, 1.0, 1.0, 0)
    truth = scene.occupied(qs.points)
    agree = truth == qs.labels
    neg, pos = ~qs.labels, qs.labels
    rate = lambda m: float(agree[m].mean()) if m.any() else 1.0  # noqa: E731
    return OracleAgreement(float(agree.mean()), rate(neg), rate(pos), len(qs))


def encode_lqry(qs: LabeledQuerySet) -> bytes:
    rec = np.zeros(len(qs), dtype=_RECORD)
    rec["p"] = qs.points
    rec["label"] = qs.labels
    rec["ray"] = qs.ray_index
    return b"LQRY" + struct.pack("<IQ", FORMAT_VERSION, len(qs)) + rec.tobytes()


def decode_lqry(buf: bytes) -> LabeledQuerySet:
    if len(buf) < 16 or buf[:4] != b"LQRY":
        raise FormatError("not a LQRY file")
    version, n = struct.unpack_from("<IQ", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported LQRY version {version}")
    if len(buf) != 16 + n * _RECORD.itemsize:
        raise FormatError(f"LQRY payload size mismatch for {n} records")
    rec = np.frombuffer(buf, dtype=_RECORD, count=n, offset=16)
    return LabeledQuerySet(rec["p"].astype(np.float64), rec["label"].astype(bool),
                           rec["ray"].astype(np.int64))


def save_lqry(path, qs: LabeledQuerySet) -> None:
    Path(path).write_bytes(encode_lqry(qs))


def load_lqry(path) -> LabeledQuerySet:
    return decode_lqry(Path(path).read_bytes())

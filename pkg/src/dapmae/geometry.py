"""Parameter-free point-cloud kernels: sampling, grouping, masking, chamfer distance.

All distance arithmetic runs in float64 so that tie-breaking is stable regardless of
the input precision.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np


class DomainId(enum.IntEnum):
    OBJECT = 0
    FACE = 1
    SCENE = 2

    @classmethod
    def parse(cls, value) -> "DomainId":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise ValueError(f"unknown domain {value!r}") from None
        return cls(int(value))

    @property
    def slug(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    domain: DomainId
    id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must have shape (N>=1, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "domain", DomainId.parse(self.domain))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class MaskSpec:
    ratio: float
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.ratio < 1.0):
            raise ValueError(f"mask ratio must lie in [0, 1), got {self.ratio}")


@dataclass(frozen=True)
class PatchSet:
    centers: np.ndarray  # (G, 3)
    patches: np.ndarray  # (G, k, 3), center-relative
    source_indices: np.ndarray  # (G, k)
    vis_mask: np.ndarray = field(default=None)  # (G,) bool, True = visible

    def __post_init__(self):
        if self.vis_mask is None:
            object.__setattr__(self, "vis_mask", np.ones(self.centers.shape[0], dtype=bool))

    @property
    def g(self) -> int:
        return self.centers.shape[0]

    @property
    def k(self) -> int:
        return self.patches.shape[1]

    @property
    def n_masked(self) -> int:
        return int((~self.vis_mask).sum())


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) coordinate array, got shape {pts.shape}")
    return pts


def fps(points, g: int, start: int = 0) -> np.ndarray:
    """Farthest point sampling. Returns ``g`` indices, ties resolved to the lowest index."""
    pts = _as_points(points)
    n = pts.shape[0]
    if n == 0:
        raise ValueError("fps needs a nonempty point set")
    if not 1 <= g <= n:
        raise ValueError(f"fps needs 1 <= g <= N, got g={g}, N={n}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range for N={n}")

    selected = np.empty(g, dtype=np.int64)
    selected[0] = start
    min_d = np.full(n, np.inf)
    taken = np.zeros(n, dtype=bool)
    taken[start] = True
    for i in range(1, g):
        d = ((pts - pts[selected[i - 1]]) ** 2).sum(axis=1)
        np.minimum(min_d, d, out=min_d)
        cand = np.where(taken, -np.inf, min_d)
        nxt = int(np.argmax(cand))
        selected[i] = nxt
        taken[nxt] = True
    return selected


def knn(points, center, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points to ``center``, nearest first, ties by index."""
    pts = _as_points(points)
    if not 1 <= k <= pts.shape[0]:
        raise ValueError(f"knn needs 1 <= k <= N, got k={k}, N={pts.shape[0]}")
    c = np.asarray(center, dtype=np.float64).reshape(3)
    d = ((pts - c) ** 2).sum(axis=1)
    return np.argsort(d, kind="stable")[:k]


def knn_batch(points, centers, k: int) -> np.ndarray:
    """Row-wise :func:`knn` for many centers at once."""
    pts = _as_points(points)
    ctr = _as_points(centers)
    if not 1 <= k <= pts.shape[0]:
        raise ValueError(f"knn needs 1 <= k <= N, got k={k}, N={pts.shape[0]}")
    d = ((pts[None, :, :] - ctr[:, None, :]) ** 2).sum(axis=2)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def patchify(cloud: PointCloud | np.ndarray, g: int, k: int, start: int = 0) -> PatchSet:
    """Group a cloud into ``g`` FPS-centered patches of ``k`` neighbours, center-relative.

    For float32 input the offsets are computed exactly, so ``patches + centers``
    reproduces the source coordinates bit for bit.
    """
    pts = _as_points(cloud.points if isinstance(cloud, PointCloud) else cloud)
    center_idx = fps(pts, g, start)
    centers = pts[center_idx]
    idx = knn_batch(pts, centers, k)
    patches = pts[idx] - centers[:, None, :]
    return PatchSet(centers=centers, patches=patches, source_indices=idx)


def n_masked_for(ratio: float, g: int) -> int:
    # round half up
    return int(math.floor(ratio * g + 0.5))


def mask_split(ps: PatchSet, spec: MaskSpec) -> PatchSet:
    if not (0.0 <= spec.ratio < 1.0):
        raise ValueError(f"mask ratio must lie in [0, 1), got {spec.ratio}")
    n_mask = min(n_masked_for(spec.ratio, ps.g), ps.g - 1)
    rng = np.random.default_rng(spec.seed)
    masked = rng.choice(ps.g, size=n_mask, replace=False)
    vis = np.ones(ps.g, dtype=bool)
    vis[masked] = False
    return replace(ps, vis_mask=vis)


def chamfer(a, b) -> float:
    """Symmetric mean squared nearest-neighbour distance between two point sets."""
    pa = _as_points(a)
    pb = _as_points(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise ValueError("chamfer needs two nonempty point sets")
    d = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    pts = np.asarray(cloud.points, dtype=np.float64)
    centered = pts - pts.mean(axis=0)
    scale = np.sqrt((centered**2).sum(axis=1)).max()
    if scale > 0:
        centered = centered / scale
    return PointCloud(centered, cloud.domain, cloud.id)

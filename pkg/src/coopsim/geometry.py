"""Point-set primitives: poses, frame transforms, voxel pooling, FPS and kNN.

All functions are pure and operate on numpy arrays; the differentiable
counterpart of feature max-pooling lives in :mod:`coopsim.model`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

WORLD_FRAME = 0xFFFFFFFF


def wrap_angle(a: float) -> float:
    """Normalize to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation().T + self.translation

    def from_world(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.translation) @ self.rotation()


@dataclass
class PointCloud:
    points: np.ndarray
    features: np.ndarray | None = None
    frame: int = WORLD_FRAME

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != len(self.points):
                raise ValueError("features must be (N, D) with one row per point")

    def __len__(self) -> int:
        return len(self.points)


def transform_to_frame(cloud: PointCloud, src: Pose, dst: Pose, frame: int | None = None) -> PointCloud:
    """Re-express points given in ``src`` coordinates in ``dst`` coordinates."""
    pts = dst.from_world(src.to_world(cloud.points))
    return PointCloud(pts, cloud.features, cloud.frame if frame is None else frame)


def relative_points(points: np.ndarray, src: Pose, dst: Pose) -> np.ndarray:
    return dst.from_world(src.to_world(np.asarray(points, dtype=np.float64)))


def voxel_keys(points: np.ndarray, voxel_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Cell index per point (floor division, boundary goes to the higher cell).

    Returns ``(segment_ids, n_cells)`` with segment ids ordered by first
    occurrence of the cell in lexicographic cell order, so the result does not
    depend on input order.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    cells = np.floor(np.asarray(points) / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
    return inverse.reshape(-1), len(uniq)


def voxel_centroid_pool(cloud: PointCloud, voxel_size: float) -> PointCloud:
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)), None if cloud.features is None else np.zeros((0, cloud.features.shape[1])), cloud.frame)
    seg, n = voxel_keys(cloud.points, voxel_size)
    counts = np.bincount(seg, minlength=n).astype(np.float64)
    cent = np.stack([np.bincount(seg, weights=cloud.points[:, k], minlength=n) for k in range(3)], axis=1)
    cent /= counts[:, None]
    feats = None
    if cloud.features is not None:
        feats = np.zeros((n, cloud.features.shape[1]))
        np.add.at(feats, seg, cloud.features)
        feats /= counts[:, None]
    return PointCloud(cent, feats, cloud.frame)


def voxel_feature_max_pool(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Centroid coordinates and elementwise-max features per occupied cell."""
    if cloud.features is None:
        raise ValueError("voxel_feature_max_pool requires per-point features")
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, cloud.features.shape[1])), cloud.frame)
    seg, n = voxel_keys(cloud.points, voxel_size)
    counts = np.bincount(seg, minlength=n).astype(np.float64)
    cent = np.stack([np.bincount(seg, weights=cloud.points[:, k], minlength=n) for k in range(3)], axis=1)
    cent /= counts[:, None]
    feats = np.full((n, cloud.features.shape[1]), -np.inf)
    np.maximum.at(feats, seg, cloud.features)
    return PointCloud(cent, feats, cloud.frame)


def calibrate_voxel_size(points: np.ndarray, target: int, lo: float = 1e-3, hi: float | None = None,
                         iters: int = 60) -> float:
    """Bisect the voxel edge so that centroid pooling leaves ~``target`` points."""
    points = np.asarray(points, dtype=np.float64)
    if hi is None:
        hi = float(np.ptp(points, axis=0).max()) * 2 + 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        _, n = voxel_keys(points, mid)
        if n > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def farthest_point_sample(points: np.ndarray, k: int, seed_index: int | None = None) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index.

    ``seed_index`` defaults to the point nearest the origin (the sensor).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"farthest_point_sample: need 1 <= k <= N, got k={k}, N={n}")
    if seed_index is None:
        seed_index = int(np.argmin((pts * pts).sum(axis=1)))
    picked = np.empty(k, dtype=np.int64)
    picked[0] = seed_index
    dist = ((pts - pts[seed_index]) ** 2).sum(axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        picked[i] = nxt
        dist = np.minimum(dist, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return picked


def batched_fps(points: np.ndarray, k: int) -> np.ndarray:
    """FPS on a (B, N, 3) stack, each seeded at its point nearest the origin."""
    pts = np.asarray(points, dtype=np.float64)
    b, n, _ = pts.shape
    if not 1 <= k <= n:
        raise ValueError(f"farthest_point_sample: need 1 <= k <= N, got k={k}, N={n}")
    rows = np.arange(b)
    picked = np.empty((b, k), dtype=np.int64)
    cur = np.argmin((pts * pts).sum(axis=2), axis=1)
    picked[:, 0] = cur
    dist = ((pts - pts[rows, cur][:, None, :]) ** 2).sum(axis=2)
    for i in range(1, k):
        cur = np.argmax(dist, axis=1)
        picked[:, i] = cur
        dist = np.minimum(dist, ((pts - pts[rows, cur][:, None, :]) ** 2).sum(axis=2))
    return picked


def pairwise_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[..., :, None, :] - b[..., None, :, :]
    return (diff * diff).sum(axis=-1)


def knn(query: np.ndarray, reference: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest references per query, ties to the lower index.

    Works on (M, 3)/(N, 3) or batched (B, M, 3)/(B, N, 3) inputs.
    """
    ref = np.asarray(reference, dtype=np.float64)
    if k > ref.shape[-2] or k < 1:
        raise ValueError(f"knn: need 1 <= k <= |reference|, got k={k}, |reference|={ref.shape[-2]}")
    d = pairwise_sq_dist(np.asarray(query, dtype=np.float64), ref)
    if k == ref.shape[-2]:
        return np.argsort(d, axis=-1, kind="stable")
    # partition then stable-sort a widened candidate window so boundary ties resolve by index
    part = np.argpartition(d, k - 1, axis=-1)[..., :k]
    kth = np.take_along_axis(d, part, axis=-1).max(axis=-1, keepdims=True)
    cand_mask = d <= kth
    if np.all(cand_mask.sum(axis=-1) == k):
        cand = part
        order = np.lexsort((cand, np.take_along_axis(d, cand, axis=-1)), axis=-1)
        return np.take_along_axis(cand, order, axis=-1)
    return np.argsort(d, axis=-1, kind="stable")[..., :k]


# ---------------------------------------------------------------- CPCD dump format

CLOUD_MAGIC = b"CPCD"
CLOUD_VERSION = 1
_CLOUD_HEADER = struct.Struct("<4sHIHI")


def encode_cloud(cloud: PointCloud) -> bytes:
    n = len(cloud)
    d = 0 if cloud.features is None else cloud.features.shape[1]
    head = _CLOUD_HEADER.pack(CLOUD_MAGIC, CLOUD_VERSION, n, d, cloud.frame & 0xFFFFFFFF)
    body = np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()
    if d:
        body += np.ascontiguousarray(cloud.features, dtype="<f4").tobytes()
    return head + body


def decode_cloud(buf: bytes, offset: int = 0) -> tuple[PointCloud, int]:
    """Parse one CPCD record; returns the cloud and the offset just past it."""
    magic, version, n, d, frame = _CLOUD_HEADER.unpack_from(buf, offset)
    if magic != CLOUD_MAGIC:
        raise ValueError("not a CPCD record")
    if version != CLOUD_VERSION:
        raise ValueError(f"unsupported CPCD version {version}")
    pos = offset + _CLOUD_HEADER.size
    pts = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=pos).reshape(n, 3).astype(np.float64)
    pos += 12 * n
    feats = None
    if d:
        feats = np.frombuffer(buf, dtype="<f4", count=n * d, offset=pos).reshape(n, d).astype(np.float64)
        pos += 4 * n * d
    return PointCloud(pts, feats, frame), pos

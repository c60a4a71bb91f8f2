"""Planar ray-cast LiDAR with hard occlusion and height-tagged returns."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import PointCloud, farthest_point_sample, voxel_centroid_pool
from .world import WorldState, rect_corners, static_id

N_BEAMS = 1024
MAX_RANGE = 60.0


@dataclass
class Scan:
    cloud: PointCloud          # hits in the sensor frame, (x, y, h)
    hit_ids: np.ndarray        # object id per hit (vehicle id, or negative static id)


def _obstacles(world: WorldState, exclude: int, origin, max_range: float):
    """Edges (S, 2, 2), owner id (S,), height (S,) of every rectangle in range."""
    xs, ys, hl, hw, yaw, ids, hs = [], [], [], [], [], [], []
    ox, oy = origin
    for vid, v in world.vehicles.items():
        if vid == exclude:
            continue
        reach = max_range + math.hypot(*v.half_extents)
        if abs(v.pose.x - ox) > reach or abs(v.pose.y - oy) > reach:
            continue
        xs.append(v.pose.x); ys.append(v.pose.y); hl.append(v.half_extents[0]); hw.append(v.half_extents[1])
        yaw.append(v.pose.yaw); ids.append(vid); hs.append(v.height)
    for j, r in enumerate(world.statics):
        reach = max_range + math.hypot(r.half_length, r.half_width)
        if abs(r.x - ox) > reach or abs(r.y - oy) > reach:
            continue
        xs.append(r.x); ys.append(r.y); hl.append(r.half_length); hw.append(r.half_width)
        yaw.append(r.yaw); ids.append(static_id(j)); hs.append(r.height)
    if not xs:
        return np.zeros((0, 2, 2)), np.zeros(0, np.int64), np.zeros(0)
    corners = rect_corners(np.array(xs), np.array(ys), np.array(hl), np.array(hw), np.array(yaw))  # (R, 4, 2)
    nxt = np.roll(corners, -1, axis=1)
    edges = np.stack([corners, nxt], axis=2).reshape(-1, 2, 2)
    owner = np.repeat(np.array(ids, dtype=np.int64), 4)
    height = np.repeat(np.array(hs), 4)
    return edges, owner, height


def raycast(world: WorldState, vehicle_id: int, n_beams: int = N_BEAMS, max_range: float = MAX_RANGE) -> Scan:
    """First-hit returns of ``n_beams`` equiangular rays from the vehicle centre."""
    v = world.vehicles[vehicle_id]
    origin = np.array([v.pose.x, v.pose.y])
    local = 2 * np.pi * np.arange(n_beams) / n_beams
    ang = local + v.pose.yaw
    d = np.stack([np.cos(ang), np.sin(ang)], axis=1)                    # (R, 2)
    edges, owner, height = _obstacles(world, vehicle_id, origin, max_range)
    if len(edges) == 0:
        return Scan(PointCloud(np.zeros((0, 3)), frame=vehicle_id), np.zeros(0, np.int64))
    p = edges[:, 0] - origin                                            # (S, 2)
    e = edges[:, 1] - edges[:, 0]
    denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]   # cross(d, e)
    num_t = p[None, :, 0] * e[None, :, 1] - p[None, :, 1] * e[None, :, 0]   # cross(p, e)
    num_s = p[None, :, 0] * d[:, None, 1] - p[None, :, 1] * d[:, None, 0]   # cross(p, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num_t / denom
        s = num_s / denom
    valid = (np.abs(denom) > 1e-12) & (s >= 0) & (s <= 1) & (t > 1e-9) & (t <= max_range)
    t = np.where(valid, t, np.inf)
    best = np.argmin(t, axis=1)
    dist = t[np.arange(n_beams), best]
    hit = np.isfinite(dist)
    r = dist[hit]
    pts = np.stack([r * np.cos(local[hit]), r * np.sin(local[hit]), height[best[hit]]], axis=1)
    return Scan(PointCloud(pts, frame=vehicle_id), owner[best[hit]])


def lidar_scan(world: WorldState, vehicle_id: int, n_beams: int = N_BEAMS, max_range: float = MAX_RANGE) -> PointCloud:
    return raycast(world, vehicle_id, n_beams, max_range).cloud


def preprocess(cloud: PointCloud, n_points: int, voxel_size: float = 0.5) -> np.ndarray:
    """Fixed-size (n_points, 3) encoder input from a raw scan.

    Voxel-pool the returns, then farthest-point sample down or cyclically
    repeat up to ``n_points``. An empty scan becomes a single sentinel point
    at the sensor origin.
    """
    pts = voxel_centroid_pool(cloud, voxel_size).points if len(cloud) else np.zeros((0, 3))
    if len(pts) == 0:
        pts = np.zeros((1, 3))
    if len(pts) > n_points:
        pts = pts[np.sort(farthest_point_sample(pts, n_points))]
    elif len(pts) < n_points:
        pts = pts[np.arange(n_points) % len(pts)]
    return pts

"""Planar multi-vehicle world: state containers, bicycle dynamics, collisions."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import Pose, wrap_angle

DT = 0.1
A_MAX = 3.0           # m/s^2 at full throttle
B_MAX = 8.0           # m/s^2 at full brake
DRAG = 0.1            # 1/s
STEER_MAX = math.radians(35.0)

CAR = dict(half_extents=(2.25, 0.9), height=1.5, wheelbase=2.7, kind="car")
TRUCK = dict(half_extents=(6.0, 1.25), height=3.5, wheelbase=7.0, kind="truck")


@dataclass
class VehicleState:
    pose: Pose
    speed: float
    wheelbase: float
    half_extents: tuple[float, float]
    height: float
    kind: str = "car"
    networked: bool = False
    route: np.ndarray | None = None       # fixed (M, 2) waypoints for scripted drivers
    role: str = "background"              # ego | occluder | collider | background | parked
    goal: tuple[int, ...] = ()            # lane-graph goal nodes for planner-driven vehicles
    target_speed: float = 5.56

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be non-negative")
        if min(self.half_extents) <= 0:
            raise ValueError("extents must be positive")

    @property
    def moving(self) -> bool:
        return self.role not in ("parked", "occluder")


@dataclass(frozen=True)
class Rect:
    """Static obstacle footprint."""
    x: float
    y: float
    half_length: float
    half_width: float
    yaw: float = 0.0
    height: float = 8.0

    @staticmethod
    def from_bounds(x0: float, x1: float, y0: float, y1: float, height: float = 8.0) -> "Rect":
        return Rect((x0 + x1) / 2, (y0 + y1) / 2, abs(x1 - x0) / 2, abs(y1 - y0) / 2, 0.0, height)


@dataclass
class TrafficLight:
    """Cyclic green -> yellow -> red controller for one approach group."""
    green: float
    yellow: float
    red: float
    offset: float = 0.0

    def state(self, t: float) -> str:
        cycle = self.green + self.yellow + self.red
        u = (t + self.offset) % cycle
        if u < self.green:
            return "green"
        if u < self.green + self.yellow:
            return "yellow"
        return "red"


@dataclass
class WorldState:
    time: float
    vehicles: dict[int, VehicleState]
    lights: dict[str, TrafficLight]
    lane_graph: object
    statics: list[Rect]
    ego_id: int
    goal_region: tuple[float, float, float, float]
    scenario: str = ""
    dt: float = DT
    plans: dict = field(default_factory=dict)
    blocked_nodes: frozenset = frozenset()
    blocked_edges: frozenset = frozenset()

    @property
    def ego(self) -> VehicleState:
        return self.vehicles[self.ego_id]

    def light_state(self, group: str | None) -> str:
        if group is None or group not in self.lights:
            return "green"
        return self.lights[group].state(self.time)

    def copy(self) -> "WorldState":
        w = copy.copy(self)
        w.vehicles = {k: replace(v) for k, v in self.vehicles.items()}
        w.plans = dict(self.plans)
        return w

    def in_goal(self, vid: int | None = None) -> bool:
        v = self.vehicles[self.ego_id if vid is None else vid]
        x0, x1, y0, y1 = self.goal_region
        return x0 <= v.pose.x <= x1 and y0 <= v.pose.y <= y1


# ---------------------------------------------------------------- dynamics

def bicycle_update(v: VehicleState, action, dt: float) -> VehicleState:
    throttle, brake, steer = (float(a) for a in action)
    accel = A_MAX * throttle - B_MAX * brake - DRAG * v.speed
    speed = max(0.0, v.speed + accel * dt)
    p = v.pose
    x = p.x + speed * math.cos(p.yaw) * dt
    y = p.y + speed * math.sin(p.yaw) * dt
    yaw = p.yaw
    if steer != 0.0:
        yaw = wrap_angle(p.yaw + speed / v.wheelbase * math.tan(steer * STEER_MAX) * dt)
    return replace(v, pose=Pose(x, y, p.z, yaw), speed=speed)


def step(world: WorldState, actions: dict, dt: float | None = None) -> WorldState:
    """Advance every vehicle; vehicles without an action coast (zero action)."""
    dt = world.dt if dt is None else dt
    out = world.copy()
    for vid, v in world.vehicles.items():
        if not v.moving:
            continue
        act = actions.get(vid, (0.0, 0.0, 0.0))
        lo, hi = np.array([0.0, 0.0, -1.0]), np.array([1.0, 1.0, 1.0])
        act = np.asarray(act, dtype=np.float64)
        if np.any(act < lo) or np.any(act > hi):
            raise ValueError(f"action {act} for vehicle {vid} outside valid ranges")
        out.vehicles[vid] = bicycle_update(v, act, dt)
    out.time = world.time + dt
    return out


# ---------------------------------------------------------------- geometry helpers

def rect_corners(x, y, hl, hw, yaw) -> np.ndarray:
    """(..., 4, 2) corners of oriented rectangles (vectorised over leading dims)."""
    x, y, hl, hw, yaw = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, hl, hw, yaw)))
    c, s = np.cos(yaw), np.sin(yaw)
    lx = np.stack([hl, hl, -hl, -hl], axis=-1)
    ly = np.stack([hw, -hw, -hw, hw], axis=-1)
    cx = x[..., None] + lx * c[..., None] - ly * s[..., None]
    cy = y[..., None] + lx * s[..., None] + ly * c[..., None]
    return np.stack([cx, cy], axis=-1)


def rects_overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Closed separating-axis test between corner arrays (..., 4, 2).

    Touching rectangles count as overlapping.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a, b = np.broadcast_arrays(a, b)
    hit = np.ones(a.shape[:-2], dtype=bool)
    for poly in (a, b):
        for i in (0, 1):
            edge = poly[..., i + 1, :] - poly[..., i, :]
            axis = np.stack([-edge[..., 1], edge[..., 0]], axis=-1)
            pa = (a * axis[..., None, :]).sum(-1)
            pb = (b * axis[..., None, :]).sum(-1)
            sep = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
            hit &= ~sep
    return hit


def vehicle_corners(v: VehicleState, inflate: float = 0.0) -> np.ndarray:
    hl, hw = v.half_extents
    return rect_corners(v.pose.x, v.pose.y, hl + inflate, hw + inflate, v.pose.yaw)


def static_corners(r: Rect, inflate: float = 0.0) -> np.ndarray:
    return rect_corners(r.x, r.y, r.half_length + inflate, r.half_width + inflate, r.yaw)


def static_id(i: int) -> int:
    """Statics are reported with negative ids: -1, -2, ..."""
    return -(i + 1)


def check_collision(world: WorldState) -> list[tuple[int, int]]:
    """Overlapping (id_a, id_b) pairs, a < b, where at least one side can move."""
    ids = sorted(world.vehicles)
    polys = {vid: vehicle_corners(world.vehicles[vid]) for vid in ids}
    pairs = []
    for i, a in enumerate(ids):
        va = world.vehicles[a]
        for b in ids[i + 1:]:
            vb = world.vehicles[b]
            if not (va.moving or vb.moving):
                continue
            reach = math.hypot(*va.half_extents) + math.hypot(*vb.half_extents)
            if abs(va.pose.x - vb.pose.x) > reach or abs(va.pose.y - vb.pose.y) > reach:
                continue
            if rects_overlap(polys[a], polys[b]):
                pairs.append((a, b))
    for j, r in enumerate(world.statics):
        sc = static_corners(r)
        reach_s = math.hypot(r.half_length, r.half_width)
        for a in ids:
            va = world.vehicles[a]
            if not va.moving:
                continue
            reach = reach_s + math.hypot(*va.half_extents)
            if abs(va.pose.x - r.x) > reach or abs(va.pose.y - r.y) > reach:
                continue
            if rects_overlap(polys[a], sc):
                pairs.append((static_id(j), a))
    return sorted(pairs)

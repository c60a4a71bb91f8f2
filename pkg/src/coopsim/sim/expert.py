"""Privileged rule-based driver: A* route, conflict check, pure pursuit, speed control.

The expert sees ground-truth poses and speeds of every vehicle (the fused,
privileged view), so it needs no perception.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lanes import NoRouteError
from .world import A_MAX, DRAG, STEER_MAX, VehicleState, WorldState, rect_corners, rects_overlap

TARGET_SPEED = 20 / 3.6   # 5.56 m/s


@dataclass(frozen=True)
class ExpertConfig:
    target_speed: float = TARGET_SPEED
    horizon: float = 4.0          # conflict look-ahead, s
    sample_dt: float = 0.1
    plan_accel: float = 2.0       # assumed acceleration of the "go" plan
    margin: float = 0.5           # total clearance between footprints, m
    stop_decel: float = 2.5       # comfortable deceleration toward stop lines
    kp: float = 0.5
    kb: float = 0.3
    replan_offtrack: float = 2.5  # m of lateral error before re-planning
    max_horizon: float = 12.0     # look-ahead cap while the plan borrows the oncoming lane


DEFAULT = ExpertConfig()


@dataclass(frozen=True)
class Path:
    xy: np.ndarray        # (M, 2)
    cum: np.ndarray       # (M,) arc length
    nodes: tuple = ()
    stops: tuple = ()     # (arc length of stop line, light group)
    opposing: tuple = ()  # (start, end) arc-length spans in the oncoming lane

    @staticmethod
    def from_xy(xy, nodes=(), stops=(), opposing=()) -> "Path":
        xy = np.asarray(xy, dtype=np.float64)
        if len(xy) > 1:
            keep = np.concatenate([[True], np.hypot(*np.diff(xy, axis=0).T) > 1e-9])
            xy = xy[keep]
        seg = np.hypot(*np.diff(xy, axis=0).T) if len(xy) > 1 else np.zeros(0)
        return Path(xy, np.concatenate([[0.0], np.cumsum(seg)]), tuple(nodes), tuple(stops), tuple(opposing))

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def project(self, x: float, y: float) -> tuple[float, float]:
        """(arc length of the closest point, distance to the path)."""
        if len(self.xy) == 1:
            return 0.0, math.hypot(x - self.xy[0, 0], y - self.xy[0, 1])
        a, b = self.xy[:-1], self.xy[1:]
        ab = b - a
        l2 = np.maximum((ab * ab).sum(1), 1e-12)
        u = np.clip(((x - a[:, 0]) * ab[:, 0] + (y - a[:, 1]) * ab[:, 1]) / l2, 0, 1)
        px, py = a[:, 0] + u * ab[:, 0], a[:, 1] + u * ab[:, 1]
        d = np.hypot(px - x, py - y)
        i = int(np.argmin(d))
        return float(self.cum[i] + u[i] * math.sqrt(l2[i])), float(d[i])

    def sample(self, s) -> tuple[np.ndarray, np.ndarray]:
        """Positions and headings at arc lengths ``s``; extrapolates past the end."""
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        if len(self.xy) == 1:
            return np.repeat(self.xy, len(s), 0), np.zeros(len(s))
        seg = np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.xy) - 2)
        d = self.xy[seg + 1] - self.xy[seg]
        yaw = np.arctan2(d[:, 1], d[:, 0])
        seglen = self.cum[seg + 1] - self.cum[seg]
        u = np.maximum((s - self.cum[seg]) / seglen, 0.0)   # > 1 extrapolates past the end
        pos = self.xy[seg] + u[:, None] * d
        return pos, yaw


@dataclass
class ExpertDecision:
    action: np.ndarray
    reason: str                  # go | conflict | light | no_route
    plan_xy: np.ndarray          # time-parameterised plan samples (T, 2)
    conflict_with: int | None = None


# ---------------------------------------------------------------- route

def blocked_for(world: WorldState, margin: float = 0.5, probe=(2.25, 0.9)):
    """Lane-graph nodes and edges a car cannot occupy because of static obstacles.

    Static obstacles are buildings and parked vehicles; the probe is a car
    footprint aligned with the node (or edge) heading.
    """
    g = world.lane_graph
    rects = [(r.x, r.y, r.half_length, r.half_width, r.yaw) for r in world.statics]
    rects += [(v.pose.x, v.pose.y, v.half_extents[0], v.half_extents[1], v.pose.yaw)
              for v in world.vehicles.values() if not v.moving]
    if not rects or len(g) == 0:
        return frozenset(), frozenset()
    R = np.array(rects)
    obst = rect_corners(R[:, 0], R[:, 1], R[:, 2] + margin / 2, R[:, 3] + margin / 2, R[:, 4])  # (O, 4, 2)
    reach = np.hypot(R[:, 2], R[:, 3]) + margin + math.hypot(*probe)

    def hits(xy, yaw):
        xy = np.atleast_2d(xy)
        yaw = np.atleast_1d(yaw)
        near = (np.abs(xy[:, None, 0] - R[None, :, 0]) <= reach) & (np.abs(xy[:, None, 1] - R[None, :, 1]) <= reach)
        out = np.zeros(len(xy), dtype=bool)
        for i in np.flatnonzero(near.any(1)):
            car = rect_corners(xy[i, 0], xy[i, 1], probe[0] + margin / 2, probe[1] + margin / 2, yaw[i])
            out[i] = rects_overlap(car[None], obst[near[i]]).any()
        return out

    xy, yaw = g.xy, g.yaw
    bn = set(np.flatnonzero(hits(xy, yaw)).tolist())
    be = set()
    for a, outs in g.edges.items():
        for b, _ in outs:
            pa, pb = xy[a], xy[b]
            d = pb - pa
            if np.hypot(*d) < 1e-9:
                continue
            eyaw = math.atan2(d[1], d[0])
            mids = pa + np.array([[0.25], [0.5], [0.75]]) * d
            if hits(mids, np.full(3, eyaw)).any():
                be.add((a, b))
    return frozenset(bn), frozenset(be)


def plan_route(world: WorldState, vid: int) -> Path:
    v = world.vehicles[vid]
    g = world.lane_graph
    start = g.nearest(v.pose.x, v.pose.y, v.pose.yaw)
    if start is None:
        raise NoRouteError(f"vehicle {vid} is off the lane graph")
    nodes = g.astar(start, v.goal, world.blocked_nodes - {start}, blocked_edges=world.blocked_edges)
    xy = g.path_xy(nodes)
    # start the polyline at the vehicle itself so pure pursuit joins smoothly
    xy = np.vstack([[v.pose.x, v.pose.y], xy])
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(xy, axis=0).T))])
    stops = tuple((float(cum[i + 1]), g.stop_group[n]) for i, n in enumerate(nodes) if n in g.stop_group)
    spans, start = [], None
    for i, n in enumerate(nodes):
        if n in g.opposing and start is None:
            start = float(cum[i])          # leaving the previous node toward the oncoming lane
        if n not in g.opposing and start is not None:
            spans.append((start, float(cum[i + 1])))
            start = None
    if start is not None:
        spans.append((start, float(cum[-1])))
    return Path.from_xy(xy, nodes, stops, spans)


def current_path(world: WorldState, vid: int, cfg: ExpertConfig = DEFAULT) -> Path:
    v = world.vehicles[vid]
    if v.route is not None:
        key = ("route", vid)
        if key not in world.plans:
            world.plans[key] = Path.from_xy(v.route)
        return world.plans[key]
    path = world.plans.get(vid)
    if path is not None:
        s, off = path.project(v.pose.x, v.pose.y)
        if off <= cfg.replan_offtrack:
            return path
    path = plan_route(world, vid)
    world.plans[vid] = path
    return path


# ---------------------------------------------------------------- control pieces

def pure_pursuit(v: VehicleState, path: Path, s0: float) -> float:
    look = max(4.0, 2.0 + 0.6 * v.speed)
    (tx, ty), = path.sample(s0 + look)[0]
    dx, dy = tx - v.pose.x, ty - v.pose.y
    ld = max(math.hypot(dx, dy), 1e-6)
    alpha = math.atan2(dy, dx) - v.pose.yaw
    delta = math.atan2(2.0 * v.wheelbase * math.sin(alpha), ld)
    return float(np.clip(delta / STEER_MAX, -1.0, 1.0))


def speed_control(speed: float, desired: float, cfg: ExpertConfig = DEFAULT) -> tuple[float, float]:
    """Proportional throttle with a drag feed-forward, proportional brake."""
    err = desired - speed
    if err >= -0.3:
        thr = DRAG * desired / A_MAX + cfg.kp * err
        return float(np.clip(thr, 0.0, 1.0)), 0.0
    return 0.0, float(np.clip(-err * cfg.kb, 0.0, 1.0))


def go_profile(v0: float, vmax: float, accel: float, t: np.ndarray) -> np.ndarray:
    """Distance covered at times ``t`` accelerating from ``v0`` up to ``vmax``."""
    if v0 >= vmax or accel <= 0:
        return v0 * t
    t_acc = (vmax - v0) / accel
    ta = np.minimum(t, t_acc)
    return v0 * ta + 0.5 * accel * ta ** 2 + np.maximum(t - t_acc, 0.0) * vmax


def forecast_conflict(world: WorldState, vid: int, path: Path, s0: float, cfg: ExpertConfig = DEFAULT,
                      s_cap: float | None = None):
    """First other vehicle whose constant-velocity forecast overlaps the go plan.

    Returns ``(other_id or None, plan_xy)``.
    """
    v = world.vehicles[vid]
    vmax = max(cfg.target_speed, v.target_speed)
    horizon = cfg.horizon
    reach = s0 + go_profile(v.speed, vmax, cfg.plan_accel, np.array([cfg.horizon]))[0]
    for a, b in path.opposing:
        if b > s0 and a <= reach:
            # commit to borrowing the oncoming lane only if the whole stretch is clear
            tt = np.arange(1, int(cfg.max_horizon / cfg.sample_dt) + 1) * cfg.sample_dt
            done = s0 + go_profile(v.speed, vmax, cfg.plan_accel, tt) >= b + v.half_extents[0]
            horizon = max(horizon, float(tt[np.argmax(done)]) + 1.0 if done.any() else cfg.max_horizon)
    horizon = min(horizon, cfg.max_horizon)
    t = np.arange(1, int(round(horizon / cfg.sample_dt)) + 1) * cfg.sample_dt
    s = s0 + go_profile(v.speed, vmax, cfg.plan_accel, t)
    if s_cap is not None:
        s = np.minimum(s, s_cap)
    pos, yaw = path.sample(s)
    m = cfg.margin / 2
    ego_c = rect_corners(pos[:, 0], pos[:, 1], v.half_extents[0] + m, v.half_extents[1] + m, yaw)  # (T, 4, 2)
    c, sn = math.cos(v.pose.yaw), math.sin(v.pose.yaw)
    reach_e = float(s[-1] - s0) + math.hypot(*v.half_extents) + 1.0
    ids, ox, oy, ohl, ohw, oyaw, ovx, ovy = [], [], [], [], [], [], [], []
    for oid in sorted(world.vehicles):
        if oid == vid:
            continue
        o = world.vehicles[oid]
        rx, ry = o.pose.x - v.pose.x, o.pose.y - v.pose.y
        if math.hypot(rx, ry) > reach_e + o.speed * cfg.horizon + math.hypot(*o.half_extents):
            continue
        ahead = rx * c + ry * sn
        dyaw = abs(math.remainder(o.pose.yaw - v.pose.yaw, 2 * math.pi))
        if ahead < 0 and dyaw < math.radians(60):
            continue  # followers behind are their own problem
        ids.append(oid)
        ox.append(o.pose.x); oy.append(o.pose.y)
        ohl.append(o.half_extents[0] + m); ohw.append(o.half_extents[1] + m); oyaw.append(o.pose.yaw)
        ovx.append(o.speed * math.cos(o.pose.yaw)); ovy.append(o.speed * math.sin(o.pose.yaw))
    if not ids:
        return None, pos
    ox, oy, ovx, ovy = (np.array(a) for a in (ox, oy, ovx, ovy))
    fx = ox[None, :] + t[:, None] * ovx[None, :]
    fy = oy[None, :] + t[:, None] * ovy[None, :]
    oc = rect_corners(fx, fy, np.array(ohl)[None, :], np.array(ohw)[None, :], np.array(oyaw)[None, :])  # (T, O, 4, 2)
    hit = rects_overlap(ego_c[:, None], oc)                                                         # (T, O)
    if not hit.any():
        return None, pos
    ti, oi = np.argwhere(hit)[0]
    return ids[oi], pos


def light_limit(world: WorldState, v: VehicleState, path: Path, s0: float, cfg: ExpertConfig = DEFAULT):
    """(speed cap, arc length of the stop point) imposed by the next non-green light."""
    for s_line, group in path.stops:
        state = world.light_state(group)
        if state == "green":
            continue
        d = s_line - s0 - v.half_extents[0]
        if d < -0.5:
            continue  # already past the line
        if state == "yellow" and d < v.speed ** 2 / (2 * 6.0):
            continue  # cannot stop in time: clear the junction
        return math.sqrt(2 * cfg.stop_decel * max(d - 0.5, 0.0)), s_line - v.half_extents[0]
    return math.inf, None


# ---------------------------------------------------------------- entry points

def expert_decision(world: WorldState, vid: int, cfg: ExpertConfig = DEFAULT, yield_to_traffic: bool = True) -> ExpertDecision:
    v = world.vehicles[vid]
    try:
        path = current_path(world, vid, cfg)
    except NoRouteError:
        return ExpertDecision(np.array([0.0, 1.0, 0.0]), "no_route", np.zeros((0, 2)))
    s0, _ = path.project(v.pose.x, v.pose.y)
    steer = pure_pursuit(v, path, s0)
    desired = v.target_speed if v.route is not None else cfg.target_speed
    if not yield_to_traffic:
        thr, brk = speed_control(v.speed, desired, cfg)
        return ExpertDecision(np.array([thr, brk, steer]), "go", np.zeros((0, 2)))
    cap, s_stop = light_limit(world, v, path, s0, cfg)
    other, plan_xy = forecast_conflict(world, vid, path, s0, cfg, s_cap=s_stop)
    if other is not None:
        return ExpertDecision(np.array([0.0, 1.0, steer]), "conflict", plan_xy, other)
    reason = "go"
    if cap < desired:
        desired = cap
        reason = "light"
    thr, brk = speed_control(v.speed, desired, cfg)
    if reason == "light" and desired < 0.05:
        thr, brk = 0.0, 1.0
    return ExpertDecision(np.array([thr, brk, steer]), reason, plan_xy)


def expert_action(world: WorldState, vid: int, cfg: ExpertConfig = DEFAULT) -> np.ndarray:
    """(throttle, brake, steer) of the privileged expert for vehicle ``vid``."""
    return expert_decision(world, vid, cfg).action

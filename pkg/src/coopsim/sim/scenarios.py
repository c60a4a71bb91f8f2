"""The three occlusion scenarios: layouts, spawning and occlusion verification.

Layouts (right-hand traffic, 3.5 m lanes, junction box |x|, |y| <= 7):

* ``left_turn``: the ego approaches northbound and turns left (west) on a
  permissive green. A truck parked in the southbound turn lane hides a
  southbound through vehicle that runs into the ego's turning path.
* ``overtaking``: a truck is broken down in the ego's northbound lane on a
  two-lane road; passing requires borrowing the oncoming lane, where a hidden
  oncoming vehicle approaches.
* ``red_light_violation``: the ego goes straight through a green while a
  queue of parked trucks in the adjacent turn lane hides an eastbound vehicle
  that runs its red light.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from ..geometry import Pose
from .expert import TARGET_SPEED, blocked_for
from .lanes import LaneGraph, arc, line
from .lidar import MAX_RANGE, N_BEAMS, raycast
from .world import CAR, TRUCK, Rect, TrafficLight, VehicleState, WorldState, rect_corners, rects_overlap

SCENARIO_VERSION = 1
KINDS = ("overtaking", "left_turn", "red_light_violation")
LANE = 3.5
EGO, OCCLUDER, COLLIDER = 0, 1, 2
MIN_NEIGHBOR_RETURNS = 5

# default collider speed ranges per scenario, m/s
COLLIDER_SPEEDS = {"overtaking": (6.0, 9.0), "left_turn": (6.0, 8.0), "red_light_violation": (7.0, 10.0)}


class ScenarioError(RuntimeError):
    pass


@dataclass
class ScenarioConfig:
    kind: str
    traffic_density: int = 2
    spawn_jitter: float = 3.0
    collider_speed: float = 7.0
    seed: int = 0
    accident_enabled: bool = True
    traffic_seed: int | None = None   # background traffic; defaults to ``seed``

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; expected one of {KINDS}")
        if self.traffic_density < 0:
            raise ValueError("traffic_density must be >= 0")
        if self.collider_speed < 0 or self.spawn_jitter < 0:
            raise ValueError("collider_speed and spawn_jitter must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def bg_seed(self) -> int:
        return self.seed if self.traffic_seed is None else self.traffic_seed


@dataclass
class Layout:
    graph: LaneGraph
    statics: list
    lights: dict
    goal_region: tuple
    goal_heading: float


# ---------------------------------------------------------------- layouts

def _chain(g: LaneGraph, *names):
    for a, b in zip(names[:-1], names[1:]):
        g.join(a, b)


def _straight_approach(g: LaneGraph, prefix: str, start, stop, box_end, end, group: str | None):
    g.add_lane(prefix + "_app", line(*start, *stop), stop_group=group)
    g.add_lane(prefix + "_box", line(*stop, *box_end))
    g.add_lane(prefix + "_exit", line(*box_end, *end))
    _chain(g, prefix + "_app", prefix + "_box", prefix + "_exit")


def _ew_roads(g: LaneGraph, far: float = 90.0):
    for name, y in (("eb_in", -1.75), ("eb_out", -5.25)):
        _straight_approach(g, name, (-far, y), (-7, y), (7, y), (far, y), "EW")
    for name, y in (("wb_in", 1.75), ("wb_out", 5.25)):
        _straight_approach(g, name, (far, y), (7, y), (-7, y), (-far, y), "EW")


def _lights():
    return {"NS": TrafficLight(green=90.0, yellow=3.0, red=30.0),
            "EW": TrafficLight(green=27.0, yellow=3.0, red=93.0, offset=93.0)}


@lru_cache(maxsize=None)
def build_layout(kind: str) -> Layout:
    g = LaneGraph(spacing=2.0)
    if kind == "left_turn":
        g.add_lane("nb_app", line(1.75, -90, 1.75, -7), stop_group="NS")
        g.add_lane("nb_turn", arc(-7, -7, 8.75, 0.0, math.pi / 2))
        _ew_roads(g)
        g.join("nb_app", "nb_turn")
        g.join("nb_turn", "wb_in_exit")
        _straight_approach(g, "sb_st", (-5.25, 90), (-5.25, 7), (-5.25, -7), (-5.25, -90), "NS")
        g.add_lane("sb_left_app", line(-1.75, 90, -1.75, 7), stop_group="NS")
        g.add_lane("sb_in_exit", line(-1.75, -7, -1.75, -90))
        statics = [Rect.from_bounds(0.5, 60, 8.5, 60), Rect.from_bounds(-60, -8.5, 8.5, 60),
                   Rect.from_bounds(-60, -8.5, -60, -8.5), Rect.from_bounds(4.5, 60, -60, -8.5)]
        return Layout(g, statics, _lights(), (-34.0, -24.0, 0.0, 7.0), math.pi)
    if kind == "red_light_violation":
        for name, x in (("nb_out", 5.25), ("nb_in", 1.75)):
            _straight_approach(g, name, (x, -90), (x, -7), (x, 7), (x, 90), "NS")
        for name, x in (("sb_out", -5.25), ("sb_in", -1.75)):
            _straight_approach(g, name, (x, 90), (x, 7), (x, -7), (x, -90), "NS")
        _ew_roads(g)
        c = 14.0
        statics = [Rect.from_bounds(c, 60, c, 60), Rect.from_bounds(-60, -c, c, 60),
                   Rect.from_bounds(-60, -c, -60, -c), Rect.from_bounds(c, 60, -60, -c)]
        return Layout(g, statics, _lights(), (3.5, 7.0, 25.0, 35.0), math.pi / 2)
    if kind == "overtaking":
        far = 120.0
        nb = g.add_lane("nb", line(1.75, -far, 1.75, far))
        ps = g.add_lane("nb_pass", line(-1.75, -far, -1.75, far), cost_scale=1.5, opposing=True)
        g.add_lane("sb", line(-1.75, far, -1.75, -far))
        for shift in (4, 6):   # 8 m and 12 m lane changes
            for i in range(len(nb) - shift):
                g.add_edge(nb[i], ps[i + shift])
                g.add_edge(ps[i], nb[i + shift])
        statics = []
        for y0 in (-100, -55, -10, 35, 80):
            statics.append(Rect.from_bounds(6.0, 40.0, y0, y0 + 30))
            statics.append(Rect.from_bounds(-40.0, -6.0, y0 + 10, y0 + 40))
        return Layout(g, statics, {}, (0.0, 3.5, 20.0, 30.0), math.pi / 2)
    raise ValueError(f"unknown scenario kind {kind!r}")


def lane_pose(g: LaneGraph, lane: str, s: float) -> Pose:
    """Pose at arc length ``s`` along a named lane (negative s counts from the end)."""
    ids = g.lanes[lane]
    xy = g.path_xy(ids)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(xy, axis=0).T))])
    if s < 0:
        s = cum[-1] + s
    s = float(np.clip(s, 0.0, cum[-1]))
    i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(xy) - 2))
    u = (s - cum[i]) / (cum[i + 1] - cum[i])
    p = xy[i] + u * (xy[i + 1] - xy[i])
    d = xy[i + 1] - xy[i]
    return Pose(float(p[0]), float(p[1]), 0.0, math.atan2(d[1], d[0]))


def lane_end(g: LaneGraph, lane: str) -> tuple[int, ...]:
    return (g.lanes[lane][-1],)


def lane_xy(g: LaneGraph, *lanes) -> np.ndarray:
    return np.vstack([g.path_xy(g.lanes[n]) for n in lanes])


def goal_nodes(layout: Layout) -> tuple[int, ...]:
    g = layout.graph
    x0, x1, y0, y1 = layout.goal_region
    xy, yaw = g.xy, g.yaw
    inside = (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)
    aligned = np.abs((yaw - layout.goal_heading + np.pi) % (2 * np.pi) - np.pi) < math.radians(30)
    return tuple(int(i) for i in np.flatnonzero(inside & aligned))


def _vehicle(pose: Pose, speed: float, spec: dict, **kw) -> VehicleState:
    return VehicleState(pose=pose, speed=float(speed), wheelbase=spec["wheelbase"],
                        half_extents=spec["half_extents"], height=spec["height"], kind=spec["kind"], **kw)


def _time_to_cover(dist: float, v0: float, target: float = TARGET_SPEED, dt: float = 0.1) -> float:
    """Time for the expert-style speed controller to cover ``dist`` metres."""
    from .expert import speed_control
    from .world import A_MAX, B_MAX, DRAG
    s, v, t = 0.0, v0, 0.0
    while s < dist and t < 120:
        thr, brk = speed_control(v, target)
        v = max(0.0, v + (A_MAX * thr - B_MAX * brk - DRAG * v) * dt)
        s += v * dt
        t += dt
    return t


# ---------------------------------------------------------------- scene placement

def _place_core(kind: str, layout: Layout, cfg: ScenarioConfig, rng: np.random.Generator):
    """Ego, occluder, parked extras and the collider. Returns (vehicles, parked_extra_slots)."""
    g = layout.graph
    j = cfg.spawn_jitter
    goals = goal_nodes(layout)
    veh: dict[int, VehicleState] = {}
    extra = []   # additional parked vehicles offered to the background pool
    lead = rng.uniform(-0.4, 0.4)   # collider timing offset, s
    vc = cfg.collider_speed

    if kind == "left_turn":
        ego_y = -26.0 - rng.uniform(0, j)
        v0 = 5.0
        veh[EGO] = _vehicle(Pose(1.75, ego_y, 0, math.pi / 2), v0, CAR, role="ego", goal=goals)
        ty = 7 + 1.5 + TRUCK["half_extents"][0] + rng.uniform(0, j)
        veh[OCCLUDER] = _vehicle(Pose(-1.75, ty, 0, -math.pi / 2), 0.0, TRUCK, role="occluder", networked=True)
        extra.append(("sb_left_app", Pose(-1.75, ty + 6 + 1.0 + 2.25, 0, -math.pi / 2)))
        # conflict point where the turning path crosses the southbound through lane
        a = math.acos((-5.25 + 7) / 8.75)
        dist = (-7 - ego_y) + 8.75 * a
        yc = -7 + 8.75 * math.sin(a)
        t_e = _time_to_cover(dist, v0)
        if cfg.accident_enabled:
            y0 = yc + vc * (t_e + lead)
            route = lane_xy(g, "sb_st_app", "sb_st_box", "sb_st_exit")
            route = route[route[:, 1] <= y0 + 1e-9]
            route = np.vstack([[-5.25, y0], route])
            veh[COLLIDER] = _vehicle(Pose(-5.25, y0, 0, -math.pi / 2), vc, CAR, role="collider", route=route,
                                     target_speed=vc)
    elif kind == "red_light_violation":
        ego_y = -25.0 - rng.uniform(0, j)
        v0 = 5.0
        veh[EGO] = _vehicle(Pose(5.25, ego_y, 0, math.pi / 2), v0, CAR, role="ego", goal=goals)
        hl = TRUCK["half_extents"][0]
        t1 = -8.5 - hl - rng.uniform(0, 1.0)
        veh[OCCLUDER] = _vehicle(Pose(1.75, t1, 0, math.pi / 2), 0.0, TRUCK, role="occluder", networked=True)
        t2 = t1 - 2 * hl - 0.8
        veh[3] = _vehicle(Pose(1.75, t2, 0, math.pi / 2), 0.0, TRUCK, role="parked",
                          networked=bool(rng.random() < 0.5))
        extra.append(("nb_in_app", Pose(1.75, t2 - hl - 1.0 - 2.25, 0, math.pi / 2)))
        dist = -5.25 - ego_y
        t_e = _time_to_cover(dist, v0)
        if cfg.accident_enabled:
            x0 = 5.25 - vc * (t_e + lead)
            route = lane_xy(g, "eb_out_app", "eb_out_box", "eb_out_exit")
            route = route[route[:, 0] >= x0 - 1e-9]
            route = np.vstack([[x0, -5.25], route])
            veh[COLLIDER] = _vehicle(Pose(x0, -5.25, 0, 0.0), vc, CAR, role="collider", route=route, target_speed=vc)
    elif kind == "overtaking":
        ty = rng.uniform(-j, j)
        veh[OCCLUDER] = _vehicle(Pose(1.75, ty, 0, math.pi / 2), 0.0, TRUCK, role="occluder", networked=True)
        gap = 7.0 + rng.uniform(0, j)
        ego_y = ty - TRUCK["half_extents"][0] - gap - CAR["half_extents"][0]
        veh[EGO] = _vehicle(Pose(1.75, ego_y, 0, math.pi / 2), 0.0, CAR, role="ego", goal=goals)
        t_e = _time_to_cover(ty - ego_y + 1.0, 0.0)
        if cfg.accident_enabled:
            y0 = ty + vc * (t_e + lead) + 2.0
            route = lane_xy(g, "sb")
            route = route[route[:, 1] <= y0 + 1e-9]
            route = np.vstack([[-1.75, y0], route])
            veh[COLLIDER] = _vehicle(Pose(-1.75, y0, 0, -math.pi / 2), vc, CAR, role="collider", route=route,
                                     target_speed=vc)
    return veh, extra


def _background_slots(kind: str, layout: Layout, veh: dict, extra: list, rng: np.random.Generator):
    """Candidate background vehicles as (pose, speed, goal_lane or None for parked)."""
    ego = veh[EGO]
    ex, ey = ego.pose.x, ego.pose.y
    col = veh.get(COLLIDER)
    slots = []
    for lane, pose in extra:
        slots.append((pose, 0.0, None))
    if kind == "left_turn":
        slots += [
            (Pose(1.75, ey - 12 - rng.uniform(0, 4), 0, math.pi / 2), ego.speed, "wb_in_exit"),
            (Pose(-5.25, (col.pose.y + 25 + rng.uniform(0, 15)) if col else rng.uniform(20, 70), 0, -math.pi / 2),
             TARGET_SPEED, "sb_st_exit"),
            (Pose(-9.75, -1.75, 0, 0.0), 0.0, "eb_in_exit"),
            (Pose(9.75, 1.75, 0, math.pi), 0.0, "wb_in_exit"),
            (Pose(9.75, 5.25, 0, math.pi), 0.0, "wb_out_exit"),
            (Pose(-9.75, -5.25, 0, 0.0), 0.0, "eb_out_exit"),
            (Pose(1.75, ey - 26 - rng.uniform(0, 4), 0, math.pi / 2), ego.speed, "wb_in_exit"),
        ]
    elif kind == "red_light_violation":
        slots += [
            (Pose(5.25, ey - 12 - rng.uniform(0, 4), 0, math.pi / 2), ego.speed, "nb_out_exit"),
            (Pose(-5.25, 40 + rng.uniform(0, 30), 0, -math.pi / 2), TARGET_SPEED, "sb_out_exit"),
            (Pose(9.75, 1.75, 0, math.pi), 0.0, "wb_in_exit"),
            (Pose(-9.75, -1.75, 0, 0.0), 0.0, "eb_in_exit"),
            (Pose(9.75, 5.25, 0, math.pi), 0.0, "wb_out_exit"),
            (Pose(-1.75, 30 + rng.uniform(0, 30), 0, -math.pi / 2), TARGET_SPEED, "sb_in_exit"),
        ]
    elif kind == "overtaking":
        ty = veh[OCCLUDER].pose.y
        ahead = (col.pose.y if col else ty + 25) + 25 + rng.uniform(0, 20)
        slots += [
            (Pose(1.75, ey - 10 - rng.uniform(0, 4), 0, math.pi / 2), 0.0, "nb"),
            (Pose(-1.75, ahead, 0, -math.pi / 2), TARGET_SPEED, "sb"),
            (Pose(1.75, ty + 15 + rng.uniform(0, 10), 0, math.pi / 2), TARGET_SPEED, "nb"),
            (Pose(-1.75, ey - 20 - rng.uniform(0, 10), 0, -math.pi / 2), TARGET_SPEED, "sb"),
            (Pose(-1.75, ty + 90, 0, -math.pi / 2), TARGET_SPEED, "sb"),
        ]
    return slots


def _overlaps_any(v: VehicleState, others, gap: float = 1.0) -> bool:
    c = rect_corners(v.pose.x, v.pose.y, v.half_extents[0] + gap, v.half_extents[1] + gap, v.pose.yaw)
    for o in others:
        oc = rect_corners(o.pose.x, o.pose.y, o.half_extents[0], o.half_extents[1], o.pose.yaw)
        if rects_overlap(c, oc):
            return True
    return False


def occlusion_report(world: WorldState, collider: int = COLLIDER, n_beams: int = N_BEAMS,
                     max_range: float = MAX_RANGE) -> tuple[int, dict[int, int]]:
    """(ego returns on the collider, {networked neighbour id: returns on the collider})."""
    ego_hits = int((raycast(world, world.ego_id, n_beams, max_range).hit_ids == collider).sum())
    nbr = {}
    for vid, v in sorted(world.vehicles.items()):
        if vid in (world.ego_id, collider) or not v.networked:
            continue
        nbr[vid] = int((raycast(world, vid, n_beams, max_range).hit_ids == collider).sum())
    return ego_hits, nbr


def spawn_scenario(cfg: ScenarioConfig, max_tries: int = 25) -> WorldState:
    """Deterministic world for ``cfg``.

    With an accident enabled, the collider is verified by ray casting to be
    hidden from the ego and seen by at least one networked vehicle; failing
    draws are re-sampled from the same seeded stream.
    """
    layout = build_layout(cfg.kind)
    rng = np.random.default_rng([cfg.seed, SCENARIO_VERSION])
    trng = np.random.default_rng([cfg.bg_seed, SCENARIO_VERSION, 1])
    for _ in range(max_tries):
        veh, extra = _place_core(cfg.kind, layout, cfg, rng)
        slots = _background_slots(cfg.kind, layout, veh, extra, trng)
        order = trng.permutation(len(slots))
        nid = max(max(veh), COLLIDER) + 1   # the collider id stays reserved without an accident
        g = layout.graph
        for k in order[: cfg.traffic_density]:
            pose, speed, goal_lane = slots[k]
            networked = bool(trng.random() < 0.5)
            if goal_lane is None:
                v = _vehicle(pose, 0.0, CAR, role="parked", networked=networked)
            else:
                v = _vehicle(pose, speed, CAR, role="background", networked=networked, goal=lane_end(g, goal_lane))
            if _overlaps_any(v, veh.values()):
                continue
            veh[nid] = v
            nid += 1
        world = WorldState(time=0.0, vehicles=veh, lights=layout.lights, lane_graph=g,
                           statics=layout.statics, ego_id=EGO, goal_region=layout.goal_region, scenario=cfg.kind)
        if cfg.accident_enabled:
            ego_hits, nbr = occlusion_report(world)
            if ego_hits > 0 or max(nbr.values(), default=0) < MIN_NEIGHBOR_RETURNS:
                continue
        world.blocked_nodes, world.blocked_edges = blocked_for(world)
        return world
    raise ScenarioError(f"could not place a valid {cfg.kind} scene for seed {cfg.seed} after {max_tries} tries")


def sample_configs(kind: str, n: int, seed: int, accident: bool = True, density: tuple[int, int] = (1, 4),
                   spawn_jitter: float = 3.0) -> list[ScenarioConfig]:
    """A frozen, seed-determined list of scenario configurations."""
    rng = np.random.default_rng([seed, SCENARIO_VERSION, KINDS.index(kind)])
    lo, hi = COLLIDER_SPEEDS[kind]
    out = []
    for _ in range(n):
        out.append(ScenarioConfig(kind=kind, traffic_density=int(rng.integers(density[0], density[1] + 1)),
                                  spawn_jitter=spawn_jitter, collider_speed=round(float(rng.uniform(lo, hi)), 3),
                                  seed=int(rng.integers(0, 2 ** 31 - 1)), accident_enabled=accident))
    return out

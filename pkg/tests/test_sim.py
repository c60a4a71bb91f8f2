import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopsim.geometry import Pose
from coopsim.sim.episode import (ExpertPolicy, ScriptedPolicy, decode_trace, encode_trace, load_trace,
                                 mixed_rollout_action, run_episode, save_trace)
from coopsim.sim.expert import TARGET_SPEED, expert_action, expert_decision
from coopsim.sim.lanes import LaneGraph, NoRouteError, line
from coopsim.sim.lidar import lidar_scan, preprocess, raycast
from coopsim.sim.scenarios import (COLLIDER, EGO, KINDS, ScenarioConfig, ScenarioError, occlusion_report,
                                   sample_configs, spawn_scenario)
from coopsim.sim.world import (A_MAX, CAR, DRAG, DT, TRUCK, Rect, TrafficLight, VehicleState, WorldState,
                               check_collision, rect_corners, rects_overlap, step)


def car(x, y, yaw=0.0, speed=0.0, **kw):
    return VehicleState(Pose(x, y, 0, yaw), speed, CAR["wheelbase"], CAR["half_extents"], CAR["height"], **kw)


def truck(x, y, yaw=0.0, **kw):
    return VehicleState(Pose(x, y, 0, yaw), 0.0, TRUCK["wheelbase"], TRUCK["half_extents"], TRUCK["height"],
                        kind="truck", **kw)


def world_of(vehicles, statics=(), graph=None, lights=None, goal=(1e6, 1e6 + 1, 0, 1)):
    return WorldState(0.0, dict(vehicles), lights or {}, graph or LaneGraph(), list(statics), 0, goal)


def straight_road(length=400.0):
    g = LaneGraph()
    g.add_lane("main", line(0, 0, length, 0))
    return g


# ---------------------------------------------------------------- dynamics

def test_step_stationary():
    w = step(world_of({0: car(0, 0)}), {0: (0, 0, 0)})
    v = w.vehicles[0]
    assert (v.pose.x, v.pose.y, v.speed) == (0.0, 0.0, 0.0)
    assert w.time == pytest.approx(DT)


def test_step_full_throttle_monotone():
    w = world_of({0: car(0, 0)})
    speeds = []
    for _ in range(300):
        w = step(w, {0: (1, 0, 0)})
        speeds.append(w.vehicles[0].speed)
    assert all(b > a for a, b in zip(speeds, speeds[1:]))
    assert speeds[-1] < A_MAX / DRAG


def test_step_steer_zero_keeps_heading():
    w = world_of({0: car(0, 0, yaw=0.3, speed=4.0)})
    for _ in range(50):
        w = step(w, {0: (0.5, 0, 0)})
    assert abs(w.vehicles[0].pose.yaw - 0.3) < 1e-12


def test_step_one_step_oracle():
    w = step(world_of({0: car(1.0, 2.0, yaw=0.5, speed=3.0)}), {0: (0.4, 0.1, 0.5)})
    v = w.vehicles[0]
    speed = 3.0 + (A_MAX * 0.4 - 8.0 * 0.1 - DRAG * 3.0) * DT
    assert v.speed == pytest.approx(speed)
    assert v.pose.x == pytest.approx(1.0 + speed * math.cos(0.5) * DT)
    yaw = 0.5 + speed / CAR["wheelbase"] * math.tan(0.5 * math.radians(35)) * DT
    assert v.pose.yaw == pytest.approx(yaw)


def test_step_rejects_bad_action_and_skips_parked():
    w = world_of({0: car(0, 0), 1: car(10, 0, speed=0.0, role="parked")})
    with pytest.raises(ValueError):
        step(w, {0: (1.5, 0, 0)})
    w2 = step(w, {0: (0, 0, 0), 1: (1, 0, 0)})
    assert w2.vehicles[1].pose == w.vehicles[1].pose


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 20), st.floats(-4, 4), st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(-1, 1)))
def test_step_preserves_speed_and_yaw_range(speed, yaw, act):
    v = step(world_of({0: car(0, 0, yaw=yaw, speed=speed)}), {0: act}).vehicles[0]
    assert v.speed >= 0
    assert -math.pi < v.pose.yaw <= math.pi


def test_traffic_light_cycle():
    light = TrafficLight(10, 3, 7)
    assert [light.state(t) for t in (0, 9.9, 10, 12.9, 13, 19.9, 20)] == \
        ["green", "green", "yellow", "yellow", "red", "red", "green"]


def test_vehicle_validation():
    with pytest.raises(ValueError):
        car(0, 0, speed=-1)
    assert TRUCK["height"] > CAR["height"]


# ---------------------------------------------------------------- collisions

def _seg_intersect(p, q, r, s):
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])
    o1, o2, o3, o4 = orient(p, q, r), orient(p, q, s), orient(r, s, p), orient(r, s, q)
    if (o1 > 0) != (o2 > 0) and (o3 > 0) != (o4 > 0) and o1 and o2 and o3 and o4:
        return True
    return any(o == 0 and on_seg(a, b, c) for o, a, b, c in ((o1, p, q, r), (o2, p, q, s), (o3, r, s, p), (o4, r, s, q)))


def _inside(poly, pt):
    signs = []
    for i in range(4):
        a, b = poly[i], poly[(i + 1) % 4]
        signs.append((b[0] - a[0]) * (pt[1] - a[1]) - (b[1] - a[1]) * (pt[0] - a[0]))
    return all(s >= 0 for s in signs) or all(s <= 0 for s in signs)


def overlap_oracle(a, b):
    """Closed polygon intersection: crossing edges or containment."""
    for i, j in itertools.product(range(4), range(4)):
        if _seg_intersect(a[i], a[(i + 1) % 4], b[j], b[(j + 1) % 4]):
            return True
    return _inside(a, b[0]) or _inside(b, a[0])


def test_collision_examples():
    sq = lambda x, y: rect_corners(x, y, 0.5, 0.5, 0.0)
    assert not rects_overlap(sq(0, 0), sq(10, 0))
    assert rects_overlap(sq(0, 0), sq(0, 0))
    assert rects_overlap(sq(0, 0), sq(1, 1))           # corners touch at (0.5, 0.5)
    assert rects_overlap(sq(0, 0), sq(1, 0))           # edges touch
    assert not rects_overlap(sq(0, 0), sq(1.0001, 1))


def test_collision_vs_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(400):
        a = rect_corners(*rng.uniform(-3, 3, 2), *rng.uniform(0.3, 2.5, 2), rng.uniform(-math.pi, math.pi))
        b = rect_corners(*rng.uniform(-3, 3, 2), *rng.uniform(0.3, 2.5, 2), rng.uniform(-math.pi, math.pi))
        assert bool(rects_overlap(a, b)) == overlap_oracle(a.tolist(), b.tolist())


def test_check_collision_pairs():
    w = world_of({0: car(0, 0), 1: car(3, 0), 2: car(50, 0), 3: car(50, 1, role="parked")},
                 statics=[Rect.from_bounds(-10, -2, -1, 1)])
    pairs = check_collision(w)
    assert (0, 1) in pairs and (2, 3) in pairs
    assert (-1, 0) in pairs
    assert all(a < b for a, b in pairs)


def test_check_collision_ignores_two_parked():
    w = world_of({0: car(100, 0), 1: car(0, 0, role="parked"), 2: car(1, 0, role="parked")})
    assert check_collision(w) == []


# ---------------------------------------------------------------- lidar

def test_lidar_empty_world():
    assert len(lidar_scan(world_of({0: car(0, 0)}), 0)) == 0


def test_lidar_first_hit_and_occlusion():
    hidden = car(20, 0)
    w = world_of({0: car(0, 0), 1: truck(10, 0), 2: hidden})
    scan = raycast(w, 0, n_beams=360)
    assert len(scan.cloud) <= 360
    assert not np.any(scan.hit_ids == 2)
    # beam 0 points along +x and stops at the truck's rear face, 10 - 6 = 4 m away
    assert np.allclose(scan.cloud.points[0], [4.0, 0.0, TRUCK["height"]])
    # without the truck the same beam reaches the car's rear bumper
    open_scan = raycast(world_of({0: car(0, 0), 2: hidden}), 0, n_beams=360)
    assert np.any(open_scan.hit_ids == 2)
    assert np.allclose(open_scan.cloud.points[0], [20 - 2.25, 0.0, CAR["height"]])


def test_lidar_sensor_frame_and_range():
    w = world_of({0: car(0, 0, yaw=math.pi / 2), 1: car(0, 10, yaw=math.pi / 2)})
    pts = lidar_scan(w, 0, n_beams=4).points
    assert np.allclose(pts[0], [10 - 2.25, 0.0, CAR["height"]])   # dead ahead in the sensor frame
    far = world_of({0: car(0, 0), 1: car(100, 0)})
    assert len(lidar_scan(far, 0, max_range=60)) == 0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(-40, 40), st.floats(-40, 40), st.floats(-3, 3)), max_size=6),
       st.integers(8, 256))
def test_lidar_point_count_bounded(others, beams):
    veh = {0: car(0, 0)}
    for i, (x, y, yaw) in enumerate(others):
        veh[i + 1] = car(x, y, yaw)
    scan = raycast(world_of(veh), 0, n_beams=beams)
    assert len(scan.cloud) <= beams and len(scan.hit_ids) == len(scan.cloud)


def test_preprocess_sizes():
    rng = np.random.default_rng(0)
    from coopsim.geometry import PointCloud
    dense = PointCloud(rng.uniform(-30, 30, size=(900, 3)))
    assert preprocess(dense, 256).shape == (256, 3)
    sparse = PointCloud(np.array([[1.0, 0, 1.5], [5.0, 0, 1.5]]))
    assert preprocess(sparse, 16).shape == (16, 3)
    assert np.array_equal(preprocess(PointCloud(np.zeros((0, 3))), 8), np.zeros((8, 3)))


# ---------------------------------------------------------------- A*

def all_simple_paths(g: LaneGraph, start, goals, blocked=frozenset()):
    best = (math.inf, None)
    stack = [(start, [start], 0.0)]
    while stack:
        n, path, cost = stack.pop()
        if n in goals:
            if cost < best[0]:
                best = (cost, path)
            continue
        for m, w in g.edges[n]:
            if m in path or (m in blocked and m not in goals):
                continue
            stack.append((m, path + [m], cost + w))
    return best


def path_cost(g, path):
    return sum(dict(g.edges[a])[b] for a, b in zip(path, path[1:]))


def test_astar_uses_detour_around_wall():
    g = LaneGraph()
    direct = g.add_lane("direct", line(0, 0, 20, 0))
    up = g.add_lane("up", np.array([[0, 0.0], [5, 6], [15, 6], [20, 0]]))
    # shared start and end: link lanes through their first/last nodes
    g.add_edge(direct[0], up[1])
    g.add_edge(up[-2], direct[-1])
    blocked = frozenset({direct[5]})   # wall across the direct lane
    path = g.astar(direct[0], [direct[-1]], blocked)
    assert direct[5] not in path
    cost, oracle = all_simple_paths(g, direct[0], {direct[-1]}, blocked)
    assert path_cost(g, path) == pytest.approx(cost)
    with pytest.raises(NoRouteError):
        g.astar(direct[0], [direct[-1]], blocked | {up[3], up[4]})


def test_astar_matches_exhaustive_on_random_graphs():
    rng = np.random.default_rng(3)
    for trial in range(30):
        g = LaneGraph()
        n = 8
        for i in range(n):
            g.add_node(*rng.uniform(0, 20, 2), rng.uniform(-math.pi, math.pi))
        for a in range(n):
            for b in range(n):
                if a != b and rng.random() < 0.3:
                    g.add_edge(a, b, cost_scale=float(rng.uniform(1.0, 2.0)))
        goal = {n - 1}
        cost, oracle = all_simple_paths(g, 0, goal)
        if oracle is None:
            with pytest.raises(NoRouteError):
                g.astar(0, goal)
            continue
        exact = g.astar(0, goal, yaw_weight=0.0)
        assert path_cost(g, exact) == pytest.approx(cost)
        near = g.astar(0, goal)
        assert path_cost(g, near) <= cost + 0.5 + 1e-9   # heading term adds at most yaw_weight metres


# ---------------------------------------------------------------- expert

def test_expert_empty_road_speed_and_steer():
    g = straight_road()
    ego = car(0, 0, goal=(len(g) - 1,))
    w = world_of({0: ego}, graph=g)
    steers = []
    for _ in range(200):
        a = expert_action(w, 0)
        steers.append(a[2])
        w = step(w, {0: a})
    assert abs(w.vehicles[0].speed - TARGET_SPEED) <= 0.3
    assert max(abs(s) for s in steers) < 1e-9


def test_expert_brakes_for_crossing_vehicle():
    g = straight_road()
    v = TARGET_SPEED
    ego = car(0, 0, speed=v, goal=(len(g) - 1,))
    # a northbound car reaches the ego's path 1.5 s from now, where the ego will also be
    x_meet = v * 1.5
    crosser = car(x_meet, -6.0 * 1.5, yaw=math.pi / 2, speed=6.0)
    w = world_of({0: ego, 1: crosser}, graph=g)
    d = expert_decision(w, 0)
    assert d.reason == "conflict" and d.conflict_with == 1
    assert d.action[1] == 1.0 and d.action[0] == 0.0
    # the same car moving away from the path is no conflict
    gone = car(x_meet, -6.0 * 1.5, yaw=-math.pi / 2, speed=6.0)
    w2 = world_of({0: ego, 1: gone}, graph=g)
    assert expert_decision(w2, 0).reason == "go"


def test_expert_stops_for_red_light():
    g = LaneGraph()
    g.add_lane("app", line(0, 0, 30, 0), stop_group="main")
    g.add_lane("exit", line(30, 0, 200, 0))
    g.join("app", "exit")
    lights = {"main": TrafficLight(green=1, yellow=1, red=1000, offset=2)}
    w = world_of({0: car(0, 0, speed=5.0, goal=(len(g) - 1,))}, graph=g, lights=lights)
    for _ in range(150):
        w = step(w, {0: expert_action(w, 0)})
    v = w.vehicles[0]
    assert v.speed < 0.05
    assert v.pose.x + CAR["half_extents"][0] <= 30.0


def test_expert_no_route_brakes():
    g = straight_road(50)
    w = world_of({0: car(0, 30, goal=(len(g) - 1,))}, graph=g)   # far off the lane graph
    d = expert_decision(w, 0)
    assert d.reason == "no_route" and d.action[1] == 1.0


# ---------------------------------------------------------------- scenarios

@pytest.mark.parametrize("kind", KINDS)
def test_spawn_occlusion_premise(kind):
    for cfg in sample_configs(kind, 4, seed=11):
        w = spawn_scenario(cfg)
        assert sum(v.role == "ego" for v in w.vehicles.values()) == 1
        ego_hits, nbr = occlusion_report(w)
        assert ego_hits == 0
        assert max(nbr.values()) > 0


def test_spawn_without_accident_has_no_collider():
    w = spawn_scenario(ScenarioConfig("left_turn", accident_enabled=False, seed=3))
    assert COLLIDER not in w.vehicles
    assert all(v.role != "collider" for v in w.vehicles.values())


def _snapshot(w):
    return [(k, v.pose, v.speed, v.role, v.networked) for k, v in sorted(w.vehicles.items())]


def test_spawn_deterministic():
    cfg = ScenarioConfig("red_light_violation", traffic_density=3, seed=42)
    assert _snapshot(spawn_scenario(cfg)) == _snapshot(spawn_scenario(cfg))
    other = ScenarioConfig("red_light_violation", traffic_density=3, seed=43)
    assert _snapshot(spawn_scenario(cfg)) != _snapshot(spawn_scenario(other))


def test_scenario_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig("highway")
    with pytest.raises(ValueError):
        ScenarioConfig("left_turn", traffic_density=-1)


def test_spawn_failure_is_reported():
    with pytest.raises(ScenarioError):
        spawn_scenario(ScenarioConfig("left_turn", seed=1), max_tries=0)


def test_sample_configs_frozen():
    a = sample_configs("overtaking", 5, seed=7)
    assert a == sample_configs("overtaking", 5, seed=7)
    assert len({c.seed for c in a}) == 5


# ---------------------------------------------------------------- episodes

@pytest.mark.parametrize("kind", KINDS)
def test_expert_episode_succeeds(kind):
    tr = run_episode(ExpertPolicy(), ScenarioConfig(kind, seed=5), record=False)
    assert tr.outcome == "success", tr.detail


def test_full_throttle_left_turn_collides():
    tr = run_episode(ScriptedPolicy((1.0, 0.0, 0.0)), ScenarioConfig("left_turn", seed=5), record=False)
    assert tr.outcome == "collision"


def test_zero_time_limit_times_out():
    tr = run_episode(ExpertPolicy(), ScenarioConfig("left_turn", seed=5), time_limit=0.0)
    assert tr.outcome == "timeout" and tr.frames == [] and tr.t_agent == 0.0


def test_stagnation_when_holding_brake():
    cfg = ScenarioConfig("overtaking", seed=2, traffic_density=0, accident_enabled=False)
    tr = run_episode(ScriptedPolicy((0.0, 1.0, 0.0)), cfg, record=False)
    assert tr.outcome == "stagnation"
    assert tr.t_agent == pytest.approx(30.0, abs=0.15)


def test_trace_roundtrip_and_determinism(tmp_path):
    cfg = ScenarioConfig("left_turn", seed=8, traffic_density=2)
    a = run_episode(ExpertPolicy(), cfg, time_limit=2.0)
    b = run_episode(ExpertPolicy(), cfg, time_limit=2.0)
    assert encode_trace(a) == encode_trace(b)
    assert len(a.frames) == 20
    f0 = a.frames[0]
    assert f0.ego_points.shape == (256, 3)
    assert {v.vid for v in f0.vehicles} >= {EGO, COLLIDER}
    path = tmp_path / "ep.cptr"
    save_trace(path, a)
    back = load_trace(path)
    assert encode_trace(back) == encode_trace(a)
    assert back.outcome == a.outcome and back.t_agent == a.t_agent
    assert back.frames[0].expert_action.tolist() == pytest.approx(f0.expert_action.tolist(), abs=1e-6)


def test_trace_rejects_truncation():
    tr = run_episode(ExpertPolicy(), ScenarioConfig("overtaking", seed=1), time_limit=0.5, record=False)
    buf = encode_trace(tr)
    with pytest.raises(Exception):
        decode_trace(buf[:-20])


def test_mixed_rollout_action():
    rng = np.random.default_rng(0)
    e, s = "expert", "student"
    assert mixed_rollout_action(e, s, 1.0, rng) == e
    assert mixed_rollout_action(e, s, 0.0, rng) == s
    picks = [mixed_rollout_action(e, s, 0.8, rng) for _ in range(20000)]
    assert abs(picks.count(e) / 20000 - 0.8) < 0.01
    with pytest.raises(ValueError):
        mixed_rollout_action(e, s, 1.2, rng)

"""Closed-loop episode runner, policy protocol and the trace file format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ..channel import Channel, ChannelConfig, Message, decode_wire, encode_wire
from ..geometry import Pose, PointCloud, decode_cloud, encode_cloud, farthest_point_sample
from .expert import expert_decision
from .lidar import preprocess, raycast
from .scenarios import SCENARIO_VERSION, ScenarioConfig, spawn_scenario
from .world import WorldState, check_collision, step

OUTCOMES = ("success", "collision", "timeout", "stagnation")
STAGNATION_SPEED = 0.1
STAGNATION_TIME = 30.0
REASONS = ("go", "conflict", "light", "no_route")


# ---------------------------------------------------------------- observations & policies

@dataclass
class Delivered:
    sender_id: int
    pose: Pose
    points: np.ndarray        # sender-frame encoder input (N, 3)
    message: Message


@dataclass
class Observation:
    frame: int
    ego_pose: Pose
    ego_speed: float
    ego_points: np.ndarray | None
    delivered: list[Delivered]
    world: WorldState          # privileged; only the expert may look


class Policy:
    """Driving policy interface used by :func:`run_episode`."""
    name = "policy"
    observes = True          # needs the ego LiDAR
    shares = False           # needs neighbour scans every frame
    input_points = 256
    keypoints = 16

    def prepare(self, frame: int, senders: list[tuple[int, Pose, np.ndarray]]) -> list[Message]:
        """Messages the selected neighbours would send this frame (keypoints only by default)."""
        out = []
        for vid, pose, pts in senders:
            kp = pts[np.sort(farthest_point_sample(pts, min(self.keypoints, len(pts))))]
            out.append(Message(vid, frame, pose, kp))
        return out

    def act(self, obs: Observation) -> np.ndarray:
        raise NotImplementedError


class ExpertPolicy(Policy):
    name = "expert"
    observes = False

    def act(self, obs: Observation) -> np.ndarray:
        return expert_decision(obs.world, obs.world.ego_id).action


class ScriptedPolicy(Policy):
    """Constant action, e.g. always-brake or full-throttle-straight."""
    observes = False

    def __init__(self, action, name: str = "scripted"):
        self.action = np.asarray(action, dtype=np.float64)
        self.name = name

    def act(self, obs: Observation) -> np.ndarray:
        return self.action.copy()


def mixed_rollout_action(expert_a, student_a, beta: float, rng: np.random.Generator):
    """Expert action with probability ``beta``, else the student's."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must be in [0, 1]")
    return expert_a if rng.random() < beta else student_a


# ---------------------------------------------------------------- records

@dataclass
class VehicleRecord:
    vid: int
    pose: tuple[float, float, float, float]
    speed: float


@dataclass
class NeighborRecord:
    sender_id: int
    points: np.ndarray
    message: Message

    @property
    def pose(self) -> Pose:
        return self.message.sender_pose


@dataclass
class FrameRecord:
    frame: int
    ego_action: np.ndarray
    expert_action: np.ndarray
    vehicles: list[VehicleRecord]
    executed_expert: bool = False
    reason: str = "go"
    ego_points: np.ndarray | None = None
    neighbors: list[NeighborRecord] = field(default_factory=list)
    plan: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def vehicle(self, vid: int) -> VehicleRecord:
        return next(v for v in self.vehicles if v.vid == vid)


@dataclass
class TraceRecord:
    header: dict
    frames: list[FrameRecord]
    outcome: str
    t_agent: float
    detail: str = ""

    @property
    def success(self) -> bool:
        return self.outcome == "success"

    @property
    def ego_id(self) -> int:
        return int(self.header.get("ego_id", 0))


# ---------------------------------------------------------------- episode loop

def _header(world: WorldState, cfg: ScenarioConfig, chan: ChannelConfig, policy: Policy, time_limit: float, extra):
    vehicles = {str(k): dict(role=v.role, kind=v.kind, half_extents=list(v.half_extents), height=v.height,
                             networked=v.networked) for k, v in sorted(world.vehicles.items())}
    head = dict(format="coopsim-trace", version=1, scenario_version=SCENARIO_VERSION, scenario=cfg.to_dict(),
                channel=vars(chan).copy(), policy=policy.name, time_limit=time_limit, dt=world.dt,
                ego_id=world.ego_id, goal_region=list(world.goal_region), vehicles=vehicles,
                statics=[[r.x, r.y, r.half_length, r.half_width, r.yaw, r.height] for r in world.statics])
    head.update(extra or {})
    return head


def run_episode(policy: Policy, cfg: ScenarioConfig, channel: ChannelConfig | None = None,
                time_limit: float = 60.0, record: bool = True, beta: float | None = None,
                mix_seed: int = 0, header_extra: dict | None = None) -> TraceRecord:
    """Drive one episode to a terminal outcome.

    ``record`` stores per-frame observations (clouds and messages) for
    training; without it only poses and actions are kept. With ``beta`` the
    executed ego action is the expert's with probability ``beta`` per frame
    (DAgger mixing); the expert's action is recorded either way.
    """
    channel = channel or ChannelConfig()
    world = spawn_scenario(cfg)
    chan = Channel(channel)
    mix_rng = np.random.default_rng([mix_seed, cfg.seed])
    header = _header(world, cfg, channel, policy, time_limit, header_extra)
    frames: list[FrameRecord] = []
    ego = world.ego_id
    stagnant = 0.0
    outcome, detail = "timeout", "time limit"
    frame = 0
    while True:
        if world.time >= time_limit - 1e-9:
            outcome, detail = "timeout", "time limit"
            break
        ev = world.vehicles[ego]
        decision = expert_decision(world, ego)
        if decision.reason == "no_route":
            outcome, detail = "timeout", "expert found no route"
            break
        use_expert = False
        if beta is not None:
            use_expert = bool(mix_rng.random() < beta)
        need_student = not use_expert
        need_obs = record or (need_student and policy.observes)
        ego_pts, delivered, neighbor_recs = None, [], []
        if need_obs:
            ego_pts = preprocess(raycast(world, ego).cloud, policy.input_points)
            want_nbrs = record or (need_student and policy.shares)
            if want_nbrs:
                sel = chan.select([(vid, v.pose, v.networked) for vid, v in sorted(world.vehicles.items())], ego)
                senders = [(vid, world.vehicles[vid].pose, preprocess(raycast(world, vid).cloud, policy.input_points))
                           for vid in sel]
                msgs = policy.prepare(frame, senders) if senders else []
                got = chan.transmit(list(range(len(msgs))), sizes=[m.nbytes for m in msgs])
                for i in got:
                    vid, pose, pts = senders[i]
                    delivered.append(Delivered(vid, pose, pts, msgs[i]))
                    neighbor_recs.append(NeighborRecord(vid, pts, msgs[i]))
        if use_expert or isinstance(policy, ExpertPolicy):
            executed = decision.action
        else:
            obs = Observation(frame, ev.pose, ev.speed, ego_pts, delivered, world)
            executed = np.asarray(policy.act(obs), dtype=np.float64)
        frames.append(FrameRecord(
            frame=frame, ego_action=np.array(executed, dtype=np.float64), expert_action=decision.action.copy(),
            vehicles=[VehicleRecord(vid, (v.pose.x, v.pose.y, v.pose.z, v.pose.yaw), v.speed)
                      for vid, v in sorted(world.vehicles.items())],
            executed_expert=use_expert, reason=decision.reason,
            ego_points=ego_pts if record else None, neighbors=neighbor_recs if record else [],
            plan=decision.plan_xy[::5].copy()))
        actions = {ego: executed}
        for vid, v in sorted(world.vehicles.items()):
            if vid == ego or not v.moving:
                continue
            actions[vid] = expert_decision(world, vid, yield_to_traffic=v.role != "collider").action
        world = step(world, actions)
        _despawn_finished(world)
        frame += 1
        hits = [p for p in check_collision(world) if ego in p]
        if hits:
            a, b = hits[0]
            outcome, detail = "collision", f"ego hit {b if a == ego else a}"
            break
        if world.in_goal():
            outcome, detail = "success", "goal reached"
            break
        ev = world.vehicles[ego]
        if ev.speed < STAGNATION_SPEED and decision.reason == "go":
            stagnant += world.dt
            if stagnant >= STAGNATION_TIME - 1e-9:
                outcome, detail = "stagnation", "stopped while unobstructed"
                break
        else:
            stagnant = 0.0
    t_agent = round(world.time, 6)
    return TraceRecord(header, frames, outcome, t_agent, detail)


def _despawn_finished(world: WorldState):
    for vid in [k for k in world.vehicles if k != world.ego_id]:
        v = world.vehicles[vid]
        if not v.moving:
            continue
        if v.route is not None:
            end = v.route[-1]
        elif v.goal:
            end = world.lane_graph.position(v.goal[-1])
        else:
            continue
        if math.hypot(v.pose.x - end[0], v.pose.y - end[1]) < 4.0:
            del world.vehicles[vid]
            world.plans.pop(vid, None)


# ---------------------------------------------------------------- trace files

FRAME_MAGIC = b"CPFR"
END_MAGIC = b"CPTE"
_FRAME_HEAD = struct.Struct("<4sI3f3fH")
_VEH = struct.Struct("<I4ff")
_FLAGS = struct.Struct("<BBH")


def encode_trace(trace: TraceRecord) -> bytes:
    out = [json.dumps(trace.header, sort_keys=True).encode() + b"\n"]
    for fr in trace.frames:
        out.append(_FRAME_HEAD.pack(FRAME_MAGIC, fr.frame, *map(float, fr.ego_action), *map(float, fr.expert_action),
                                    len(fr.vehicles)))
        for v in fr.vehicles:
            out.append(_VEH.pack(v.vid, *v.pose, v.speed))
        flags = (1 if fr.executed_expert else 0) | (2 if fr.ego_points is not None else 0)
        out.append(_FLAGS.pack(flags, REASONS.index(fr.reason), len(fr.neighbors)))
        if fr.ego_points is not None:
            out.append(encode_cloud(PointCloud(fr.ego_points, frame=trace.ego_id)))
        for nb in fr.neighbors:
            out.append(encode_cloud(PointCloud(nb.points, frame=nb.sender_id)))
            out.append(encode_wire(nb.message))
        out.append(struct.pack("<H", len(fr.plan)))
        out.append(np.ascontiguousarray(fr.plan, dtype="<f4").tobytes())
    foot = json.dumps(dict(outcome=trace.outcome, t_agent=trace.t_agent, detail=trace.detail,
                           frames=len(trace.frames)), sort_keys=True).encode()
    out.append(END_MAGIC + struct.pack("<I", len(foot)) + foot)
    return b"".join(out)


def decode_trace(buf: bytes) -> TraceRecord:
    nl = buf.index(b"\n")
    header = json.loads(buf[:nl])
    pos = nl + 1
    frames = []
    while buf[pos:pos + 4] == FRAME_MAGIC:
        _, idx, *acts, nveh = _FRAME_HEAD.unpack_from(buf, pos)
        pos += _FRAME_HEAD.size
        veh = []
        for _ in range(nveh):
            vid, x, y, z, yaw, sp = _VEH.unpack_from(buf, pos)
            pos += _VEH.size
            veh.append(VehicleRecord(vid, (x, y, z, yaw), sp))
        flags, reason, nnb = _FLAGS.unpack_from(buf, pos)
        pos += _FLAGS.size
        ego_pts = None
        if flags & 2:
            cloud, pos = decode_cloud(buf, pos)
            ego_pts = cloud.points
        nbs = []
        for _ in range(nnb):
            cloud, pos = decode_cloud(buf, pos)
            msg, pos = decode_wire(buf, pos)
            nbs.append(NeighborRecord(msg.sender_id, cloud.points, msg))
        (nplan,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        plan = np.frombuffer(buf, dtype="<f4", count=2 * nplan, offset=pos).reshape(nplan, 2).astype(np.float64)
        pos += 8 * nplan
        frames.append(FrameRecord(idx, np.array(acts[:3], dtype=np.float64), np.array(acts[3:], dtype=np.float64), veh,
                                  bool(flags & 1), REASONS[reason], ego_pts, nbs, plan))
    if buf[pos:pos + 4] != END_MAGIC:
        raise ValueError(f"corrupt trace: expected frame or end marker at byte {pos}")
    (n,) = struct.unpack_from("<I", buf, pos + 4)
    foot = json.loads(buf[pos + 8:pos + 8 + n])
    return TraceRecord(header, frames, foot["outcome"], foot["t_agent"], foot.get("detail", ""))


def save_trace(path, trace: TraceRecord):
    with open(path, "wb") as f:
        f.write(encode_trace(trace))


def load_trace(path) -> TraceRecord:
    with open(path, "rb") as f:
        return decode_trace(f.read())

"""V2V message codec, bandwidth accounting, neighbour selection and a lossy channel."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import Pose

MESSAGE_MAGIC = b"CPMS"
HEADER = struct.Struct("<4sII4fHH")
HEADER_BYTES = 32
U16_MAX = 0xFFFF

# Reported values used for side-by-side printing.
REPORTED_BANDWIDTH_MBPS = {"keypoint_messages": 5.10, "early_fusion": 60.0, "voxel_gnn": 5.60}
RADIO_THROUGHPUT_MBPS = {"dsrc": 2.0, "c-v2x": 7.2}

assert HEADER.size == HEADER_BYTES


@dataclass
class Message:
    sender_id: int
    frame_id: int
    sender_pose: Pose
    keypoints: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        if self.features is None:
            self.features = np.zeros((len(self.keypoints), 0))
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.keypoints):
            raise ValueError("message features must be (K, D) with one row per keypoint")

    @property
    def k(self) -> int:
        return len(self.keypoints)

    @property
    def d(self) -> int:
        return self.features.shape[1] if self.features.ndim == 2 else 0

    @property
    def nbytes(self) -> int:
        return message_bytes(self.k, self.d)


def message_bytes(k: int, d: int) -> int:
    return HEADER_BYTES + 12 * k + 4 * k * d


def encode_wire(msg: Message) -> bytes:
    """Little-endian: 32-byte header, K x 3 f32 coordinates, K x D f32 features."""
    k, d = msg.k, msg.d
    if k > U16_MAX or d > U16_MAX:
        raise ValueError(f"message dimensions exceed u16: K={k}, D={d}")
    if not (np.all(np.isfinite(msg.keypoints)) and np.all(np.isfinite(msg.features))):
        raise ValueError("message payload must be finite")
    p = msg.sender_pose
    head = HEADER.pack(MESSAGE_MAGIC, msg.sender_id, msg.frame_id, p.x, p.y, p.z, p.yaw, k, d)
    return (head + np.ascontiguousarray(msg.keypoints, dtype="<f4").tobytes()
            + np.ascontiguousarray(msg.features, dtype="<f4").tobytes())


def decode_wire(buf: bytes, offset: int = 0) -> tuple[Message, int]:
    """Parse one message; returns it with the offset just past its payload."""
    magic, sender, frame, x, y, z, yaw, k, d = HEADER.unpack_from(buf, offset)
    if magic != MESSAGE_MAGIC:
        raise ValueError("not a CPMS message")
    pos = offset + HEADER_BYTES
    kp = np.frombuffer(buf, dtype="<f4", count=3 * k, offset=pos).reshape(k, 3).astype(np.float64)
    pos += 12 * k
    feats = np.frombuffer(buf, dtype="<f4", count=k * d, offset=pos).reshape(k, d).astype(np.float64)
    pos += 4 * k * d
    pose = Pose.__new__(Pose)
    for name, val in zip(("x", "y", "z", "yaw"), (x, y, z, yaw)):
        object.__setattr__(pose, name, val)
    return Message(sender, frame, pose, kp, feats), pos


def to_wire_precision(msg: Message) -> Message:
    """The message as the receiver will see it (float32-rounded)."""
    return decode_wire(encode_wire(msg))[0]


def bandwidth_mbps(k: int, d: int, rate_hz: float) -> float:
    """Uncompressed throughput of one sender streaming K x (D, 3) messages."""
    if k < 0 or d < 0 or rate_hz <= 0:
        raise ValueError("bandwidth_mbps needs K, D >= 0 and a positive rate")
    return message_bytes(k, d) * 8 * rate_hz / 1e6


def raw_cloud_bandwidth_mbps(n_points: int, rate_hz: float) -> float:
    """Sharing raw xyz clouds (no features) at the same framing."""
    return bandwidth_mbps(n_points, 0, rate_hz)


def bandwidth_table(k: int, d: int, rate_hz: float, raw_points: int = 65536) -> list[tuple[str, float, float | None]]:
    """(label, computed Mbps, reported Mbps) rows."""
    return [
        (f"keypoint message {k}x({d},3)", bandwidth_mbps(k, d, rate_hz),
         REPORTED_BANDWIDTH_MBPS["keypoint_messages"] if (k, d) == (128, 128) else None),
        (f"raw cloud {raw_points}x3", raw_cloud_bandwidth_mbps(raw_points, rate_hz),
         REPORTED_BANDWIDTH_MBPS["early_fusion"] if raw_points == 65536 else None),
    ]


# ---------------------------------------------------------------- neighbour selection

def select_neighbors(vehicles, ego: int, comm_range: float, max_n: int, rng: np.random.Generator) -> list[int]:
    """Uniformly pick up to ``max_n`` networked vehicles within ``comm_range`` of ego.

    ``vehicles`` is an iterable of ``(id, pose, networked)``. Returns sorted ids.
    """
    if max_n < 0:
        raise ValueError("max_n must be non-negative")
    rows = list(vehicles)
    ego_pose = next(p for vid, p, _ in rows if vid == ego)
    cands = sorted(vid for vid, p, net in rows
                   if vid != ego and net and (p.x - ego_pose.x) ** 2 + (p.y - ego_pose.y) ** 2 <= comm_range ** 2)
    n = min(max_n, len(cands))
    if n == 0:
        return []
    if n == len(cands):
        return cands
    pick = rng.choice(len(cands), size=n, replace=False)
    return sorted(cands[i] for i in pick)


# ---------------------------------------------------------------- channel

@dataclass
class ChannelConfig:
    throughput_mbps: float = 7.2
    packet_loss_prob: float = 0.05
    window: float = 0.1
    rng_seed: int = 0
    comm_range: float = 70.0
    max_neighbors: int = 3

    def __post_init__(self):
        if not 0 <= self.packet_loss_prob < 1:
            raise ValueError("packet_loss_prob must be in [0, 1)")
        if self.throughput_mbps <= 0:
            raise ValueError("throughput_mbps must be positive")
        if self.window <= 0:
            raise ValueError("window must be positive")

    @property
    def budget_bytes(self) -> float:
        return self.throughput_mbps * 1e6 * self.window / 8


def transmit(msgs: list, cfg: ChannelConfig, rng: np.random.Generator, sizes: list[int] | None = None) -> list:
    """Deliver a window's worth of messages.

    Each message is first dropped with ``packet_loss_prob``; survivors are
    admitted in order until the window's byte budget would be exceeded, and
    everything from that point on is dropped. Delivered items are returned
    unchanged. ``sizes`` overrides per-item byte counts (defaults to
    ``msg.nbytes`` or ``len(bytes)``).
    """
    if sizes is None:
        sizes = [len(m) if isinstance(m, (bytes, bytearray)) else m.nbytes for m in msgs]
    lost = rng.random(len(msgs)) < cfg.packet_loss_prob
    budget = cfg.budget_bytes
    used = 0
    out = []
    for msg, size, drop in zip(msgs, sizes, lost):
        if drop:
            continue
        if used + size > budget:
            break
        used += size
        out.append(msg)
    return out


class Channel:
    """Seeded channel owned by one simulation loop."""

    def __init__(self, cfg: ChannelConfig, seed: int | None = None):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)

    def select(self, vehicles, ego: int) -> list[int]:
        return select_neighbors(vehicles, ego, self.cfg.comm_range, self.cfg.max_neighbors, self.rng)

    def transmit(self, msgs: list, sizes: list[int] | None = None) -> list:
        return transmit(msgs, self.cfg, self.rng, sizes)

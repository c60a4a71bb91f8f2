"""Behaviour cloning and DAgger against the privileged expert.

Three policy variants share one network and one training loop:

* ``cooperative``: neighbours send encoded keypoint messages, the ego fuses
  them with its own encoding (gradients flow through both encoders).
* ``no_v2v``: the ego encoding alone.
* ``early_fusion``: neighbours send their raw encoder input clouds, the ego
  merges them into its own frame and encodes the merged cloud.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .channel import ChannelConfig, Message
from .geometry import PointCloud, Pose, relative_points
from .jobs import parallel_map
from .model import (EncoderConfig, EncoderPlan, Representation, aggregate, aggregate_features, clip_action,
                    encode_features, head_raw, init_params, pid_speed_limit, plan_aggregate, plan_encoder)
from .sim.episode import (Observation, Policy, TraceRecord, decode_trace, encode_trace, load_trace,
                          mixed_rollout_action, run_episode, save_trace)
from .sim.lidar import preprocess
from .sim.scenarios import ScenarioConfig, sample_configs

MODES = ("cooperative", "no_v2v", "early_fusion")
MANIFEST = "manifest.json"
META_KEY = "__meta__.json"

__all__ = ["MODES", "TrainConfig", "Dataset", "Adam", "LearnedPolicy", "control_loss", "dagger_beta",
           "mixed_rollout_action", "train_bc", "dagger_train", "collect", "training_configs", "bc_configs",
           "dagger_configs",
           "save_checkpoint", "load_checkpoint"]


@dataclass
class TrainConfig:
    eta: tuple[float, float, float] = (1.0, 1.0, 1.0)
    beta0: float = 0.8
    bc_traces: int = 12
    bc_epochs: int = 10
    dagger_rounds: int = 4
    trajectories_per_round: int = 4
    epochs_per_round: int = 5
    accident_fraction: float = 0.25
    learning_rate: float = 1e-3
    batch_size: int = 32
    rng_seed: int = 7
    frame_stride: int = 1          # keep every n-th recorded frame
    time_limit: float = 60.0

    def __post_init__(self):
        self.eta = tuple(float(e) for e in self.eta)
        if len(self.eta) != 3 or min(self.eta) < 0:
            raise ValueError("eta must be three non-negative weights")
        if not 0.0 < self.beta0 <= 1.0:
            raise ValueError("beta0 must be in (0, 1]")
        if not 0.0 <= self.accident_fraction <= 1.0:
            raise ValueError("accident_fraction must be in [0, 1]")
        for name in ("bc_traces", "bc_epochs", "dagger_rounds", "trajectories_per_round", "epochs_per_round"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.frame_stride < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size, frame_stride and learning_rate must be positive")


# ---------------------------------------------------------------- objective

def control_loss(pred, expert, eta=(1.0, 1.0, 1.0)) -> Tensor:
    """Weighted L1 over (throttle, brake, steer), averaged over frames."""
    pred = ad.as_tensor(pred)
    target = np.asarray(expert, dtype=np.float64).reshape(pred.shape)
    diff = ad.absolute(ad.sub(pred, Tensor(target)))
    w = np.asarray(eta, dtype=np.float64)
    frames = 1 if pred.ndim == 1 else pred.shape[0]
    return ad.mul(ad.total(ad.mul(diff, Tensor(np.broadcast_to(w, pred.shape).copy()))), 1.0 / frames)


def dagger_beta(i: int, beta0: float = 0.8) -> float:
    """Expert execution probability in DAgger round ``i`` (round 0 runs at beta0)."""
    if i < 0:
        raise ValueError("round index must be >= 0")
    return beta0 ** (i + 1)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in sorted(self.params):
            p = self.params[k]
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ---------------------------------------------------------------- dataset

@dataclass
class Sample:
    ego: int                                   # cloud index
    neighbours: list[tuple[int, Pose]]         # (cloud index, sender pose)
    ego_pose: Pose
    speed: float
    action: np.ndarray                         # expert label
    trace: int
    accident: bool


def fuse_clouds(ego_points: np.ndarray, neighbours: list[tuple[np.ndarray, Pose]], ego_pose: Pose,
                n_points: int) -> np.ndarray:
    """Early fusion input: neighbour clouds moved into the ego frame, merged, resampled to ``n_points``."""
    if not neighbours:
        return np.asarray(ego_points, dtype=np.float64)
    merged = [np.asarray(ego_points, dtype=np.float64)]
    merged += [relative_points(pts, pose, ego_pose) for pts, pose in neighbours]
    return preprocess(PointCloud(np.concatenate(merged)), n_points)


class _PlanStore:
    """Encoder geometry for every stored cloud, kept compact (rel offsets rebuilt per batch)."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        self.points: list[list[np.ndarray]] = []
        self.nbr: list[list[np.ndarray]] = []
        self.group: list[list[np.ndarray]] = []
        self.count = 0

    def __len__(self):
        return self.count

    def extend(self, clouds: list[np.ndarray], chunk: int = 128):
        for s in range(0, len(clouds), chunk):
            plan = plan_encoder(np.stack(clouds[s:s + chunk]), self.cfg)
            parts = ([p for p in plan.points], [n.astype(np.int16) for n in plan.nbr],
                     [g.astype(np.int16) for g in plan.group])
            if not self.points:
                self.points, self.nbr, self.group = [[p] for p in parts[0]], [[n] for n in parts[1]], \
                    [[g] for g in parts[2]]
            else:
                for store, new in zip((self.points, self.nbr, self.group), parts):
                    for lst, arr in zip(store, new):
                        lst.append(arr)
        for store in (self.points, self.nbr, self.group):
            for i, lst in enumerate(store):
                store[i] = [np.concatenate(lst)] if len(lst) > 1 else lst
        self.count += len(clouds)

    def batch(self, idx) -> EncoderPlan:
        idx = np.asarray(idx)
        pts = [p[0][idx] for p in self.points]
        nbr = [n[0][idx].astype(np.intp) for n in self.nbr]
        group = [g[0][idx].astype(np.intp) for g in self.group]
        b = np.arange(len(idx))[:, None, None]
        rel = [(p[:, :, None, :] - p[b, n]) / self.cfg.coord_scale for p, n in zip(pts, nbr)]
        return EncoderPlan(pts, rel, nbr, [], group)


class Dataset:
    """Expert-labelled frames from recorded traces, with provenance per frame."""

    def __init__(self, frame_stride: int = 1):
        self.frame_stride = frame_stride
        self.traces: list[TraceRecord] = []
        self.accident: list[bool] = []
        self.samples: list[Sample] = []
        self.clouds: list[np.ndarray] = []
        self._plans: dict[tuple, _PlanStore] = {}
        self._fused_clouds: list[np.ndarray] = []

    def __len__(self):
        return len(self.samples)

    def add(self, trace: TraceRecord, accident: bool | None = None) -> int:
        """Append a recorded trace; returns the number of frames added."""
        if accident is None:
            accident = bool(trace.header.get("scenario", {}).get("accident_enabled", False))
        # store what the trace file stores, so in-memory and reloaded datasets train identically
        trace = decode_trace(encode_trace(trace))
        tid = len(self.traces)
        ego = trace.ego_id
        added = 0
        # the stride thins cruise frames only; frames where the expert is holding back are always kept
        kept = [f for i, f in enumerate(trace.frames) if i % self.frame_stride == 0 or f.reason != "go"]
        for f in kept:
            if f.ego_points is None:
                raise ValueError(f"trace {tid}: frame {f.frame} has no observation (record=False trace)")
            act = np.asarray(f.expert_action, dtype=np.float64)
            if act.shape != (3,) or not np.all(np.isfinite(act)) or np.any(act < [0, 0, -1]) or np.any(act > 1):
                raise ValueError(f"trace {tid}: frame {f.frame} has an invalid expert action {act}")
            me = f.vehicle(ego)
            ego_idx = self._cloud(f.ego_points)
            nbrs = [(self._cloud(n.points), n.pose) for n in f.neighbors]
            self.samples.append(Sample(ego_idx, nbrs, Pose(*me.pose), float(me.speed), act, tid, bool(accident)))
            added += 1
        self.traces.append(trace)
        self.accident.append(bool(accident))
        return added

    def _cloud(self, pts) -> int:
        self.clouds.append(np.asarray(pts, dtype=np.float64))
        return len(self.clouds) - 1

    # -- geometry caches

    def plans(self, cfg: EncoderConfig) -> _PlanStore:
        key = tuple(sorted(asdict(cfg).items()))
        store = self._plans.setdefault(key, _PlanStore(cfg))
        if len(store) < len(self.clouds):
            store.extend(self.clouds[len(store):])
        return store

    def fused_plans(self, cfg: EncoderConfig) -> _PlanStore:
        """Plans of the early-fusion input, one merged cloud per sample."""
        for i in range(len(self._fused_clouds), len(self.samples)):
            s = self.samples[i]
            self._fused_clouds.append(fuse_clouds(self.clouds[s.ego], [(self.clouds[c], p) for c, p in s.neighbours],
                                                  s.ego_pose, cfg.input_points))
        key = ("fused",) + tuple(sorted(asdict(cfg).items()))
        store = self._plans.setdefault(key, _PlanStore(cfg))
        if len(store) < len(self._fused_clouds):
            store.extend(self._fused_clouds[len(store):])
        return store

    # -- persistence

    def manifest(self) -> list[dict]:
        counts = np.bincount([s.trace for s in self.samples], minlength=len(self.traces))
        return [dict(trace_id=i, file=f"trace_{i:04d}.trace", accident=a, frames=int(counts[i]))
                for i, a in enumerate(self.accident)]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        rows = self.manifest()
        for row, tr in zip(rows, self.traces):
            save_trace(d / row["file"], tr)
        (d / MANIFEST).write_text(json.dumps(dict(frame_stride=self.frame_stride, traces=rows), indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        meta = json.loads((d / MANIFEST).read_text())
        ds = cls(int(meta.get("frame_stride", 1)))
        for row in meta["traces"]:
            n = ds.add(load_trace(d / row["file"]), bool(row["accident"]))
            if n != row["frames"]:
                raise ValueError(f"{d}: manifest says {row['frames']} frames for {row['file']}, found {n}")
        return ds


# ---------------------------------------------------------------- network forward

def forward_batch(params: dict[str, Tensor], data: Dataset, idx, cfg: EncoderConfig, mode: str) -> Tensor:
    """Unclipped (F, 3) actions for the dataset samples ``idx``."""
    samples = [data.samples[i] for i in idx]
    if mode == "early_fusion":
        store = data.fused_plans(cfg)
        clouds = list(idx)
        layout = [(0, [])] * len(samples)
        plan = store.batch(clouds)
    else:
        store = data.plans(cfg)
        clouds, layout = [], []
        for s in samples:
            nb = s.neighbours if mode == "cooperative" else []
            layout.append((len(clouds), [pose for _, pose in nb]))
            clouds.append(s.ego)
            clouds.extend(c for c, _ in nb)
        plan = store.batch(clouds)
    feats = encode_features(plan, params, cfg)
    c, k, d = feats.shape
    rows = ad.reshape(feats, (c * k, d))
    kp = plan.keypoints
    frames = []
    for s, (start, poses) in zip(samples, layout):
        # neighbour keypoints reach the ego as float32 on the wire
        nb = [(kp[start + 1 + j].astype(np.float32).astype(np.float64), pose) for j, pose in enumerate(poses)]
        frames.append((kp[start], nb, s.ego_pose))
    fused = aggregate_features(rows, plan_aggregate(frames, cfg), params, cfg)
    speeds = np.array([s.speed for s in samples]) / cfg.speed_limit
    return head_raw(fused, speeds, params)


# ---------------------------------------------------------------- policy

class LearnedPolicy(Policy):
    """The trained student; ``act`` clips and applies the speed limiter."""

    def __init__(self, params: dict[str, Tensor], cfg: EncoderConfig, mode: str = "cooperative",
                 name: str | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown policy mode {mode!r}; expected one of {MODES}")
        self.params = {k: Tensor(np.asarray(ad.as_tensor(v).data)) for k, v in params.items()}
        self.cfg = cfg
        self.mode = mode
        self.name = name or mode
        self.shares = mode != "no_v2v"
        self.input_points = cfg.input_points
        self.keypoints = cfg.keypoints

    def prepare(self, frame: int, senders: list[tuple[int, Pose, np.ndarray]]) -> list[Message]:
        if self.mode == "early_fusion":
            return [Message(vid, frame, pose, pts) for vid, pose, pts in senders]
        if self.mode == "no_v2v":
            return super().prepare(frame, senders)
        plan = plan_encoder(np.stack([pts for _, _, pts in senders]), self.cfg)
        feats = encode_features(plan, self.params, self.cfg).data
        return [Message(vid, frame, pose, plan.keypoints[i], feats[i]) for i, (vid, pose, _) in enumerate(senders)]

    def raw_action(self, obs: Observation) -> np.ndarray:
        pts = obs.ego_points
        neighbours = []
        if self.mode == "early_fusion":
            pts = fuse_clouds(pts, [(d.message.keypoints, d.pose) for d in obs.delivered], obs.ego_pose,
                              self.cfg.input_points)
        elif self.mode == "cooperative":
            neighbours = [(Representation(d.message.keypoints, d.message.features), d.message.sender_pose)
                          for d in obs.delivered]
        plan = plan_encoder(pts, self.cfg)
        feats = encode_features(plan, self.params, self.cfg)
        ego = Representation(plan.keypoints[0], ad.reshape(feats, feats.shape[1:]))
        fused = aggregate(ego, neighbours, obs.ego_pose, self.params, self.cfg)
        speed = np.array([obs.ego_speed / self.cfg.speed_limit])
        return head_raw(ad.reshape(fused, (1, fused.shape[0])), speed, self.params).data[0]

    def act(self, obs: Observation) -> np.ndarray:
        action = clip_action(self.raw_action(obs))
        return pid_speed_limit(action, obs.ego_speed, self.cfg.speed_limit)


# ---------------------------------------------------------------- training loops

def _epoch_order(rng: np.random.Generator, n: int, batch: int):
    order = rng.permutation(n)
    return [order[s:s + batch] for s in range(0, n, batch)]


def train_epochs(params: dict[str, Tensor], data: Dataset, cfg: EncoderConfig, mode: str, tcfg: TrainConfig,
                 epochs: int, rng: np.random.Generator, opt: Adam | None = None,
                 log: Callable[[str], None] | None = None) -> list[float]:
    """Mini-batch Adam on the control loss; returns the mean loss of each epoch."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    opt = opt or Adam(params, tcfg.learning_rate)
    targets = np.stack([s.action for s in data.samples])
    steps = epochs * math.ceil(len(data) / tcfg.batch_size)
    step = 0
    curve = []
    for ep in range(epochs):
        total, seen = 0.0, 0
        for idx in _epoch_order(rng, len(data), tcfg.batch_size):
            # cosine decay from the base step within each call (one BC run or one DAgger round)
            opt.lr = tcfg.learning_rate * 0.5 * (1 + math.cos(math.pi * step / steps))
            step += 1
            opt.zero_grad()
            loss = control_loss(forward_batch(params, data, idx, cfg, mode), targets[idx], tcfg.eta)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        curve.append(total / seen)
        if not math.isfinite(curve[-1]):
            raise FloatingPointError(f"training loss diverged at epoch {ep}")
        if log:
            log(f"epoch {ep + 1}/{epochs} frames {len(data)} loss {curve[-1]:.4f}")
    return curve


def train_bc(data: Dataset, params: dict[str, Tensor], cfg: EncoderConfig, tcfg: TrainConfig,
             mode: str = "cooperative", epochs: int | None = None, log=None):
    """Behaviour cloning on a fixed dataset. Returns (params, per-epoch loss curve)."""
    if mode not in MODES:
        raise ValueError(f"unknown policy mode {mode!r}")
    rng = np.random.default_rng([tcfg.rng_seed, 1])
    curve = train_epochs(params, data, cfg, mode, tcfg, tcfg.bc_epochs if epochs is None else epochs, rng, log=log)
    return params, curve


def training_configs(kind: str, n: int, seed: int, accident_fraction: float,
                     density: tuple[int, int] = (1, 4)) -> list[ScenarioConfig]:
    """``n`` seeded configs of which round(n * accident_fraction) are accident-enabled."""
    cfgs = sample_configs(kind, n, seed, accident=False, density=density)
    n_acc = int(round(n * accident_fraction))
    pick = set(np.random.default_rng([seed, 99]).permutation(n)[:n_acc].tolist())
    for i, c in enumerate(cfgs):
        c.accident_enabled = i in pick
    return cfgs


def bc_configs(kind: str, tcfg: TrainConfig, density: tuple[int, int] = (1, 4)) -> list[ScenarioConfig]:
    """Expert demonstration configs for behaviour cloning."""
    return training_configs(kind, tcfg.bc_traces, tcfg.rng_seed * 1000 + 1, tcfg.accident_fraction, density)


def dagger_configs(kind: str, tcfg: TrainConfig, density: tuple[int, int] = (1, 4)) -> list[ScenarioConfig]:
    """Rollout configs for all DAgger rounds; each round keeps the accident fraction."""
    out = []
    for r in range(tcfg.dagger_rounds):
        out += training_configs(kind, tcfg.trajectories_per_round, tcfg.rng_seed * 1000 + 10 + r,
                                tcfg.accident_fraction, density)
    return out


@dataclass
class _Rollout:
    policy: Policy
    channel: ChannelConfig
    time_limit: float
    beta: float | None = None
    mix_seed: int = 0

    def __call__(self, cfg: ScenarioConfig) -> TraceRecord:
        return run_episode(self.policy, cfg, self.channel, self.time_limit, record=True, beta=self.beta,
                           mix_seed=self.mix_seed)


def collect(policy: Policy, cfgs: list[ScenarioConfig], channel: ChannelConfig | None = None,
            time_limit: float = 60.0, beta: float | None = None, mix_seed: int = 0, jobs: int = 1) -> list[TraceRecord]:
    """Recorded episodes for each config, in config order."""
    return parallel_map(_Rollout(policy, channel or ChannelConfig(), time_limit, beta, mix_seed), list(cfgs), jobs)


def dagger_train(params: dict[str, Tensor], data: Dataset, cfgs: list[ScenarioConfig], cfg: EncoderConfig,
                 tcfg: TrainConfig, mode: str = "cooperative", channel: ChannelConfig | None = None,
                 jobs: int = 1, log=None) -> tuple[dict[str, Tensor], list[dict]]:
    """DAgger rounds on top of a BC-initialised student.

    ``cfgs`` holds the rollout configs for all rounds, consumed
    ``trajectories_per_round`` at a time. Every collected frame is stored with
    the expert's action at that state, whatever action was executed.
    """
    per = tcfg.trajectories_per_round
    if len(cfgs) < per * tcfg.dagger_rounds:
        raise ValueError(f"dagger needs {per * tcfg.dagger_rounds} rollout configs, got {len(cfgs)}")
    rng = np.random.default_rng([tcfg.rng_seed, 2])
    opt = Adam(params, tcfg.learning_rate)
    history = []
    for r in range(tcfg.dagger_rounds):
        beta = dagger_beta(r, tcfg.beta0)
        student = LearnedPolicy(params, cfg, mode)
        batch = cfgs[r * per:(r + 1) * per]
        try:
            traces = collect(student, batch, channel, tcfg.time_limit, beta, mix_seed=tcfg.rng_seed * 1000 + r,
                             jobs=jobs)
        except Exception as exc:   # noqa: BLE001 - surfaced with the round for diagnosis
            raise RuntimeError(f"dagger round {r}: rollout failed: {exc}") from exc
        before = len(data)
        for c, tr in zip(batch, traces):
            data.add(tr, c.accident_enabled)
        executed = [f.executed_expert for tr in traces for f in tr.frames]
        curve = train_epochs(params, data, cfg, mode, tcfg, tcfg.epochs_per_round, rng, opt, log)
        row = dict(round=r, beta=beta, added=len(data) - before, frames=len(data),
                   expert_fraction=float(np.mean(executed)) if executed else float("nan"),
                   outcomes=[tr.outcome for tr in traces], loss=curve)
        history.append(row)
        if log:
            log(f"dagger round {r} beta {beta:.4f} +{row['added']} frames, outcomes {row['outcomes']}")
    return params, history


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: dict[str, Tensor], meta: dict) -> None:
    """CPNP parameters plus the run metadata as a UTF-8 byte vector under ``__meta__.json``."""
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = {k: v for k, v in params.items()}
    out[META_KEY] = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    ad.save_params(path, out)


def load_checkpoint(path, cfg: EncoderConfig | None = None) -> tuple[dict[str, Tensor], dict]:
    """Returns (params, metadata); checks tensor shapes against the encoder config."""
    arrays = ad.load_params(path)
    meta = {}
    if META_KEY in arrays:
        meta = json.loads(arrays.pop(META_KEY).astype(np.uint8).tobytes().decode("utf-8"))
    if cfg is None:
        enc = meta.get("encoder", {})
        cfg = EncoderConfig(**{f.name: enc[f.name] for f in fields(EncoderConfig) if f.name in enc})
    ref = init_params(cfg, 0)
    if set(ref) != set(arrays):
        missing, extra = sorted(set(ref) - set(arrays)), sorted(set(arrays) - set(ref))
        raise ValueError(f"{path}: checkpoint does not match the encoder config (missing {missing[:3]}, extra {extra[:3]})")
    for k, v in ref.items():
        if v.shape != arrays[k].shape:
            raise ValueError(f"{path}: {k} has shape {arrays[k].shape}, config expects {v.shape}")
    return {k: Tensor(arrays[k], requires_grad=True) for k in sorted(arrays)}, meta

"""Point Transformer encoder, representation aggregator and control head.

Geometry (FPS picks, kNN neighbourhoods, voxel assignment) depends only on
coordinates, so it is computed once into "plans" of integer indices. The
differentiable pass then only touches features. That split lets training
cache the plans for every stored frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Pose, batched_fps, knn, relative_points, voxel_keys

THROTTLE, BRAKE, STEER = 0, 1, 2
ACTION_LOW = np.array([0.0, 0.0, -1.0])
ACTION_HIGH = np.array([1.0, 1.0, 1.0])


@dataclass
class EncoderConfig:
    input_points: int = 256
    downsample_rates: tuple[int, int, int] = (1, 4, 4)
    feature_dim: int = 32
    knn_k: int = 8
    keypoints: int = 16
    coord_scale: float = 10.0
    agg_voxel_size: float = 1.0
    speed_limit: float = 6.0
    head_hidden: int = 0  # 0 -> 2 * feature_dim

    def __post_init__(self):
        self.downsample_rates = tuple(int(r) for r in self.downsample_rates)
        prod = math.prod(self.downsample_rates)
        if len(self.downsample_rates) != 3 or min(self.downsample_rates) < 1:
            raise ValueError("downsample_rates must be three positive integers")
        if self.input_points % prod or self.input_points // prod != self.keypoints:
            raise ValueError(
                f"input_points / prod(rates) must equal keypoints: {self.input_points}/{prod} != {self.keypoints}")

    @property
    def hidden(self) -> int:
        return self.head_hidden or 2 * self.feature_dim

    def stage_sizes(self) -> list[int]:
        sizes, n = [], self.input_points
        for r in self.downsample_rates:
            n //= r
            sizes.append(n)
        return sizes


@dataclass
class Representation:
    """K keypoints (sender frame) with their D-dim features."""
    keypoints: np.ndarray
    features: Tensor | np.ndarray

    def feature_array(self) -> np.ndarray:
        return self.features.data if isinstance(self.features, Tensor) else np.asarray(self.features)


# ---------------------------------------------------------------- parameters

def _dense(rng: np.random.Generator, params: dict, name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
    b = rng.uniform(-bound, bound, fan_out)
    if bias:
        params[f"{name}.b"] = Tensor(b, requires_grad=True)


def _block_params(rng, params, prefix, d):
    _dense(rng, params, f"{prefix}.lin_in", d, d)
    for name in ("phi", "psi", "alpha"):
        _dense(rng, params, f"{prefix}.attn.{name}", d, d)
    _dense(rng, params, f"{prefix}.attn.gamma1", d, d)
    # a bias feeding the per-channel softmax over neighbours cancels out, so gamma's last map has none
    _dense(rng, params, f"{prefix}.attn.gamma2", d, d, bias=False)
    _dense(rng, params, f"{prefix}.attn.theta1", 3, d)
    _dense(rng, params, f"{prefix}.attn.theta2", d, d)
    _dense(rng, params, f"{prefix}.lin_out", d, d)


def init_params(cfg: EncoderConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for every dense map."""
    rng = np.random.default_rng(seed)
    d = cfg.feature_dim
    p: dict[str, Tensor] = {}
    _dense(rng, p, "enc.embed", 3, d)
    for b in (1, 2, 3):
        _block_params(rng, p, f"enc.block{b}", d)
    for i in (1, 2):
        _dense(rng, p, f"enc.down{i}", d, d)
    _dense(rng, p, "agg.pos", 3, d)
    _block_params(rng, p, "agg.block", d)
    _dense(rng, p, "head.fc1", d + 1, cfg.hidden)
    _dense(rng, p, "head.fc2", cfg.hidden, cfg.hidden)
    _dense(rng, p, "head.fc3", cfg.hidden, 3)
    return p


def sub_params(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _lin(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    return ad.linear(x, p[f"{name}.w"], p.get(f"{name}.b"))


# ---------------------------------------------------------------- layers

def pt_layer_core(x: Tensor, rel: np.ndarray, nbr: np.ndarray, p: dict[str, Tensor],
                  mask: np.ndarray | None = None) -> Tensor:
    """Vector self-attention over precomputed neighbourhoods.

    ``x`` is (B, N, D) or (N, D); ``nbr`` holds neighbour indices shaped
    (B, N, k) / (N, k); ``rel`` the matching relative positions p_i - p_j.
    ``mask`` (same shape as ``nbr``) marks padding neighbours to ignore.
    """
    phi = _lin(x, p, "phi")
    psi = _lin(x, p, "psi")
    alpha = _lin(x, p, "alpha")
    n = x.shape[-2]
    self_idx = np.broadcast_to(np.arange(n)[:, None], nbr.shape[-2:])
    if nbr.ndim == 3:
        self_idx = np.broadcast_to(self_idx, nbr.shape)
    delta = _lin(ad.relu(_lin(Tensor(rel), p, "theta1")), p, "theta2")
    pre = ad.add(ad.sub(ad.gather_rows(phi, self_idx), ad.gather_rows(psi, nbr)), delta)
    logits = _lin(ad.relu(_lin(pre, p, "gamma1")), p, "gamma2")
    if mask is not None:
        penalty = np.where(mask, -1e9, 0.0)[..., None] * np.ones(logits.shape[-1])
        logits = ad.add(logits, Tensor(penalty))
    weights = ad.softmax(logits, axis=-2)
    values = ad.add(ad.gather_rows(alpha, nbr), delta)
    return ad.total(ad.mul(weights, values), axis=-2)


def pt_block_core(x: Tensor, rel: np.ndarray, nbr: np.ndarray, p: dict[str, Tensor],
                  mask: np.ndarray | None = None) -> Tensor:
    """linear -> attention -> relu -> linear, plus the residual input."""
    h = _lin(x, p, "lin_in")
    h = ad.relu(pt_layer_core(h, rel, nbr, sub_params(p, "attn"), mask))
    return ad.add(x, _lin(h, p, "lin_out"))


def neighbourhood(points: np.ndarray, k: int, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """kNN indices (self included) and scaled relative offsets for a point stack."""
    nbr = knn(points, points, k)
    rel = (points[..., :, None, :] - _take(points, nbr)) / scale
    return nbr, rel


def _take(points: np.ndarray, idx: np.ndarray) -> np.ndarray:
    if points.ndim == 2:
        return points[idx]
    b = np.arange(points.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
    return points[b, idx]


def pt_layer(points, features, params: dict[str, Tensor], knn_k: int, scale: float = 1.0) -> Tensor:
    """Single-cloud Point Transformer layer. ``params`` are the attention maps."""
    pts = np.asarray(points, dtype=np.float64)
    if knn_k > len(pts):
        raise ValueError(f"pt_layer: knn_k={knn_k} exceeds point count {len(pts)}")
    x = ad.as_tensor(features)
    if x.shape[0] != len(pts):
        raise ValueError("pt_layer: features and points disagree on N")
    nbr, rel = neighbourhood(pts, knn_k, scale)
    return pt_layer_core(x, rel, nbr, params)


def pt_block(points, features, params: dict[str, Tensor], knn_k: int, scale: float = 1.0) -> Tensor:
    pts = np.asarray(points, dtype=np.float64)
    if knn_k > len(pts):
        raise ValueError(f"pt_block: knn_k={knn_k} exceeds point count {len(pts)}")
    nbr, rel = neighbourhood(pts, knn_k, scale)
    return pt_block_core(ad.as_tensor(features), rel, nbr, params)


def downsample_core(x: Tensor, group_idx: np.ndarray, p: dict[str, Tensor]) -> Tensor:
    """Project with linear + relu, then max over each kept point's neighbours."""
    h = ad.relu(ad.linear(x, p["w"], p["b"]))
    return ad.max_over(ad.gather_rows(h, group_idx), axis=-2)


def downsample_block(points, features, rate: int, knn_k: int, params: dict[str, Tensor]):
    """FPS keeps N/rate points; each takes the max of its kNN's projected features."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if rate < 1 or n % rate:
        raise ValueError(f"downsample_block: rate {rate} does not divide cardinality {n}")
    m = n // rate
    idx = batched_fps(pts[None], m)[0]
    group = knn(pts[idx], pts, min(knn_k, n))
    return pts[idx], downsample_core(ad.as_tensor(features), group, params)


# ---------------------------------------------------------------- encoder

@dataclass
class EncoderPlan:
    """Integer geometry for a (B, N, 3) stack of clouds."""
    points: list[np.ndarray]          # per stage (B, N_s, 3)
    rel: list[np.ndarray]             # per stage (B, N_s, k_s, 3), scaled
    nbr: list[np.ndarray]             # per stage (B, N_s, k_s)
    sample: list[np.ndarray] = field(default_factory=list)   # per down block (B, N_{s+1})
    group: list[np.ndarray] = field(default_factory=list)    # per down block (B, N_{s+1}, k)

    @property
    def keypoints(self) -> np.ndarray:
        return self.points[-1]

    def select(self, rows) -> "EncoderPlan":
        return EncoderPlan([a[rows] for a in self.points], [a[rows] for a in self.rel], [a[rows] for a in self.nbr],
                           [a[rows] for a in self.sample], [a[rows] for a in self.group])

    @staticmethod
    def stack(plans: list["EncoderPlan"]) -> "EncoderPlan":
        cat = lambda attr: [np.concatenate(parts) for parts in zip(*(getattr(p, attr) for p in plans))]
        return EncoderPlan(cat("points"), cat("rel"), cat("nbr"), cat("sample"), cat("group"))


def plan_encoder(points: np.ndarray, cfg: EncoderConfig) -> EncoderPlan:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    b, n, _ = pts.shape
    if n != cfg.input_points:
        raise ValueError(f"encoder expects {cfg.input_points} points, got {n}")
    if n == 0:
        raise ValueError("encoder: empty cloud")
    stages, rels, nbrs, samples, groups = [], [], [], [], []
    cur = pts
    for i, rate in enumerate(cfg.downsample_rates):
        if i > 0 and rate > 1:
            m = cur.shape[1] // rate
            idx = batched_fps(cur, m)
            new = _take(cur, idx)
            groups.append(knn(new, cur, min(cfg.knn_k, cur.shape[1])))
            samples.append(idx)
            cur = new
        elif i > 0:
            samples.append(np.broadcast_to(np.arange(cur.shape[1]), (b, cur.shape[1])).copy())
            groups.append(knn(cur, cur, min(cfg.knn_k, cur.shape[1])))
        nbr, rel = neighbourhood(cur, min(cfg.knn_k, cur.shape[1]), cfg.coord_scale)
        stages.append(cur)
        rels.append(rel)
        nbrs.append(nbr)
    if cfg.downsample_rates[0] != 1:
        raise ValueError("the first encoder stage must keep full resolution (rate 1)")
    return EncoderPlan(stages, rels, nbrs, samples, groups)


def encode_features(plan: EncoderPlan, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """(B, K, D) keypoint features for a planned cloud stack."""
    x = ad.relu(_lin(Tensor(plan.points[0] / cfg.coord_scale), params, "enc.embed"))
    x = pt_block_core(x, plan.rel[0], plan.nbr[0], sub_params(params, "enc.block1"))
    for s in (1, 2):
        x = downsample_core(x, plan.group[s - 1], sub_params(params, f"enc.down{s}"))
        x = pt_block_core(x, plan.rel[s], plan.nbr[s], sub_params(params, f"enc.block{s + 1}"))
    return x


def encode(points: np.ndarray, cfg: EncoderConfig, params: dict[str, Tensor]) -> Representation:
    """Encode one (input_points, 3) cloud into K keypoints with features."""
    plan = plan_encoder(points, cfg)
    feats = encode_features(plan, params, cfg)
    return Representation(plan.keypoints[0], ad.reshape(feats, feats.shape[1:]))


# ---------------------------------------------------------------- aggregator

@dataclass
class AggregatePlan:
    """Geometry for fusing keypoint sets of several frames at once.

    Rows of the concatenated feature matrix map to pooled voxel cells through
    ``segment``; pooled cells belong to frames through ``frame_of_cell``.
    """
    segment: np.ndarray
    n_cells: int
    centroids: np.ndarray
    nbr: np.ndarray
    rel: np.ndarray
    mask: np.ndarray
    frame_of_cell: np.ndarray
    n_frames: int


def plan_aggregate(frames: list[tuple[np.ndarray, list[tuple[np.ndarray, Pose]], Pose]],
                   cfg: EncoderConfig) -> AggregatePlan:
    """``frames`` holds (ego keypoints, [(neighbour keypoints, neighbour pose)], ego pose).

    The row order of the feature matrix handed to :func:`aggregate_features`
    must be: frame 0 ego rows, frame 0 neighbour rows in list order, frame 1 ...
    """
    segs, cents, nbrs, rels, masks, owner = [], [], [], [], [], []
    offset = 0
    for f, (ego_kp, neighbours, ego_pose) in enumerate(frames):
        pts = [np.asarray(ego_kp, dtype=np.float64)]
        for kp, pose in neighbours:
            pts.append(relative_points(kp, pose, ego_pose))
        pts = np.concatenate(pts)
        seg, n = voxel_keys(pts, cfg.agg_voxel_size)
        counts = np.bincount(seg, minlength=n).astype(np.float64)
        cent = np.stack([np.bincount(seg, weights=pts[:, c], minlength=n) for c in range(3)], axis=1) / counts[:, None]
        k = min(cfg.knn_k, n)
        nbr = knn(cent, cent, k)
        rel = (cent[:, None, :] - cent[nbr]) / cfg.coord_scale
        mask = np.zeros((n, cfg.knn_k), dtype=bool)
        if k < cfg.knn_k:
            pad = cfg.knn_k - k
            nbr = np.concatenate([nbr, np.repeat(np.arange(n)[:, None], pad, axis=1)], axis=1)
            rel = np.concatenate([rel, np.zeros((n, pad, 3))], axis=1)
            mask[:, k:] = True
        segs.append(seg + offset)
        cents.append(cent)
        nbrs.append(nbr + offset)
        rels.append(rel)
        masks.append(mask)
        owner.append(np.full(n, f))
        offset += n
    return AggregatePlan(np.concatenate(segs), offset, np.concatenate(cents), np.concatenate(nbrs),
                         np.concatenate(rels), np.concatenate(masks), np.concatenate(owner), len(frames))


def aggregate_features(feats: Tensor, plan: AggregatePlan, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """(F, D) fused vectors from stacked keypoint features (rows ordered as planned)."""
    pooled = ad.segment_max(feats, plan.segment, plan.n_cells)
    pooled = ad.add(pooled, _lin(Tensor(plan.centroids / cfg.coord_scale), params, "agg.pos"))
    mask = plan.mask if plan.mask.any() else None
    fused = pt_block_core(pooled, plan.rel, plan.nbr, sub_params(params, "agg.block"), mask)
    return ad.segment_max(fused, plan.frame_of_cell, plan.n_frames)


def aggregate(ego: Representation, neighbours: list[tuple[Representation, Pose]], ego_pose: Pose,
              params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Fuse ego and neighbour messages into one D-dim vector."""
    plan = plan_aggregate([(ego.keypoints, [(r.keypoints, pose) for r, pose in neighbours], ego_pose)], cfg)
    rows = [ad.as_tensor(ego.features)] + [ad.as_tensor(r.features) for r, _ in neighbours]
    out = aggregate_features(ad.concat(rows, axis=0) if len(rows) > 1 else rows[0], plan, params, cfg)
    return ad.reshape(out, (out.shape[-1],))


# ---------------------------------------------------------------- control

def head_raw(fused: Tensor, speed_feature: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """Unclipped (F, 3) head output from (F, D) fused features and (F,) speeds."""
    speed = Tensor(np.asarray(speed_feature, dtype=np.float64).reshape(-1, 1))
    x = ad.concat([fused, speed], axis=-1)
    x = ad.relu(_lin(x, params, "head.fc1"))
    x = ad.relu(_lin(x, params, "head.fc2"))
    return _lin(x, params, "head.fc3")


def clip_action(raw) -> np.ndarray:
    return np.clip(np.asarray(raw, dtype=np.float64), ACTION_LOW, ACTION_HIGH)


def control_head(fused, ego_speed: float, params: dict[str, Tensor], speed_limit: float = 6.0) -> np.ndarray:
    """(throttle, brake, steer) clipped to their valid ranges."""
    fused = ad.as_tensor(fused)
    if fused.ndim == 1:
        fused = ad.reshape(fused, (1, fused.shape[0]))
    raw = head_raw(fused, np.array([ego_speed / speed_limit]), params)
    return clip_action(raw.data[0])


def pid_speed_limit(action, ego_speed: float, limit: float, gain: float = 1.0) -> np.ndarray:
    """Cut throttle and brake proportionally to the overspeed; pass through otherwise."""
    if limit <= 0:
        raise ValueError("speed limit must be positive")
    act = np.array(action, dtype=np.float64)
    over = ego_speed - limit
    if over <= 0:
        return act
    act[THROTTLE] = 0.0
    act[BRAKE] = max(act[BRAKE], min(1.0, gain * over / limit))
    return act

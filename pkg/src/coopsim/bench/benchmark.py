"""Fixed-configuration benchmark protocol and traffic-density sweeps."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..channel import ChannelConfig, bandwidth_mbps
from ..jobs import parallel_map
from ..sim.episode import ExpertPolicy, Policy, run_episode
from ..sim.scenarios import ScenarioConfig, sample_configs
from .metrics import Metrics, compute_metrics, config_key

EVAL_SEED = 20240        # frozen manifest seed of the evaluation suite
MESSAGE_RATE_HZ = 10.0


@dataclass
class Cell:
    """One model on one scenario: mean and std over repeats of per-run metrics."""
    model: str
    bandwidth_mbps: float
    sr: tuple[float, float]
    sct: tuple[float, float]
    cr: tuple[float, float]
    timeout: tuple[float, float]
    runs: list[dict]
    episodes: list[dict] = field(default_factory=list)


@dataclass
class BenchmarkReport:
    scenario: str
    n_configs: int
    n_repeats: int
    manifest_hash: str
    cells: list[Cell]
    density: list[int] | None = None
    expert_times: list[float] = field(default_factory=list)

    def cell(self, model: str) -> Cell:
        return next(c for c in self.cells if c.model == model)

    def to_dict(self) -> dict:
        return asdict(self)


def suite(kind: str, n_configs: int = 27, seed: int = EVAL_SEED, density: tuple[int, int] = (1, 4)):
    """The frozen accident-enabled evaluation configs."""
    return sample_configs(kind, n_configs, seed, accident=True, density=density)


def repeat_config(cfg: ScenarioConfig, repeat: int) -> ScenarioConfig:
    """Same scene, different background traffic."""
    if repeat == 0:
        return replace(cfg, traffic_seed=None)
    return replace(cfg, traffic_seed=int(np.random.default_rng([cfg.seed, repeat]).integers(0, 2 ** 31 - 1)))


def manifest_hash(cfgs: list[ScenarioConfig], channel: ChannelConfig, time_limit: float) -> str:
    doc = dict(configs=[c.to_dict() for c in cfgs], channel=vars(channel), time_limit=time_limit)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def policy_bandwidth(policy: Policy, rate_hz: float = MESSAGE_RATE_HZ) -> float:
    """Per-sender message rate in Mbps for what the policy shares each frame."""
    mode = getattr(policy, "mode", None)
    if mode == "cooperative":
        return bandwidth_mbps(policy.keypoints, policy.cfg.feature_dim, rate_hz)
    if mode == "early_fusion":
        return bandwidth_mbps(policy.input_points, 0, rate_hz)
    return 0.0


@dataclass
class _Episode:
    policy: Policy
    channel: ChannelConfig
    time_limit: float

    def __call__(self, cfg: ScenarioConfig):
        tr = run_episode(self.policy, cfg, self.channel, self.time_limit, record=False)
        return tr.header, tr.outcome, tr.t_agent, tr.detail


class _Trace:
    """The slice of a trace that compute_metrics reads."""

    def __init__(self, header, outcome, t_agent, detail):
        self.header, self.outcome, self.t_agent, self.detail = header, outcome, t_agent, detail


def _mean_std(xs):
    return round(float(np.mean(xs)), 6), round(float(np.std(xs)), 6)


def run_benchmark(models: list[Policy], kind: str, n_configs: int = 27, n_repeats: int = 3,
                  seed: int = EVAL_SEED, channel: ChannelConfig | None = None, time_limit: float = 60.0,
                  density: tuple[int, int] = (1, 4), jobs: int = 1, log=None) -> BenchmarkReport:
    """Evaluate every model on the same frozen configs; repeats change background traffic only."""
    if n_configs < 1 or n_repeats < 1:
        raise ValueError("n_configs and n_repeats must be >= 1")
    channel = channel or ChannelConfig()
    names = [m.name for m in models]
    if len(set(names)) != len(names):
        raise ValueError(f"model names must be unique, got {names}")
    base = suite(kind, n_configs, seed, density)
    runs = [[repeat_config(c, r) for c in base] for r in range(n_repeats)]
    flat = [c for run in runs for c in run]
    expert = parallel_map(_Episode(ExpertPolicy(), channel, time_limit), flat, jobs)
    expert_times = {}
    for h, outcome, t, detail in expert:
        if outcome != "success":
            raise RuntimeError(f"expert failed a benchmark config ({outcome}: {detail}): {h['scenario']}")
        expert_times[config_key(h["scenario"])] = t
    cells = []
    for model in models:
        res = [_Trace(*r) for r in parallel_map(_Episode(model, channel, time_limit), flat, jobs)]
        per_run: list[Metrics] = [compute_metrics(res[r * n_configs:(r + 1) * n_configs], expert_times)
                                  for r in range(n_repeats)]
        cells.append(Cell(
            model=model.name, bandwidth_mbps=round(policy_bandwidth(model), 6),
            sr=_mean_std([m.sr for m in per_run]), sct=_mean_std([m.sct for m in per_run]),
            cr=_mean_std([m.cr for m in per_run]), timeout=_mean_std([m.timeout for m in per_run]),
            runs=[{k: round(v, 6) if isinstance(v, float) else v for k, v in asdict(m).items()} for m in per_run],
            episodes=[dict(config=i % n_configs, repeat=i // n_configs, outcome=t.outcome, t_agent=t.t_agent,
                           detail=t.detail) for i, t in enumerate(res)]))
        if log:
            c = cells[-1]
            log(f"{kind} {c.model}: SR {c.sr[0]:.1f} CR {c.cr[0]:.1f} SCT {c.sct[0]:.1f}")
    return BenchmarkReport(kind, n_configs, n_repeats, manifest_hash(flat, channel, time_limit), cells,
                           list(density), [expert_times[config_key(c.to_dict())] for c in flat])


def density_sweep(models: list[Policy], kind: str, densities: list[int], n_configs: int = 27, n_repeats: int = 3,
                  **kw) -> list[tuple[int, BenchmarkReport]]:
    """One benchmark per background density, all other parameters shared; rows sorted by density."""
    out = []
    for d in sorted(set(int(x) for x in densities)):
        if d < 0:
            raise ValueError("densities must be >= 0")
        out.append((d, run_benchmark(models, kind, n_configs, n_repeats, density=(d, d), **kw)))
    return out

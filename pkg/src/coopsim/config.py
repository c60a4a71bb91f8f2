"""Run configuration: one JSON document, every field defaulted, unknown keys rejected."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .bench.benchmark import EVAL_SEED
from .channel import ChannelConfig
from .learning import MODES, TrainConfig
from .model import EncoderConfig
from .sim.scenarios import KINDS

DEFAULT_SEED = 7
SEED_ENV = "COOPSIM_SEED"
CONFIG_NAME = "run_config.json"


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioSection:
    kind: str = "left_turn"
    density: tuple[int, int] = (1, 4)
    spawn_jitter: float = 3.0
    time_limit: float = 60.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; expected one of {KINDS}")
        self.density = tuple(int(d) for d in self.density)
        if len(self.density) != 2 or not 0 <= self.density[0] <= self.density[1]:
            raise ValueError("density must be [lo, hi] with 0 <= lo <= hi")


@dataclass
class TrainingSection(TrainConfig):
    mode: str = "cooperative"

    def __post_init__(self):
        super().__post_init__()
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}; expected one of {MODES}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})


@dataclass
class EvalSection:
    n_configs: int = 27
    n_repeats: int = 3
    manifest_seed: int = EVAL_SEED
    densities: list[int] = field(default_factory=lambda: [0, 2, 4, 6])
    include_expert: bool = True

    def __post_init__(self):
        if self.n_configs < 1 or self.n_repeats < 1:
            raise ValueError("n_configs and n_repeats must be >= 1")


SECTIONS = {"scenario": ScenarioSection, "encoder": EncoderConfig, "channel": ChannelConfig,
            "training": TrainingSection, "eval": EvalSection}


@dataclass
class RunConfig:
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(doc) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        out = {}
        for name, typ in SECTIONS.items():
            body = doc.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            allowed = {f.name for f in fields(typ)}
            bad = sorted(set(body) - allowed)
            if bad:
                raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(bad)}")
            try:
                out[name] = typ(**body)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from exc
        return cls(**out)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return RunConfig.from_dict(doc)


def resolve_seed(flag: int | None, config_seed: int | None) -> int:
    """COOPSIM_SEED > --seed flag > config file > 7."""
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    if flag is not None:
        return flag
    if config_seed is not None:
        return config_seed
    return DEFAULT_SEED


def echo_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    p = d / CONFIG_NAME
    p.write_text(cfg.to_json())
    return p

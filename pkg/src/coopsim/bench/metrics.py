"""Success rate, collision rate and success weighted by completion time."""

from __future__ import annotations

import json
from dataclasses import dataclass

from ..sim.episode import TraceRecord


@dataclass
class Metrics:
    sr: float        # % success
    cr: float        # % collision
    sct: float       # % success weighted by min(1, T_expert / T_agent)
    timeout: float   # % timeout or stagnation
    n: int


def config_key(scenario: dict) -> str:
    """Identity of one (config, background-traffic seed) pair."""
    return json.dumps(scenario, sort_keys=True)


def compute_metrics(traces: list[TraceRecord], expert_times: dict[str, float]) -> Metrics:
    """Aggregate outcomes; ``expert_times`` maps config_key(trace scenario) to the expert's seconds."""
    if not traces:
        raise ValueError("compute_metrics needs at least one trace")
    n = len(traces)
    succ = coll = 0
    weighted = 0.0
    for tr in traces:
        key = config_key(tr.header["scenario"])
        if key not in expert_times:
            raise KeyError(f"no expert time for config {key}")
        if tr.outcome == "success":
            succ += 1
            if tr.t_agent <= 0:
                raise ValueError("successful trace with non-positive completion time")
            weighted += min(1.0, expert_times[key] / tr.t_agent)
        elif tr.outcome == "collision":
            coll += 1
    return Metrics(100.0 * succ / n, 100.0 * coll / n, 100.0 * weighted / n, 100.0 * (n - succ - coll) / n, n)

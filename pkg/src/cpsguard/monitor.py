"""Online safety monitoring: periodic model queries drive switching
between the AI controller and the fallback safety controller.

At every monitoring period boundary (including t=0) the current
concrete state is abstracted and the safety query is checked on the
model. A holding query means the system can probably reach an
unsafe-labeled region, so the verdict is UNSAFE and the safety
controller takes over for the next period; otherwise the AI controller
runs (returning to it after a safe verdict only when switch_back is
set). States the model has never seen resolve per unknown_policy:
"SAFE" switches conservatively, "AI" stays.

Query verdicts for a fixed (model, query) pair are computed for all
states in one pass and memoized on the model, so repeated queries are
lookups; wall time is recorded per query and for the run as a whole.
Recorded timings stay in memory (the serialized outputs are timing-free
so runs with equal seeds produce identical files).
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from . import pmc, stl
from .abstraction import AbstractMdp, abstract_state_of
from .controllers import PidController
from .plants import (
    PlantModel,
    SimConfig,
    SimulationBlowup,
    channel_row,
    controller_action,
    initial_state,
    observe,
    project_state,
    rk4_step,
)
from .signals import InputSignal, Trace, sample

SAFE = "SAFE"
UNSAFE = "UNSAFE"
UNKNOWN = "UNKNOWN"

AI_TAG = 0
SAFE_TAG = 1


@dataclass(frozen=True)
class MonitorConfig:
    query: pmc.PctlFormula
    period: float = 5.0
    unknown_policy: str = "SAFE"  # "SAFE" switches on unknown states, "AI" stays
    switch_back: bool = True
    semantics: str = "MAX"

    def __post_init__(self):
        if self.unknown_policy not in ("SAFE", "AI"):
            raise ValueError(f"unknown_policy must be SAFE or AI, got {self.unknown_policy!r}")
        if not self.period > 0:
            raise ValueError("period must be positive")


@dataclass(frozen=True)
class QueryRecord:
    t: float
    verdict: str  # SAFE or UNSAFE after applying the unknown policy
    raw_unknown: bool  # the state was not in the model
    probability: float | None
    wall_time: float


@dataclass
class MonitoredTrace:
    trace: Trace
    controller_tags: np.ndarray  # per step: AI_TAG or SAFE_TAG
    queries: list[QueryRecord]
    wall_time: float  # whole run including queries

    @property
    def query_time(self) -> float:
        return sum(q.wall_time for q in self.queries)

    @property
    def overhead_ratio(self) -> float:
        return self.query_time / self.wall_time if self.wall_time > 0 else 0.0


def monitor_step(model: AbstractMdp, config: MonitorConfig, q: np.ndarray, t: float = 0.0) -> QueryRecord:
    """One safety query against the model for a concrete state."""
    start = time.perf_counter()
    sid = abstract_state_of(model, q)
    if sid is None:
        verdict = UNSAFE if config.unknown_policy == "SAFE" else SAFE
        return QueryRecord(t, verdict, True, None, time.perf_counter() - start)
    result = pmc.check_all(model, config.query, config.semantics)[sid]
    # The safety query asks for a high probability of reaching the
    # unsafe label, so a holding query means danger.
    verdict = UNSAFE if result.holds else SAFE
    return QueryRecord(t, verdict, False, result.probability, time.perf_counter() - start)


def run_monitored(plant: PlantModel, ai, safe, model: AbstractMdp, config: MonitorConfig,
                  input_signal: InputSignal, simcfg: SimConfig) -> MonitoredTrace:
    """Closed-loop run where the monitor picks the controller each period."""
    per = simcfg.steps_per_control
    period_steps = int(round(config.period / simcfg.dt))
    if abs(period_steps * simcfg.dt - config.period) > 1e-9 or period_steps % per != 0:
        raise ValueError(
            f"monitor period {config.period} must be a multiple of the control period {simcfg.control_period}"
        )
    run_start = time.perf_counter()
    safe_fresh = safe
    active_tag = AI_TAG
    rows, acts, exos, tags = [], [], [], []
    queries: list[QueryRecord] = []
    state = initial_state(plant)
    action = 0.0
    n_steps = simcfg.n_steps
    active = ai
    for i in range(n_steps + 1):
        t = i * simcfg.dt
        exo = sample(input_signal, t)
        if i % period_steps == 0 and i < n_steps:
            record = monitor_step(model, config, channel_row(plant, state, exo, t), t)
            queries.append(record)
            if record.verdict == UNSAFE:
                if active_tag == AI_TAG:
                    # fresh PID state at switch-in
                    safe_fresh = _fresh(safe)
                active, active_tag = safe_fresh, SAFE_TAG
            elif config.switch_back or active_tag == AI_TAG:
                active, active_tag = ai, AI_TAG
        if i % per == 0 and i < n_steps:
            obs = observe(plant, state, exo, t)
            action = controller_action(active, plant, obs, simcfg.control_period)
        rows.append(channel_row(plant, state, exo, t))
        acts.append(action)
        exos.append(exo)
        tags.append(active_tag)
        if i < n_steps:
            state = project_state(plant, rk4_step(plant, state, action, exo, simcfg.dt))
            if not np.all(np.isfinite(state)):
                partial = Trace(simcfg.dt, plant.channels, np.array(rows), np.array(acts), np.array(exos))
                raise SimulationBlowup(f"{plant.name}: state diverged at t={t + simcfg.dt:.3f}", partial)
    trace = Trace(simcfg.dt, plant.channels, np.array(rows), np.array(acts), np.array(exos))
    return MonitoredTrace(
        trace=trace,
        controller_tags=np.array(tags, dtype=int),
        queries=queries,
        wall_time=time.perf_counter() - run_start,
    )


def _fresh(controller):
    if isinstance(controller, PidController):
        pid = dataclasses.replace(controller)
        pid.reset()
        return pid
    return controller


def eval_metrics(trace: Trace, safety_spec: stl.StlFormula, perf_spec: stl.StlFormula) -> tuple[float, float]:
    """Per-step satisfaction fractions for two always-patterns.

    Both specs must be G[a,b](body) with a temporal-free body; the
    returned fractions count the grid steps inside [a, b] whose body
    evaluates non-negative.
    """
    return _step_fraction(trace, safety_spec), _step_fraction(trace, perf_spec)


def _step_fraction(trace: Trace, spec: stl.StlFormula) -> float:
    if not isinstance(spec, stl.Always):
        raise ValueError(f"metric spec must be an always-pattern, got {stl.format_stl(spec)}")
    if stl.horizon(spec.operand) != 0.0:
        raise ValueError("metric spec body must be temporal-free")
    body = stl.robustness_per_step(trace, spec.operand)
    j0, j1 = stl._offsets(spec.lo, spec.hi, trace.dt)
    j1 = min(j1, len(trace) - 1)
    if j1 < j0:
        raise ValueError("metric interval contains no grid point")
    window = body[j0 : j1 + 1]
    return float(np.mean(window >= 0.0))

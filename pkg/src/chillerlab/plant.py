"""Simplified water-cooled chiller plant on a 5-minute timestep.

Physics, per step, given building load ``L`` (tons) and wet-bulb ``Twb`` (degF):

* chillers split the delivered load evenly; each has
  ``COP = eta * T_evap / (T_cond - T_evap)`` (Kelvin) times a quadratic part-load
  penalty ``1 + k (plr - 0.75)^2``, plus a fixed per-machine overhead;
* towers reject ``H = Q (1 + 1/COP)``; fan power ``c_t (H/n)^2 / approach^2`` per
  tower, capped at the fan rating, which also caps the achievable approach;
* pumps follow a cube law in per-pump flow; chilled-water flow is affine in the
  differential-pressure setpoint;
* distribution supply temperature follows its target with a first-order lag
  (15 minute time constant); chiller leaving temperature reaches its setpoint in
  one step, offset by any calibration error of the chiller's own sensor.

Nothing here is fitted to a real facility; defaults are chosen so the qualitative
behaviours (staging crossover, condenser trade-off, free-cooling benefit) hold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .config import FacilityConfig, STEP_MINUTES, evaluate_bound

TON_KW = 3.517
MINUTES_PER_DAY = 1440
N_CHILLERS = 3

SENSORS = (
    "oat_wetbulb", "building_load", "chw_supply_temp", "chw_return_temp",
    "chiller_1_leaving_temp", "chiller_2_leaving_temp", "chiller_3_leaving_temp",
    "cond_water_temp", "cw_flow_meas", "chw_flow", "chw_dp_meas",
    "n_chillers_running", "n_towers_running", "n_cw_pumps_running", "n_chw_pumps_running",
    "n_fc_running", "free_cooling_mode", "unmet_load",
    "chiller_power", "tower_power", "cw_pump_power", "chw_pump_power", "total_power",
)

ACTIONS = (
    "chiller_1_temp", "chiller_2_temp", "chiller_3_temp", "n_mech_chillers", "n_towers",
    "tower_temp", "cw_flow", "n_cw_pumps", "chw_dp", "n_chw_pumps", "n_fc_chillers", "fc_chw_temp",
)


def _kelvin(f):
    return (f - 32.0) * 5.0 / 9.0 + 273.15


@dataclass(frozen=True)
class Fault:
    """One sensor fault. ``magnitude`` is degF/day for drift, the step size for jump."""

    sensor: str
    kind: str  # drift | jump | stuck | gap
    start: int  # minutes
    magnitude: float = 0.0
    end: int | None = None

    def active(self, t: int) -> bool:
        return t >= self.start and (self.end is None or t < self.end)


@dataclass(frozen=True)
class FaultSchedule:
    faults: tuple[Fault, ...] = ()

    def __post_init__(self):
        for f in self.faults:
            if f.kind not in ("drift", "jump", "stuck", "gap"):
                raise ValueError(f"unknown fault kind {f.kind!r}")
            if f.end is not None and f.end <= f.start:
                raise ValueError(f"fault on {f.sensor}: end must be after start")

    def validate_window(self, start: int, end: int) -> None:
        for f in self.faults:
            if f.start < start or f.start >= end or (f.end is not None and f.end > end):
                raise ValueError(f"fault on {f.sensor} lies outside the episode [{start}, {end})")

    def bias(self, sensor: str, t: int) -> float:
        """Additive calibration error of ``sensor`` at time ``t`` (drift + jumps)."""
        b = 0.0
        for f in self.faults:
            if f.sensor != sensor or t < f.start:
                continue
            if f.kind == "drift":
                stop = t if f.end is None else min(t, f.end)
                b += f.magnitude * (stop - f.start) / MINUTES_PER_DAY
            elif f.kind == "jump" and f.active(t):
                b += f.magnitude
        return b


@dataclass(frozen=True)
class SimParams:
    # chillers
    chiller_rated_tons: float = 360.0
    chiller_max_plr: float = 2.0
    carnot_efficiency: float = 0.5
    part_load_optimum: float = 0.75
    part_load_penalty: float = 1.0
    chiller_overhead_kw: float = 8.0
    cond_ratio: float = 1.0  # fraction of condenser water rise seen by the condensing side
    # cooling towers
    tower_fan_coeff: float = 0.0032
    tower_fan_max_kw: float = 60.0
    tower_idle_kw: float = 2.0
    min_approach: float = 2.0
    # pumps
    cw_pump_rated_gpm: float = 2000.0
    cw_pump_rated_kw: float = 40.0
    chw_pump_rated_gpm: float = 2000.0
    chw_pump_rated_kw: float = 30.0
    pump_idle_kw: float = 1.5
    chw_flow_per_psid: float = 120.0
    chw_flow_offset: float = -500.0
    max_chw_rise: float = 16.0  # degF across the distribution loop at full flow use
    # free cooling heat exchangers
    fc_hx_tons: float = 500.0
    fc_hx_approach: float = 2.0
    free_cooling_approach_threshold: float = 10.0
    # dynamics
    supply_time_constant_min: float = 15.0
    no_cooling_supply_temp: float = 60.0
    # exogenous drivers
    load_base: float = 380.0
    load_diurnal: float = 200.0
    load_weekend_factor: float = 0.8
    load_smooth_noise: float = 6.0
    load_noise: float = 4.0
    wetbulb_mean: float = 58.0
    wetbulb_trend_per_day: float = -0.1
    wetbulb_diurnal: float = 5.0
    wetbulb_day_sigma: float = 3.0
    wetbulb_noise: float = 0.3
    # sensor noise (std) added to the recorded value of these sensors
    noise: Mapping[str, float] = field(default_factory=lambda: {
        "chw_supply_temp": 0.05, "chw_flow": 5.0, "chiller_1_leaving_temp": 0.05,
        "chiller_2_leaving_temp": 0.05, "chiller_3_leaving_temp": 0.05, "cond_water_temp": 0.1,
        "cw_pump_power": 0.05, "chw_pump_power": 0.05, "tower_power": 0.05})
    faults: FaultSchedule = field(default_factory=FaultSchedule)

    def __post_init__(self):
        positive = ("chiller_rated_tons", "chiller_max_plr", "carnot_efficiency", "part_load_penalty",
                    "tower_fan_coeff", "tower_fan_max_kw", "cw_pump_rated_gpm", "cw_pump_rated_kw",
                    "chw_pump_rated_gpm", "chw_pump_rated_kw", "chw_flow_per_psid", "fc_hx_tons",
                    "supply_time_constant_min", "free_cooling_approach_threshold")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"SimParams.{name} must be positive")
        if not 0 < self.part_load_optimum < self.chiller_max_plr:
            raise ValueError("part-load optimum must lie inside the operating range")


@dataclass(frozen=True)
class PlantState:
    timestamp: int  # minutes since epoch, multiple of 5
    values: Mapping[str, float]

    def __getitem__(self, key):
        return self.values[key]


# --------------------------------------------------------------------------- exogenous drivers


def _rng(*keys: int) -> np.random.Generator:
    # SeedSequence wants non-negative words; timestamps may precede the epoch
    return np.random.default_rng([int(k) + 2**31 for k in keys])


def _phases(seed: int, n: int) -> np.ndarray:
    return _rng(seed, 7919).uniform(0, 2 * np.pi, n)


def _day_offset(seed: int, day: int, sigma: float) -> float:
    return float(_rng(seed, 104729, day).normal(0, sigma)) if sigma > 0 else 0.0


def exogenous(seed: int, t: int, params: SimParams = SimParams()) -> tuple[float, float]:
    """(wet-bulb degF, building load tons) at minute ``t``; deterministic in (seed, t)."""
    if t % STEP_MINUTES:
        raise ValueError("t must be a multiple of 5 minutes")
    day = t // MINUTES_PER_DAY
    hour = (t % MINUTES_PER_DAY) / 60.0
    weekday = day % 7
    # peak at 15:30, trough at 03:30
    diurnal = math.cos(2 * math.pi * (hour - 15.5) / 24.0)
    white = _rng(seed, t).normal(0, 1, 2)

    ph = _phases(seed, 3)
    smooth = sum(math.sin(2 * math.pi * t / p + phi) for p, phi in zip((173.0, 331.0, 547.0), ph)) / math.sqrt(1.5)
    load = params.load_base + params.load_diurnal * diurnal
    if weekday >= 5:
        load *= params.load_weekend_factor
    load += params.load_smooth_noise * smooth + params.load_noise * white[0]

    # day-level weather offset interpolated between day centres
    x = t / MINUTES_PER_DAY - 0.5
    d0 = math.floor(x)
    w = x - d0
    front = (1 - w) * _day_offset(seed, d0, params.wetbulb_day_sigma) + w * _day_offset(seed, d0 + 1, params.wetbulb_day_sigma)
    wb = (params.wetbulb_mean + params.wetbulb_trend_per_day * (t / MINUTES_PER_DAY)
          + params.wetbulb_diurnal * diurnal + front + params.wetbulb_noise * white[1])
    return float(wb), float(max(load, 0.0))


# --------------------------------------------------------------------------- power model


def chiller_cop(leaving_f: float, cond_mean_f: float, params: SimParams) -> float:
    te = _kelvin(leaving_f)
    lift = max(_kelvin(cond_mean_f) - te, 1.0)
    return params.carnot_efficiency * te / lift


def part_load_factor(plr, params: SimParams):
    return 1.0 + params.part_load_penalty * (plr - params.part_load_optimum) ** 2


def _pump_power(flow: float, n: int, rated_gpm: float, rated_kw: float, idle: float) -> float:
    if n <= 0:
        return 0.0
    return n * (idle + rated_kw * (flow / (n * rated_gpm)) ** 3)


def _tower(heat_tons: float, n: int, target_f: float, wb: float, params: SimParams) -> tuple[float, float]:
    """(fan power kW, achieved leaving temperature degF)."""
    if n <= 0 or heat_tons <= 0:
        return 0.0, max(target_f, wb + params.min_approach)
    per = heat_tons / n
    a_min = max(params.min_approach, per * math.sqrt(params.tower_fan_coeff / params.tower_fan_max_kw))
    approach = max(target_f - wb, a_min)
    fan = min(params.tower_fan_max_kw, params.tower_fan_coeff * per**2 / approach**2)
    return n * (params.tower_idle_kw + fan), wb + approach


def chw_flow_for_dp(dp: float, params: SimParams) -> float:
    return max(params.chw_flow_per_psid * dp + params.chw_flow_offset, 0.0)


def plant_physics(load: float, wb: float, action: Mapping[str, float], params: SimParams,
                  chiller_bias: tuple[float, ...] = (0.0, 0.0, 0.0)) -> dict[str, float]:
    """Instantaneous plant response to ``action`` (no thermal lag)."""
    n_mech = int(round(action["n_mech_chillers"]))
    n_fc = int(round(action["n_fc_chillers"]))
    n_tw = int(round(action["n_towers"]))
    n_cwp = int(round(action["n_cw_pumps"]))
    n_chwp = int(round(action["n_chw_pumps"]))
    cw_flow = float(action["cw_flow"]) if n_cwp > 0 else 0.0
    chw_flow = chw_flow_for_dp(float(action["chw_dp"]), params) if n_chwp > 0 else 0.0
    # the distribution loop cannot carry more than its flow allows at the design rise
    flow_cap = chw_flow * params.max_chw_rise / 24.0
    chiller_kw = 0.0
    leaving: list[float] = []

    if n_mech > 0:
        q = min(load, n_mech * params.chiller_rated_tons * params.chiller_max_plr, flow_cap)
        per = q / n_mech
        plr = per / params.chiller_rated_tons
        leaving = [float(action[f"chiller_{i + 1}_temp"]) - chiller_bias[i] for i in range(n_mech)]
        target = float(action["tower_temp"])
        # condenser temperature depends on rejected heat, which depends on chiller power:
        # two passes starting from a COP guess of 6 are enough at these lifts
        heat = q * (1 + 1 / 6.0)
        for _ in range(2):
            tower_kw, cond = _tower(heat, n_tw, target, wb, params)
            cond_mean = cond + params.cond_ratio * 12.0 * heat / max(cw_flow, 1.0)
            kws = [per * TON_KW / chiller_cop(lv, cond_mean, params) * part_load_factor(plr, params)
                   for lv in leaving]
            heat = q + sum(kws) / TON_KW
        tower_kw, cond = _tower(heat, n_tw, target, wb, params)
        chiller_kw = sum(kws) + n_mech * params.chiller_overhead_kw
        supply_target = float(np.mean(leaving))
    elif n_fc > 0:
        q = min(load, n_fc * params.fc_hx_tons, flow_cap)
        fc_temp = float(action["fc_chw_temp"])
        tower_kw, cond = _tower(q, n_tw, fc_temp - params.fc_hx_approach, wb, params)
        supply_target = max(fc_temp, cond + params.fc_hx_approach)
    else:
        q = 0.0
        tower_kw, cond = _tower(0.0, n_tw, float(action["tower_temp"]), wb, params)
        supply_target = params.no_cooling_supply_temp

    unmet = max(load - q, 0.0)
    if unmet > 0:
        supply_target += 24.0 * unmet / max(chw_flow, 100.0)

    out = {
        "delivered": q,
        "unmet_load": unmet,
        "supply_target": supply_target,
        "leaving": leaving,
        "cond_water_temp": cond,
        "cw_flow": cw_flow,
        "chw_flow": chw_flow,
        "chiller_power": chiller_kw,
        "tower_power": tower_kw,
        "cw_pump_power": _pump_power(cw_flow, n_cwp, params.cw_pump_rated_gpm, params.cw_pump_rated_kw, params.pump_idle_kw),
        "chw_pump_power": _pump_power(chw_flow, n_chwp, params.chw_pump_rated_gpm, params.chw_pump_rated_kw, params.pump_idle_kw),
    }
    out["total_power"] = out["chiller_power"] + out["tower_power"] + out["cw_pump_power"] + out["chw_pump_power"]
    return out


# --------------------------------------------------------------------------- transition


def _chiller_bias(params: SimParams, t: int) -> tuple[float, ...]:
    return tuple(params.faults.bias(f"chiller_{i + 1}_leaving_temp", t) for i in range(N_CHILLERS))


def step(state: PlantState, action: Mapping[str, float], params: SimParams, rng_seed: int,
         exo: tuple[float, float] | None = None) -> tuple[PlantState, float]:
    """Advance one 5-minute step. Returns (next state, reward in kWh, i.e. -energy).

    ``state`` holds true physical values; use :func:`observe` for what sensors read.
    ``exo`` overrides the exogenous (wet-bulb, load) for the step, mainly for tests.
    """
    t1 = state.timestamp + STEP_MINUTES
    wb, load = exo if exo is not None else exogenous(rng_seed, t1, params)
    bias = _chiller_bias(params, state.timestamp)
    phys = plant_physics(load, wb, action, params, bias)

    alpha = 1.0 - math.exp(-STEP_MINUTES / params.supply_time_constant_min)
    rng = _rng(rng_seed, t1, 17)
    supply = state.values["chw_supply_temp"] + alpha * (phys["supply_target"] - state.values["chw_supply_temp"])
    supply += rng.normal(0, params.noise.get("chw_supply_temp", 0.0))
    chw_flow = phys["chw_flow"]
    measured_flow = max(chw_flow + rng.normal(0, params.noise.get("chw_flow", 0.0)), 0.0) if chw_flow > 0 else 0.0
    ret = supply + (24.0 * phys["delivered"] / chw_flow if chw_flow > 0 else 0.0)

    n_mech = int(round(action["n_mech_chillers"]))
    values = {
        "oat_wetbulb": wb,
        "building_load": load,
        "chw_supply_temp": supply,
        "chw_return_temp": ret,
        "cond_water_temp": phys["cond_water_temp"],
        "cw_flow_meas": phys["cw_flow"],
        "chw_flow": measured_flow,
        "chw_dp_meas": float(action["chw_dp"]) if action["n_chw_pumps"] > 0 else 0.0,
        "n_chillers_running": float(n_mech),
        "n_towers_running": float(action["n_towers"]),
        "n_cw_pumps_running": float(action["n_cw_pumps"]),
        "n_chw_pumps_running": float(action["n_chw_pumps"]),
        "n_fc_running": float(action["n_fc_chillers"]) if n_mech == 0 else 0.0,
        "free_cooling_mode": 1.0 if n_mech == 0 and action["n_fc_chillers"] > 0 else 0.0,
        "unmet_load": phys["unmet_load"],
        "chiller_power": phys["chiller_power"],
        "tower_power": phys["tower_power"],
        "cw_pump_power": phys["cw_pump_power"],
        "chw_pump_power": phys["chw_pump_power"],
        "total_power": phys["total_power"],
    }
    for i in range(N_CHILLERS):
        # true water temperature; idle machines sit at return temperature
        values[f"chiller_{i + 1}_leaving_temp"] = phys["leaving"][i] if i < n_mech else ret
    for name, sd in sorted(params.noise.items()):
        if name not in ("chw_supply_temp", "chw_flow") and sd > 0:
            values[name] = max(values[name] + rng.normal(0, sd), 0.0)
    reward = -phys["total_power"] * STEP_MINUTES / 60.0
    return PlantState(t1, values), reward


def initial_state(params: SimParams, seed: int, t0: int, action: Mapping[str, float]) -> PlantState:
    """A settled state at ``t0`` as if ``action`` had been held for a while."""
    wb, load = exogenous(seed, t0, params)
    phys = plant_physics(load, wb, action, params, _chiller_bias(params, t0))
    s = PlantState(t0 - STEP_MINUTES, {"chw_supply_temp": phys["supply_target"]})
    for _ in range(12):
        s, _r = step(s, action, params, seed, exo=(wb, load))
        s = PlantState(t0 - STEP_MINUTES, s.values)
    return PlantState(t0, dict(s.values))


# --------------------------------------------------------------------------- sensors


def observe(state: PlantState, faults: FaultSchedule, t: int | None = None,
            previous: Mapping[str, float] | None = None) -> PlantState:
    """Apply sensor faults: drift/jump add bias, stuck repeats ``previous``, gap gives NaN."""
    t = state.timestamp if t is None else t
    if not faults.faults:
        return state
    vals = dict(state.values)
    for name in {f.sensor for f in faults.faults}:
        if name not in vals:
            continue
        vals[name] = vals[name] + faults.bias(name, t)
        for f in faults.faults:
            if f.sensor != name or not f.active(t):
                continue
            if f.kind == "stuck" and previous is not None and name in previous:
                vals[name] = previous[name]
            elif f.kind == "gap":
                vals[name] = float("nan")
    return PlantState(state.timestamp, vals)


# --------------------------------------------------------------------------- BMS guard


@dataclass
class ControllerState:
    """Who is in charge. After a kick-out the AI stays off until ``re_enable``."""

    ai_enabled: bool = True
    reason: str = ""

    def kick_out(self, reason: str) -> None:
        self.ai_enabled = False
        self.reason = reason

    def re_enable(self) -> None:
        self.ai_enabled = True
        self.reason = ""


@dataclass(frozen=True)
class GuardDecision:
    kind: str  # accept | modify | kick_out
    action: Mapping[str, float] | None = None
    reason: str = ""


def bms_guard(config: FacilityConfig, state: Mapping[str, float], action: Mapping[str, float] | None,
              controller: ControllerState, empty_action_set: bool = False,
              constraint_ids=None) -> GuardDecision:
    """Safety check applied to every AI recommendation before it reaches equipment."""
    if not controller.ai_enabled:
        return GuardDecision("kick_out", None, controller.reason or "AI control disabled")
    if empty_action_set or action is None:
        controller.kick_out("no actions generated")
        return GuardDecision("kick_out", None, "no actions generated")
    for c in config.observation_constraints:
        if constraint_ids is not None and c.id not in constraint_ids:
            continue
        value = state.get(c.constrained_sensor, float("nan"))
        if value != value:
            continue
        bound = evaluate_bound(config, state, c)
        if c.violation(value, bound) > c.tolerance:
            reason = f"constraint violation: {c.id}"
            controller.kick_out(reason)
            return GuardDecision("kick_out", None, reason)
    fixed = dict(action)
    changed = False
    for d in config.action_dims:
        v = float(action[d.name])
        if not bool(d.on_grid(v)):
            fixed[d.name] = float(d.quantize(v))
            changed = True
    if changed:
        return GuardDecision("modify", fixed, "off-grid value clamped")
    return GuardDecision("accept", dict(action))


def with_faults(params: SimParams, faults: FaultSchedule) -> SimParams:
    return replace(params, faults=faults)

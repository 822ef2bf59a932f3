"""Rule-based sequence of operations: the baseline and the fallback controller."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .config import FacilityConfig


@dataclass(frozen=True)
class SooRules:
    chw_setpoint: float = 44.0
    cond_approach: float = 7.0
    cond_clamp: tuple[float, float] = (65.0, 85.0)
    cond_step: float = 2.0  # condenser setpoint moves in coarse steps
    chiller_breakpoints: tuple[float, ...] = (300.0, 600.0)
    hysteresis: float = 20.0
    cw_flow_per_chiller: float = 1200.0
    chw_dp: float = 17.0
    free_cooling_wetbulb: float = 45.0
    free_cooling_hysteresis: float = 2.0
    fc_chw_setpoint: float = 44.0
    fc_breakpoints: tuple[float, ...] = (400.0, 800.0)
    min_toggle_minutes: int = 0  # anti-short-cycle timer on machine starts/stops; 0 disables

    def __post_init__(self):
        for name in ("chiller_breakpoints", "fc_breakpoints"):
            bps = getattr(self, name)
            if any(b >= a for b, a in zip(bps, bps[1:])):
                raise ValueError(f"{name} must be strictly increasing")
        if self.cond_step <= 0:
            raise ValueError("cond_step must be positive")
        if self.hysteresis <= 0 or self.free_cooling_hysteresis <= 0:
            raise ValueError("hysteresis band must be positive")
        if self.cond_clamp[0] > self.cond_clamp[1]:
            raise ValueError("cond_clamp must be [low, high]")
        if self.min_toggle_minutes < 0:
            raise ValueError("min_toggle_minutes must be >= 0")

    @classmethod
    def from_config(cls, config: FacilityConfig) -> "SooRules":
        block = dict(config.extras.get("soo") or {})
        for k in ("cond_clamp", "chiller_breakpoints", "fc_breakpoints"):
            if k in block:
                block[k] = tuple(float(v) for v in block[k])
        return cls(**block)


def staged_count(load: float, breakpoints, current: int, hysteresis: float, base: int = 1) -> int:
    """Equipment count from load breakpoints with a symmetric hysteresis band.

    Stage ``base + k`` is wanted when load exceeds the k-th breakpoint. The count
    only moves up once load passes ``breakpoint + hysteresis`` and only moves down
    once load falls below ``breakpoint - hysteresis``.
    """
    at_least = base + sum(load > b + hysteresis for b in breakpoints)
    at_most = base + sum(load >= b - hysteresis for b in breakpoints)
    return min(max(current, at_least), at_most)


@dataclass
class SooController:
    """Stateful wrapper: remembers staging and mode so hysteresis can act."""

    rules: SooRules = field(default_factory=SooRules)
    n_chillers: int = 1
    n_fc: int = 1
    free_cooling: bool = False
    last_toggle: int | None = None  # minute of the last change in running machines

    def __call__(self, state: Mapping[str, float], t: int | None = None) -> dict[str, float]:
        return self.act(state, t)

    def running(self) -> tuple[int, int]:
        """(mechanical chillers, free-cooling units) currently commanded."""
        return (0, self.n_fc) if self.free_cooling else (self.n_chillers, 0)

    def act(self, state: Mapping[str, float], t: int | None = None) -> dict[str, float]:
        """One decision at minute ``t``; without ``t`` the anti-short-cycle timer is ignored."""
        r = self.rules
        wb = float(state["oat_wetbulb"])
        load = float(state["building_load"])
        before = (self.free_cooling, self.n_chillers, self.n_fc)
        was = self.running()
        if self.free_cooling and wb > r.free_cooling_wetbulb + r.free_cooling_hysteresis:
            self.free_cooling = False
        elif not self.free_cooling and wb < r.free_cooling_wetbulb - r.free_cooling_hysteresis:
            self.free_cooling = True
        self.n_chillers = staged_count(load, r.chiller_breakpoints, self.n_chillers, r.hysteresis)
        self.n_fc = staged_count(load, r.fc_breakpoints, self.n_fc, r.hysteresis)
        if self.running() != was and t is not None:
            if self.last_toggle is not None and t - self.last_toggle < r.min_toggle_minutes:
                self.free_cooling, self.n_chillers, self.n_fc = before
            else:
                self.last_toggle = t
        return soo_action(r, wb, self.n_chillers, self.n_fc, self.free_cooling)


def soo_action(rules: SooRules, wetbulb: float, n_chillers: int, n_fc: int, free_cooling: bool) -> dict[str, float]:
    lo, hi = rules.cond_clamp
    step = rules.cond_step
    cond = float(np.clip(step * round((wetbulb + rules.cond_approach) / step), lo, hi))
    n_mech = 0 if free_cooling else n_chillers
    n_equipment = n_fc if free_cooling else n_chillers
    flow = rules.cw_flow_per_chiller * max(n_equipment, 1)
    return {
        "chiller_1_temp": rules.chw_setpoint,
        "chiller_2_temp": rules.chw_setpoint,
        "chiller_3_temp": rules.chw_setpoint,
        "n_mech_chillers": float(n_mech),
        "n_towers": float(max(n_equipment, 1)),
        "tower_temp": cond,
        "cw_flow": flow,
        "n_cw_pumps": float(max(n_equipment, 1)),
        "chw_dp": rules.chw_dp,
        "n_chw_pumps": float(max(n_equipment, 1)),
        "n_fc_chillers": float(n_fc if free_cooling else 0),
        "fc_chw_temp": rules.fc_chw_setpoint,
    }


def soo_policy(rules: SooRules, state: Mapping[str, float], previous: SooController | None = None) -> dict[str, float]:
    """One SOO decision. Pass the controller from the previous step to keep hysteresis."""
    ctl = previous if previous is not None else SooController(rules)
    return ctl.act(state)

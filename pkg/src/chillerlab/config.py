"""Declarative facility description: sensors, action space, constraints, modes.

The file format is YAML. Top-level keys:

``horizons``
    ``objective_minutes`` and ``constraint_minutes`` (positive multiples of 5).
``sensors``
    list of ``{name, unit, range: [low, high], stuck_check}``. ``stuck_check``
    (default true except for count/boolean units) says whether long runs of
    identical readings mean a frozen sensor.
``actions``
    list of ``{name, kind: continuous, range: [low, high], step}`` or
    ``{name, kind: discrete, values: [...]}``.
``action_constraints``
    list of ``{id, expr: "<lhs> <= <rhs>"}`` (``>=`` also allowed).
``observation_constraints``
    list of ``{id, sensor, direction: max_le | min_ge, bound, tolerance}``.
``modes``
    list of ``{name, active_actions, active_constraints, neutral}`` where
    ``neutral`` maps inactive dims to a number or ``previous``.

Optional blocks ``soo``, ``heuristic`` and ``towers`` are kept verbatim in
``FacilityConfig.extras`` for the modules that consume them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import yaml

from .expr import Const, Expr, ExpressionError, Ref, evaluate, format_expr, parse_expr, refs

STEP_MINUTES = 5
UNITS = ("degF", "tons", "kW", "gpm", "psid", "count", "boolean")
GRID_TOL = 1e-6
# top-level blocks passed through untouched for other modules
EXTRA_BLOCKS = ("version", "soo", "heuristic", "towers", "unit_tests")


class ConfigError(ValueError):
    """Invalid facility configuration. The message names the offending field."""


@dataclass(frozen=True)
class SensorSpec:
    name: str
    unit: str
    plausible_range: tuple[float, float]
    stuck_check: bool = True


@dataclass(frozen=True)
class ActionDimSpec:
    name: str
    kind: str  # continuous | discrete
    range: tuple[float, float]
    step_size: float | None = None
    values: tuple[float, ...] | None = None
    unit: str = ""

    @property
    def allowed_values(self) -> np.ndarray:
        if self.kind == "discrete":
            return np.array(self.values, dtype=float)
        lo, hi = self.range
        n = int(math.floor((hi - lo) / self.step_size + GRID_TOL))
        vals = lo + self.step_size * np.arange(n + 1)
        if hi - vals[-1] > GRID_TOL:
            vals = np.append(vals, hi)
        return np.round(vals, 10)

    def on_grid(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.kind == "discrete":
            return np.isin(v, np.array(self.values, dtype=float))
        lo, hi = self.range
        n = (v - lo) / self.step_size
        in_range = (v >= lo - GRID_TOL) & (v <= hi + GRID_TOL)
        return in_range & ((np.abs(n - np.round(n)) < GRID_TOL) | (np.abs(v - hi) < GRID_TOL))

    def quantize(self, v) -> np.ndarray:
        """Snap to the nearest allowed value."""
        allowed = self.allowed_values
        v = np.asarray(v, dtype=float)
        idx = np.abs(v[..., None] - allowed).argmin(axis=-1)
        return allowed[idx]


@dataclass(frozen=True)
class ActionConstraint:
    id: str
    lhs: Expr
    comparator: str  # "<=" or ">="
    rhs: Expr

    def margin(self, env):
        lhs = evaluate(self.lhs, env)
        rhs = evaluate(self.rhs, env)
        return rhs - lhs if self.comparator == "<=" else lhs - rhs

    @property
    def text(self) -> str:
        return f"{format_expr(self.lhs)} {self.comparator} {format_expr(self.rhs)}"


@dataclass(frozen=True)
class ObservationConstraint:
    id: str
    constrained_sensor: str
    direction: str  # max_le | min_ge
    bound: Expr
    tolerance: float = 0.0

    def satisfied(self, value, bound, tolerance=None):
        tol = self.tolerance if tolerance is None else tolerance
        if self.direction == "max_le":
            return value <= bound + tol
        return value >= bound - tol

    def violation(self, value, bound):
        """Positive amount by which ``value`` is on the wrong side of ``bound``."""
        if self.direction == "max_le":
            return value - bound
        return bound - value


@dataclass(frozen=True)
class ModeSpec:
    name: str
    active_action_dims: frozenset[str]
    active_constraints: frozenset[str]
    neutral: Mapping[str, float | str] = field(default_factory=dict)


@dataclass(frozen=True)
class FacilityConfig:
    sensors: tuple[SensorSpec, ...]
    action_dims: tuple[ActionDimSpec, ...]
    action_constraints: tuple[ActionConstraint, ...]
    observation_constraints: tuple[ObservationConstraint, ...]
    modes: tuple[ModeSpec, ...]
    objective_horizon_minutes: int
    constraint_horizon_minutes: int
    extras: Mapping[str, object] = field(default_factory=dict)

    @property
    def sensor_names(self) -> list[str]:
        return [s.name for s in self.sensors]

    @property
    def action_names(self) -> list[str]:
        return [a.name for a in self.action_dims]

    def sensor(self, name: str) -> SensorSpec:
        for s in self.sensors:
            if s.name == name:
                return s
        raise KeyError(name)

    def action_dim(self, name: str) -> ActionDimSpec:
        for a in self.action_dims:
            if a.name == name:
                return a
        raise KeyError(name)

    def mode(self, name: str) -> ModeSpec:
        for m in self.modes:
            if m.name == name:
                return m
        raise ConfigError(f"unknown mode {name!r}")

    @property
    def objective_steps(self) -> int:
        return self.objective_horizon_minutes // STEP_MINUTES

    @property
    def constraint_steps(self) -> int:
        return self.constraint_horizon_minutes // STEP_MINUTES

    def with_constraints(self, action_constraints=None, observation_constraints=None) -> "FacilityConfig":
        """Copy with replaced constraint lists (mode constraint sets are widened to match)."""
        ac = self.action_constraints if action_constraints is None else tuple(action_constraints)
        oc = self.observation_constraints if observation_constraints is None else tuple(observation_constraints)
        ids = {c.id for c in ac} | {c.id for c in oc}
        old = {c.id for c in self.action_constraints} | {c.id for c in self.observation_constraints}
        modes = tuple(
            ModeSpec(m.name, m.active_action_dims, frozenset((m.active_constraints & ids) | (ids - old)), m.neutral)
            for m in self.modes
        )
        cfg = FacilityConfig(self.sensors, self.action_dims, ac, oc, modes,
                             self.objective_horizon_minutes, self.constraint_horizon_minutes, self.extras)
        _validate(cfg)
        return cfg


@dataclass
class ConstraintReport:
    margins: dict[str, float]
    off_grid: list[str]
    infeasible_pairs: list[tuple[str, str]]

    @property
    def failed(self) -> list[str]:
        return [cid for cid, m in self.margins.items() if m < -GRID_TOL]

    @property
    def passed(self) -> bool:
        return not self.failed and not self.off_grid and not self.infeasible_pairs


# --------------------------------------------------------------------------- parsing


def _err(path: str, msg: str) -> ConfigError:
    return ConfigError(f"{path}: {msg}")


def _require(d, key, path):
    if not isinstance(d, dict) or key not in d:
        raise _err(path, f"missing key {key!r}")
    return d[key]


def _expr(text, path) -> Expr:
    try:
        return parse_expr(text)
    except ExpressionError as e:
        raise _err(path, str(e)) from None


def _split_inequality(text: str, path: str):
    for comp in ("<=", ">="):
        if text.count(comp) == 1 and text.count("<=") + text.count(">=") == 1:
            lhs, rhs = text.split(comp)
            return _expr(lhs, path + " (lhs)"), comp, _expr(rhs, path + " (rhs)")
    raise _err(path, f"expected exactly one '<=' or '>=' in {text!r}")


def parse_config(text: str) -> FacilityConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"syntax error at {where}: {getattr(e, 'problem', e)}") from None
    if not isinstance(doc, dict):
        raise ConfigError("document: expected a mapping at top level")

    horizons = _require(doc, "horizons", "document")
    sensors = []
    for i, s in enumerate(_require(doc, "sensors", "document")):
        p = f"sensors[{i}]"
        lo, hi = (float(v) for v in _require(s, "range", p))
        unit = _require(s, "unit", p)
        if unit not in UNITS:
            raise _err(p + ".unit", f"unknown unit {unit!r}")
        stuck = s.get("stuck_check", unit not in ("count", "boolean"))
        if not isinstance(stuck, bool):
            raise _err(p + ".stuck_check", "expected true or false")
        sensors.append(SensorSpec(str(_require(s, "name", p)), unit, (lo, hi), stuck))

    dims = []
    for i, a in enumerate(_require(doc, "actions", "document")):
        p = f"actions[{i}]"
        name = str(_require(a, "name", p))
        kind = _require(a, "kind", p)
        if kind == "continuous":
            lo, hi = (float(v) for v in _require(a, "range", p))
            dims.append(ActionDimSpec(name, kind, (lo, hi), step_size=float(_require(a, "step", p)),
                                      unit=a.get("unit", "")))
        elif kind == "discrete":
            vals = tuple(float(v) for v in _require(a, "values", p))
            if not vals:
                raise _err(p + ".values", "empty value set")
            dims.append(ActionDimSpec(name, kind, (min(vals), max(vals)), values=vals, unit=a.get("unit", "")))
        else:
            raise _err(p + ".kind", f"unknown kind {kind!r}")

    acs = []
    for i, c in enumerate(doc.get("action_constraints") or []):
        p = f"action_constraints[{i}]"
        lhs, comp, rhs = _split_inequality(str(_require(c, "expr", p)), p + ".expr")
        acs.append(ActionConstraint(str(c.get("id", f"ac{i}")), lhs, comp, rhs))

    ocs = []
    for i, c in enumerate(doc.get("observation_constraints") or []):
        p = f"observation_constraints[{i}]"
        direction = _require(c, "direction", p)
        if direction not in ("max_le", "min_ge"):
            raise _err(p + ".direction", f"unknown direction {direction!r}")
        ocs.append(ObservationConstraint(
            str(c.get("id", f"oc{i}")), str(_require(c, "sensor", p)), direction,
            _expr(str(_require(c, "bound", p)), p + ".bound"), float(c.get("tolerance", 0.0)),
        ))

    modes = []
    for i, m in enumerate(doc.get("modes") or []):
        p = f"modes[{i}]"
        name = _require(m, "name", p)
        if name not in ("mechanical", "free_cooling"):
            raise _err(p + ".name", f"unknown mode {name!r}")
        all_cids = [c.id for c in acs] + [c.id for c in ocs]
        modes.append(ModeSpec(
            name,
            frozenset(m.get("active_actions", [d.name for d in dims])),
            frozenset(m.get("active_constraints", all_cids)),
            dict(m.get("neutral") or {}),
        ))

    extras = {k: v for k, v in doc.items() if k in EXTRA_BLOCKS}
    cfg = FacilityConfig(
        tuple(sensors), tuple(dims), tuple(acs), tuple(ocs), tuple(modes),
        int(_require(horizons, "objective_minutes", "horizons")),
        int(_require(horizons, "constraint_minutes", "horizons")),
        extras,
    )
    _validate(cfg)
    return cfg


def _validate(cfg: FacilityConfig) -> None:
    for name, v in (("horizons.objective_minutes", cfg.objective_horizon_minutes),
                    ("horizons.constraint_minutes", cfg.constraint_horizon_minutes)):
        if v <= 0 or v % STEP_MINUTES:
            raise _err(name, f"must be a positive multiple of {STEP_MINUTES} minutes, got {v}")
    seen = set()
    for i, s in enumerate(cfg.sensors):
        if s.plausible_range[0] >= s.plausible_range[1]:
            raise _err(f"sensors[{i}].range", "low must be < high")
        if s.name in seen:
            raise _err(f"sensors[{i}].name", f"duplicate name {s.name!r}")
        seen.add(s.name)
    sensor_names = set(seen)
    action_names = set()
    for i, a in enumerate(cfg.action_dims):
        p = f"actions[{i}]"
        if a.name in action_names:
            raise _err(p + ".name", f"duplicate action dimension {a.name!r}")
        if a.name in sensor_names:
            raise _err(p + ".name", f"{a.name!r} clashes with a sensor name")
        action_names.add(a.name)
        if a.kind == "continuous":
            lo, hi = a.range
            if not lo < hi:
                raise _err(p + ".range", "low must be < high")
            if not (0 < a.step_size <= hi - lo):
                raise _err(p + ".step", "step must be positive and at most high - low")
    known = sensor_names | action_names
    ids = set()
    for i, c in enumerate(cfg.action_constraints):
        p = f"action_constraints[{i}]"
        used = refs(c.lhs) | refs(c.rhs)
        unknown = used - known
        if unknown:
            raise _err(p, f"unresolved reference(s) {sorted(unknown)}")
        if not used & action_names:
            raise _err(p, "an action constraint must reference at least one action")
        if c.id in ids:
            raise _err(p + ".id", f"duplicate constraint id {c.id!r}")
        ids.add(c.id)
    for i, c in enumerate(cfg.observation_constraints):
        p = f"observation_constraints[{i}]"
        if c.constrained_sensor not in sensor_names:
            raise _err(p + ".sensor", f"unresolved sensor {c.constrained_sensor!r}")
        used = refs(c.bound)
        unknown = used - known
        if unknown:
            raise _err(p + ".bound", f"unresolved reference(s) {sorted(unknown)}")
        if used & action_names:
            raise _err(p + ".bound", "bound contains no action refs (found " + ", ".join(sorted(used & action_names)) + ")")
        if c.constrained_sensor in used:
            raise _err(p + ".bound", f"bound must not reference the constrained sensor {c.constrained_sensor!r}")
        if c.tolerance < 0:
            raise _err(p + ".tolerance", "must be nonnegative")
        if c.id in ids:
            raise _err(p + ".id", f"duplicate constraint id {c.id!r}")
        ids.add(c.id)
    for i, m in enumerate(cfg.modes):
        p = f"modes[{i}]"
        if m.active_action_dims - action_names:
            raise _err(p + ".active_actions", f"unknown dims {sorted(m.active_action_dims - action_names)}")
        if m.active_constraints - ids:
            raise _err(p + ".active_constraints", f"unknown constraints {sorted(m.active_constraints - ids)}")
        for k, v in m.neutral.items():
            if k not in action_names:
                raise _err(p + ".neutral", f"unknown dim {k!r}")
            if v != "previous" and not cfg.action_dim(k).on_grid(float(v)):
                raise _err(p + ".neutral", f"neutral value {v} for {k!r} is not an allowed value")


def load_config(path) -> FacilityConfig:
    return parse_config(Path(path).read_text())


def reference_config_path() -> Path:
    return Path(__file__).with_name("data") / "reference_facility.yaml"


def load_reference_config() -> FacilityConfig:
    return load_config(reference_config_path())


def dump_config(cfg: FacilityConfig) -> str:
    """Serialize back to YAML; ``parse_config(dump_config(c)) == c``."""
    doc: dict = {
        "horizons": {"objective_minutes": cfg.objective_horizon_minutes,
                     "constraint_minutes": cfg.constraint_horizon_minutes},
        "sensors": [{"name": s.name, "unit": s.unit, "range": list(s.plausible_range),
                     "stuck_check": s.stuck_check} for s in cfg.sensors],
        "actions": [],
        "action_constraints": [{"id": c.id, "expr": c.text} for c in cfg.action_constraints],
        "observation_constraints": [
            {"id": c.id, "sensor": c.constrained_sensor, "direction": c.direction,
             "bound": format_expr(c.bound), "tolerance": c.tolerance}
            for c in cfg.observation_constraints
        ],
        "modes": [
            {"name": m.name, "active_actions": sorted(m.active_action_dims),
             "active_constraints": sorted(m.active_constraints), "neutral": dict(m.neutral)}
            for m in cfg.modes
        ],
    }
    for a in cfg.action_dims:
        if a.kind == "continuous":
            doc["actions"].append({"name": a.name, "kind": a.kind, "range": list(a.range),
                                   "step": a.step_size, "unit": a.unit})
        else:
            doc["actions"].append({"name": a.name, "kind": a.kind, "values": list(a.values), "unit": a.unit})
    doc.update({k: v for k, v in cfg.extras.items()})
    return yaml.safe_dump(doc, sort_keys=False)


# --------------------------------------------------------------------------- evaluation


def _single_dim_bound(c: ActionConstraint, action_names: set[str]):
    """(dim, kind, value) when ``c`` is ``dim <= const`` / ``dim >= const`` (either side)."""
    for side, other, flip in ((c.lhs, c.rhs, False), (c.rhs, c.lhs, True)):
        if isinstance(side, Ref) and side.name in action_names and not refs(other):
            try:
                value = float(evaluate(other, {}))
            except ExpressionError:
                return None
            upper = (c.comparator == "<=") != flip
            return side.name, "upper" if upper else "lower", value
    return None


def find_infeasible_pairs(cfg: FacilityConfig) -> list[tuple[str, str]]:
    """Pairs of single-dimension bound constraints with an empty intersection.

    Only constraints of the form ``dim <= c`` / ``dim >= c`` are analysed; general
    infeasibility shows up downstream as an empty candidate set.
    """
    names = set(cfg.action_names)
    bounds = [(c.id, b) for c in cfg.action_constraints if (b := _single_dim_bound(c, names))]
    pairs = []
    for i, (id1, (d1, k1, v1)) in enumerate(bounds):
        for id2, (d2, k2, v2) in bounds[i + 1:]:
            if d1 != d2 or k1 == k2:
                continue
            lo, hi = (v1, v2) if k1 == "lower" else (v2, v1)
            allowed = cfg.action_dim(d1).allowed_values
            if not np.any((allowed >= lo - GRID_TOL) & (allowed <= hi + GRID_TOL)):
                pairs.append((id1, id2))
    return pairs


def _env(state: Mapping[str, float], action: Mapping[str, float]) -> dict:
    env = dict(state)
    env.update(action)
    return env


def check_action(cfg: FacilityConfig, state: Mapping[str, float], action: Mapping[str, float],
                 constraint_ids=None) -> ConstraintReport:
    """Evaluate every action constraint and grid membership for one action.

    ``constraint_ids`` restricts the constraints checked (e.g. the active set of a mode).
    """
    missing = [a for a in cfg.action_names if a not in action]
    if missing:
        raise ConfigError(f"action: missing value(s) for {missing}")
    off_grid = [d.name for d in cfg.action_dims if not bool(d.on_grid(action[d.name]))]
    env = _env(state, action)
    margins = {}
    for c in cfg.action_constraints:
        if constraint_ids is not None and c.id not in constraint_ids:
            continue
        margins[c.id] = float(c.margin(env))
    return ConstraintReport(margins, off_grid, find_infeasible_pairs(cfg))


def evaluate_bound(cfg: FacilityConfig, state: Mapping[str, float], constraint: ObservationConstraint) -> float:
    return float(evaluate(constraint.bound, state))


def mask_for_mode(cfg: FacilityConfig, mode: ModeSpec | str, action: Mapping[str, float],
                  previous: Mapping[str, float] | None = None) -> dict[str, float]:
    """Replace dims inactive in ``mode`` by their neutral value.

    Neutral is the configured constant, or ``previous[dim]`` when configured as
    ``previous`` (the default); without a previous action the input value stays.
    """
    if isinstance(mode, str):
        mode = cfg.mode(mode)
    elif mode not in cfg.modes:
        raise ConfigError(f"unknown mode {mode.name!r}")
    out = dict(action)
    for d in cfg.action_names:
        if d in mode.active_action_dims:
            continue
        neutral = mode.neutral.get(d, "previous")
        if neutral == "previous":
            if previous is not None:
                out[d] = float(previous[d])
        else:
            out[d] = float(neutral)
    return out


def active_action_constraints(cfg: FacilityConfig, mode: ModeSpec | None) -> list[ActionConstraint]:
    if mode is None:
        return list(cfg.action_constraints)
    return [c for c in cfg.action_constraints if c.id in mode.active_constraints]


def active_observation_constraints(cfg: FacilityConfig, mode: ModeSpec | None) -> list[ObservationConstraint]:
    if mode is None:
        return list(cfg.observation_constraints)
    return [c for c in cfg.observation_constraints if c.id in mode.active_constraints]


def constant_bound(value: float) -> Expr:
    return Const(float(value))

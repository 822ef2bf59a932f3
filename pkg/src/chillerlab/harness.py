"""A/B experiments against the rule-based controller, and their analysis."""

from __future__ import annotations

import logging
import time
from pathlib import Path
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
import yaml

from . import trajectory as tj
from .config import STEP_MINUTES, FacilityConfig, check_action
from .expr import evaluate
from .critic import CriticHParams, EnsembleModel, sensitivity, train
from .dataset import ENERGY, TrainingSet, build_targets, clean, filter_ai_only, masks_from_config
from .plant import ControllerState, PlantState, SimParams, bms_guard, initial_state, observe, step
from .policy import (ChillerHeuristicState, DecisionRecord, PolicyHParams, act, chiller_heuristic,
                     generate_candidates, heuristic_fixed_dims, initial_heuristic_state)
from .soo import SooController, SooRules, soo_action

log = logging.getLogger(__name__)

STEPS_PER_DAY = 1440 // STEP_MINUTES


# --------------------------------------------------------------------------- schedule


@dataclass(frozen=True)
class AbSchedule:
    days: int = 28
    first: str = "AI"
    exclusion_minutes: int = 120
    retrain_every_steps: int = STEPS_PER_DAY

    def __post_init__(self):
        if self.days < 1:
            raise ValueError("days must be >= 1")
        if self.exclusion_minutes < 0:
            raise ValueError("exclusion window must be >= 0")
        if self.first not in tj.CONTROLLERS:
            raise ValueError(f"first controller must be one of {tj.CONTROLLERS}")

    def controller_for_day(self, day: int) -> str:
        other = "SOO" if self.first == "AI" else "AI"
        return self.first if day % 2 == 0 else other

    def assignment(self) -> list[str]:
        return [self.controller_for_day(d) for d in range(self.days)]

    @property
    def exclusion_rows(self) -> int:
        return self.exclusion_minutes // STEP_MINUTES


def exclusion_mask(controllers: Sequence[str], rows: int) -> np.ndarray:
    """True for the ``rows`` rows starting at every controller change (first row excluded too)."""
    c = np.asarray(controllers)
    out = np.zeros(len(c), dtype=bool)
    changes = np.flatnonzero(c[1:] != c[:-1]) + 1
    for i in [0, *changes]:
        out[i:i + rows] = True
    return out


# --------------------------------------------------------------------------- agents


@dataclass
class AiAgentSettings:
    policy: PolicyHParams = field(default_factory=PolicyHParams)
    critic: CriticHParams = field(default_factory=CriticHParams)
    monolithic: bool = False
    train_on_soo: bool = False  # ablation switch for the AI-only training rule
    lookback_steps: int = 3
    warmup_days: int = 4
    warmup_hold_steps: int = 3
    warmup_samples: int = 4


def ab_profile(seed: int = 0) -> AiAgentSettings:
    """Settings that fit a 28-day experiment in the time budget on one CPU core.

    Architecture and the policy's ε, α, β stay at their defaults; only the
    candidate cap, the per-direction sample count and the epoch count shrink.
    """
    return AiAgentSettings(policy=PolicyHParams(candidate_cap=1000, samples_per_direction=4, seed=seed),
                           critic=CriticHParams(epochs=40, seed=seed))


class AiAgent:
    def __init__(self, config: FacilityConfig, settings: AiAgentSettings, seed: int = 0):
        self.config = config
        self.settings = settings
        self.seed = seed
        self.masks = masks_from_config(config, monolithic=settings.monolithic)
        self.model: EnsembleModel | None = None
        self.heuristic: ChillerHeuristicState | None = None
        self.trained_rows = -1
        self.train_seconds = 0.0

    def rng(self, t: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, 11, t + 2**31])

    def training_set(self, history: pd.DataFrame) -> TrainingSet:
        cleaned, _ = clean(history, self.config, lookback_steps=self.settings.lookback_steps)
        rows = filter_ai_only(cleaned, enabled=not self.settings.train_on_soo)
        return build_targets(rows, self.config)

    def retrain(self, history: pd.DataFrame) -> None:
        n_ai = int((history["controller"] == "AI").sum())
        if n_ai == self.trained_rows and self.model is not None:
            return
        t0 = time.perf_counter()
        examples = self.training_set(history)
        self.model = train(examples, self.masks, self.settings.critic)
        self.trained_rows = n_ai
        self.train_seconds += time.perf_counter() - t0
        log.info("retrained on %d examples in %.1fs", len(examples), time.perf_counter() - t0)

    def start_control(self, obs: Mapping[str, float], last_toggle: int | None) -> None:
        self.heuristic = initial_heuristic_state(self.config, obs, last_toggle)

    def decide(self, obs: Mapping[str, float], prev_action: Mapping[str, float], t: int,
               keep_table: bool = False) -> tuple[dict | None, DecisionRecord]:
        return act(obs, prev_action, self.model, self.config, self.settings.policy, self.heuristic, None,
                   self.rng(t), t=t, keep_table=keep_table)


# --------------------------------------------------------------------------- episode driver


@dataclass
class ExperimentLog:
    rows: pd.DataFrame
    decisions: pd.DataFrame
    warmup: pd.DataFrame
    kick_outs: list[tuple[int, str]]
    seconds: float
    train_seconds: float
    filter_violations: int | None = None  # survivors breaking the pessimistic filter on re-scan (audit runs)


def _last_toggle(rows: list[dict]) -> int | None:
    for i in range(len(rows) - 1, 0, -1):
        if rows[i]["n_mech_chillers"] != rows[i - 1]["n_mech_chillers"] or \
                rows[i]["n_fc_chillers"] != rows[i - 1]["n_fc_chillers"]:
            return int(rows[i]["timestamp"])
    return None


def _soo_from_state(rules: SooRules, obs: Mapping[str, float], last_toggle: int | None) -> SooController:
    ctl = SooController(rules, last_toggle=last_toggle)
    ctl.free_cooling = float(obs.get("free_cooling_mode", 0.0)) > 0.5
    ctl.n_chillers = max(int(round(obs.get("n_chillers_running", 1))), 1)
    ctl.n_fc = max(int(round(obs.get("n_fc_running", 1))), 1)
    return ctl


def _warmup(config: FacilityConfig, params: SimParams, seed: int, settings: AiAgentSettings,
            rules: SooRules, t_end: int) -> tuple[list[dict], PlantState]:
    """Exploration data gathered before the experiment to bootstrap the first model.

    The behavior policy draws a uniformly random constraint-satisfying action
    around the rule-based action and holds it for a few steps. Rows are labeled
    AI because they are exploration data of the AI's own search space.
    """
    n = settings.warmup_days * STEPS_PER_DAY
    t0 = t_end - n * STEP_MINUTES
    soo = SooController(rules)
    state = initial_state(params, seed, t0, soo_action(rules, params.wetbulb_mean, 1, 1, False))
    hs = ChillerHeuristicState.from_config(config)
    rng = np.random.default_rng([seed, 5])
    hp = PolicyHParams(candidate_cap=256, samples_per_direction=settings.warmup_samples)
    rows = []
    action = None
    prev_obs = None
    for k in range(n):
        t = state.timestamp
        obs = observe(state, params.faults, t, prev_obs).values
        base = soo(obs)
        chiller_heuristic(obs, hs, t)
        if k % settings.warmup_hold_steps == 0 or action is None:
            fixed = heuristic_fixed_dims(hs)
            cands = generate_candidates(config, base, obs, hp, rng, fixed)
            action = cands.action(int(rng.integers(len(cands)))) if len(cands) else base
        else:
            action = {**action, **heuristic_fixed_dims(hs)}
            if not check_action(config, obs, action).passed:
                action = base
        nxt, reward = step(state, action, params, seed)
        rows.append(tj.make_row(t, obs, action, reward, "AI", "accept", day=-1, day_controller="AI"))
        prev_obs, state = obs, nxt
    return rows, state


def run_ab(seed: int, schedule: AbSchedule, config: FacilityConfig, params: SimParams = SimParams(),
           settings: AiAgentSettings | None = None, rules: SooRules | None = None,
           progress: Callable[[int, str], None] | None = None, audit: bool = False) -> ExperimentLog:
    """Alternate AI and SOO days on one seeded plant episode.

    Before every AI day the critic is retrained from scratch on all AI rows
    collected so far (warm-up exploration included). A kick-out hands control to
    the rule-based controller for the rest of that day. ``audit`` re-scans every
    decision's candidate table against the filter inequality.
    """
    t_start = time.perf_counter()
    settings = settings or ab_profile(seed)
    rules = rules or SooRules.from_config(config)
    agent = AiAgent(config, settings, seed)
    warm_rows, state = _warmup(config, params, seed, settings, rules, 0)
    history = list(warm_rows)
    rows: list[dict] = []
    decisions = []
    kick_outs = []
    prev_action = dict((k, history[-1][k]) for k in config.action_names)
    prev_obs = None
    soo = None
    controller = ControllerState()
    violations = 0
    for day in range(schedule.days):
        assigned = schedule.controller_for_day(day)
        obs0 = observe(state, params.faults, state.timestamp, prev_obs).values
        if assigned == "AI":
            agent.retrain(tj.from_rows(history, config))
            controller.re_enable()
            agent.start_control(obs0, _last_toggle(history))
        else:
            controller.kick_out("SOO day")
        soo = _soo_from_state(rules, obs0, _last_toggle(history))
        if progress:
            progress(day, assigned)
        for _ in range(STEPS_PER_DAY):
            t = state.timestamp
            obs = observe(state, params.faults, t, prev_obs).values
            action = None
            guard = "soo"
            acting = "SOO"
            if controller.ai_enabled:
                proposal, rec = agent.decide(obs, prev_action, t, keep_table=audit)
                if audit and rec.table is not None:
                    violations += filter_violations(rec.table, config, settings.policy.pessimism)
                    rec.table = None
                decisions.append(rec)
                decision = bms_guard(config, obs, proposal, controller, empty_action_set=proposal is None)
                guard = decision.kind
                if decision.kind == "kick_out":
                    kick_outs.append((t, decision.reason))
                    soo = _soo_from_state(rules, obs, _last_toggle(history))
                else:
                    action, acting = dict(decision.action), "AI"
            if action is None:
                action = soo(obs, t)
            nxt, reward = step(state, action, params, seed)
            row = tj.make_row(t, obs, action, reward, acting, guard, day=day, day_controller=assigned)
            rows.append(row)
            history.append(row)
            prev_obs, prev_action, state = obs, action, nxt

    df = tj.from_rows(rows, config)
    df["excluded"] = exclusion_mask(df["controller"].to_numpy(), schedule.exclusion_rows)
    return ExperimentLog(df, pd.DataFrame([r.to_row() for r in decisions]), tj.from_rows(warm_rows, config),
                         kick_outs, time.perf_counter() - t_start, agent.train_seconds,
                         violations if audit else None)


# --------------------------------------------------------------------------- analysis


def filter_violations(table: pd.DataFrame, config: FacilityConfig, alpha: float) -> int:
    """Surviving rows of a candidate table whose pessimistic prediction breaks a listed bound."""
    alive = table[table["survives"].astype(bool)]
    bad = np.zeros(len(alive), dtype=bool)
    for c in config.observation_constraints:
        if f"bound:{c.id}" not in alive:
            continue
        mu, sd, u = (alive[f"{k}:{c.id}"].to_numpy(dtype=float) for k in ("mu", "sigma", "bound"))
        bad |= (mu + alpha * sd > u) if c.direction == "max_le" else (mu - alpha * sd < u)
    return int(bad.sum())


@dataclass(frozen=True)
class BucketSpec:
    wetbulb_edges: tuple[float, ...] = tuple(float(x) for x in range(-10, 95, 5))
    load_edges: tuple[float, ...] = tuple(float(x) for x in range(0, 3001, 200))

    def __post_init__(self):
        for name in ("wetbulb_edges", "load_edges"):
            e = getattr(self, name)
            if len(e) < 2 or any(b <= a for a, b in zip(e, e[1:])):
                raise ValueError(f"{name} must be strictly increasing with at least two edges")


class NoComparableConditions(ValueError):
    pass


def hourly(log_df: pd.DataFrame) -> pd.DataFrame:
    """Hourly means per controller; hours not fully covered by one controller are dropped."""
    df = log_df
    if "excluded" in df:
        df = df[~df["excluded"].astype(bool)]
    df = df.assign(hour=df["timestamp"] // 60)
    g = df.groupby(["hour", "controller"], sort=True)
    agg = g.agg(power=("total_power", "mean"), wetbulb=("oat_wetbulb", "mean"), load=("building_load", "mean"),
                n=("total_power", "size")).reset_index()
    full = agg[agg["n"] == 60 // STEP_MINUTES]
    counts = full.groupby("hour")["controller"].transform("size")
    return full[counts == 1].reset_index(drop=True)


@dataclass
class SavingsResult:
    overall: float  # fraction, e.g. 0.07 for 7 %
    table: pd.DataFrame
    unmatched: list[tuple[int, int]]


def bucketed_savings(log_df: pd.DataFrame, buckets: BucketSpec = BucketSpec()) -> SavingsResult:
    """Bucket-matched savings of AI over SOO, weighted by hours spent in each bucket."""
    h = hourly(log_df)
    wb_edges = np.asarray(buckets.wetbulb_edges)
    ld_edges = np.asarray(buckets.load_edges)
    h = h.assign(wb_bin=np.digitize(h["wetbulb"], wb_edges) - 1, load_bin=np.digitize(h["load"], ld_edges) - 1)
    inside = (h["wb_bin"] >= 0) & (h["wb_bin"] < len(wb_edges) - 1) & (h["load_bin"] >= 0) & (h["load_bin"] < len(ld_edges) - 1)
    h = h[inside]
    rows = []
    unmatched = []
    for (wb, ld), grp in h.groupby(["wb_bin", "load_bin"], sort=True):
        ai = grp[grp["controller"] == "AI"]["power"]
        so = grp[grp["controller"] == "SOO"]["power"]
        if len(ai) == 0 or len(so) == 0:
            unmatched.append((int(wb), int(ld)))
            continue
        rows.append({"wb_bin": int(wb), "load_bin": int(ld),
                     "wetbulb_lo": wb_edges[wb], "load_lo": ld_edges[ld],
                     "ai_hours": len(ai), "soo_hours": len(so),
                     "ai_kw": float(ai.mean()), "soo_kw": float(so.mean()),
                     "savings": float((so.mean() - ai.mean()) / so.mean())})
    if not rows:
        raise NoComparableConditions("no comparable conditions: no bucket has hours from both controllers")
    table = pd.DataFrame(rows)
    hours = table["ai_hours"] + table["soo_hours"]
    table["weight"] = hours / hours.sum()
    overall = float((table["weight"] * table["savings"]).sum())
    return SavingsResult(overall, table, unmatched)


def cumulative_savings(log_df: pd.DataFrame, buckets: BucketSpec = BucketSpec()) -> pd.DataFrame:
    """Running (SOO_est - AI)/SOO_est over AI hours, SOO_est from the bucket's SOO mean."""
    res = bucketed_savings(log_df, buckets)
    h = hourly(log_df)
    h = h.assign(wb_bin=np.digitize(h["wetbulb"], buckets.wetbulb_edges) - 1,
                 load_bin=np.digitize(h["load"], buckets.load_edges) - 1)
    ref = res.table.set_index(["wb_bin", "load_bin"])["soo_kw"]
    ai = h[h["controller"] == "AI"].join(ref, on=["wb_bin", "load_bin"]).dropna(subset=["soo_kw"])
    ai = ai.assign(cum_soo=ai["soo_kw"].cumsum(), cum_ai=ai["power"].cumsum())
    ai["cumulative_savings"] = (ai["cum_soo"] - ai["cum_ai"]) / ai["cum_soo"]
    return ai[["hour", "power", "soo_kw", "cumulative_savings"]].reset_index(drop=True)


def constraint_report(log_df: pd.DataFrame, config: FacilityConfig) -> pd.DataFrame:
    """Fraction of non-excluded steps where each observation constraint holds (with tolerance)."""
    df = log_df
    if "excluded" in df:
        df = df[~df["excluded"].astype(bool)]
    if len(df) == 0:
        raise ValueError("empty log")
    out = []
    for ctl in tj.CONTROLLERS:
        part = df[df["controller"] == ctl]
        if len(part) == 0:
            continue
        env = {n: part[n].to_numpy(dtype=float) for n in config.sensor_names}
        row = {"controller": ctl, "steps": len(part)}
        ok_all = np.ones(len(part), dtype=bool)
        for c in config.observation_constraints:
            bound = np.broadcast_to(np.asarray(evaluate(c.bound, env), dtype=float), (len(part),))
            ok = np.asarray(c.satisfied(env[c.constrained_sensor], bound))
            row[c.id] = float(ok.mean())
            ok_all &= ok
        row["all"] = float(ok_all.mean())
        row["mean_rate"] = float(np.mean([row[c.id] for c in config.observation_constraints]))
        out.append(row)
    return pd.DataFrame(out).set_index("controller")


def chiller_toggles(log_df: pd.DataFrame) -> pd.DataFrame:
    """Every change in running machines, with time since the previous change."""
    n = log_df["n_mech_chillers"].to_numpy() + 10 * log_df["n_fc_chillers"].to_numpy()
    ts = log_df["timestamp"].to_numpy()
    idx = np.flatnonzero(n[1:] != n[:-1]) + 1
    rows = []
    prev = None
    for i in idx:
        rows.append({"timestamp": int(ts[i]), "controller": log_df["controller"].iloc[i],
                     "since_previous": None if prev is None else int(ts[i] - prev)})
        prev = ts[i]
    return pd.DataFrame(rows, columns=["timestamp", "controller", "since_previous"])


# --------------------------------------------------------------------------- model unit tests


@dataclass(frozen=True)
class ModelUnitTest:
    """Expected response of one head to moving one action dim at a fixed anchor."""

    name: str
    anchor: Mapping[str, float]
    dim: str
    deltas: tuple[float, ...]
    head: str
    expected: tuple[float, ...]
    norm: float

    def __post_init__(self):
        if not self.norm > 0:
            raise ValueError(f"{self.name}: normalization factor must be positive")
        if len(self.deltas) != len(self.expected):
            raise ValueError(f"{self.name}: one expected change per delta")

    @property
    def relationship(self) -> tuple[str, str]:
        return (self.dim, self.head)


@dataclass(frozen=True)
class UnitTestResult:
    test: ModelUnitTest
    predicted: tuple[float, ...]
    expected: tuple[float, ...]
    errors: tuple[float, ...]  # |predicted - expected| / norm per delta

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors))


def run_unit_tests(model: EnsembleModel, tests: Sequence[ModelUnitTest], config: FacilityConfig) -> list[UnitTestResult]:
    out = []
    for t in tests:
        delta = sensitivity(model, t.anchor, t.dim, t.deltas, config)[:, model.target_names.index(t.head)]
        err = tuple(float(abs(p - e) / t.norm) for p, e in zip(delta, t.expected))
        out.append(UnitTestResult(t, tuple(float(x) for x in delta), t.expected, err))
    return out


def aggregated_metric(results: Sequence[UnitTestResult]) -> float:
    """Mean over relationships of the mean normalized error across that relationship's anchors."""
    if not results:
        raise ValueError("need at least one result")
    per: dict[tuple[str, str], list[float]] = {}
    for r in results:
        per.setdefault(r.test.relationship, []).extend(r.errors)
    return float(np.mean([np.mean(v) for v in per.values()]))


def sweep_expected(config: FacilityConfig, params: SimParams, anchor_state: Mapping[str, float],
                   anchor_action: Mapping[str, float], dim: str, deltas: Sequence[float], head: str) -> tuple[float, ...]:
    """Ground-truth change of a target under the simulator: hold each action for the horizon.

    Runs the plant from the anchor state with the anchor action and with each
    perturbed action, using the anchor's exogenous conditions, and differences
    the resulting targets.
    """
    steps = max(config.objective_steps, config.constraint_steps)

    def target(action):
        s = PlantState(int(anchor_state.get("timestamp", 0)), dict(anchor_state))
        rows = []
        for _ in range(steps + 1):
            nxt, r = step(s, action, params, 0, exo=(anchor_state["oat_wetbulb"], anchor_state["building_load"]))
            rows.append(tj.make_row(s.timestamp, s.values, action, r, "AI"))
            s = nxt
        ts = build_targets(tj.from_rows(rows, config), config)
        return ts.targets[0, ts.target_names.index(head)]

    base = target(anchor_action)
    return tuple(float(target({**anchor_action, dim: anchor_action[dim] + d}) - base) for d in deltas)


def relationship_norms(config: FacilityConfig, relationships: Mapping[tuple[str, str], Sequence[float]]) -> dict:
    """norm_r per (dim, head): a fixed constant for energy, the trend's spread otherwise."""
    energy_norm = float((config.extras.get("unit_tests") or {}).get("energy_norm", 10.0))
    out = {}
    for (dim, head), expected in relationships.items():
        if head == ENERGY:
            out[(dim, head)] = energy_norm
            continue
        e = np.asarray(expected, dtype=float)
        sd = float(e.std())
        out[(dim, head)] = sd if sd > 1e-9 else max(float(np.abs(e).mean()), 1.0)
    return out


def derive_unit_tests(config: FacilityConfig, params: SimParams, anchors: Sequence[Mapping[str, float]],
                      relationships: Sequence[tuple[str, str, Sequence[float]]]) -> list[ModelUnitTest]:
    """Expected trends from simulator sweeps at each anchor (state and action in one mapping).

    Anchors where a perturbed value would leave the action grid are skipped for
    that relationship.
    """
    expected: dict[tuple[str, str], list[tuple[int, tuple[float, ...], tuple[float, ...]]]] = {}
    names = set(config.action_names)
    for dim, head, deltas in relationships:
        spec = config.action_dim(dim)
        for i, anchor in enumerate(anchors):
            if not all(spec.on_grid(anchor[dim] + d) for d in deltas):
                continue
            state = {k: v for k, v in anchor.items() if k not in names}
            action = {k: float(anchor[k]) for k in config.action_names}
            exp = sweep_expected(config, params, state, action, dim, deltas, head)
            expected.setdefault((dim, head), []).append((i, tuple(float(d) for d in deltas), exp))
    norms = relationship_norms(config, {k: [x for _, _, e in v for x in e] for k, v in expected.items()})
    tests = []
    for (dim, head), items in expected.items():
        for i, deltas, exp in items:
            tests.append(ModelUnitTest(f"{dim}->{head}@{i}", dict(anchors[i]), dim, deltas, head, exp,
                                       norms[(dim, head)]))
    return tests


def dump_unit_tests(tests: Sequence[ModelUnitTest], path) -> None:
    docs = [{"name": t.name, "dim": t.dim, "head": t.head, "deltas": list(t.deltas),
             "expected": list(t.expected), "norm": t.norm,
             "anchor": {k: float(v) for k, v in t.anchor.items()}} for t in tests]
    with open(path, "w") as fh:
        yaml.safe_dump({"unit_tests": docs}, fh, sort_keys=False)


def load_unit_tests(path) -> list[ModelUnitTest]:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or not isinstance(doc.get("unit_tests"), list):
        raise ValueError(f"{path}: expected a top-level 'unit_tests' list")
    return [ModelUnitTest(d["name"], {k: float(v) for k, v in d["anchor"].items()}, d["dim"],
                          tuple(float(x) for x in d["deltas"]), d["head"], tuple(float(x) for x in d["expected"]),
                          float(d["norm"])) for d in doc["unit_tests"]]


def reference_unit_tests_path() -> Path:
    return Path(__file__).with_name("data") / "unit_tests.yaml"


def soo_trajectory(config: FacilityConfig, params: SimParams, seed: int, days: int) -> pd.DataFrame:
    """Rule-based operation only, logged as SOO."""
    rules = SooRules.from_config(config)
    soo = SooController(rules)
    state = initial_state(params, seed, 0, soo_action(rules, params.wetbulb_mean, 1, 1, False))
    rows = []
    for _ in range(days * STEPS_PER_DAY):
        action = soo(state.values, state.timestamp)
        nxt, reward = step(state, action, params, seed)
        rows.append(tj.make_row(state.timestamp, state.values, action, reward, "SOO"))
        state = nxt
    return tj.from_rows(rows, config)


def reference_anchors(config: FacilityConfig, params: SimParams, seed: int = 0, n: int = 6) -> list[dict]:
    """Anchors from rule-based operation, plus one with every chiller at 42 F."""
    traj = soo_trajectory(config, params, seed, days=3)
    anchors = fixture_anchors(config, traj, n, seed)
    cold = dict(anchors[0])
    cold.update(chiller_1_temp=42.0, chiller_2_temp=42.0, chiller_3_temp=42.0)
    return anchors + [cold]


# --------------------------------------------------------------------------- action-insensitivity fixture

FIXTURE_RELATIONSHIPS = (
    ("chiller_1_temp", ENERGY, (-0.5, 0.5)),
    ("tower_temp", ENERGY, (-2.0, 2.0)),
    ("chw_dp", ENERGY, (-1.0, 1.0)),
    ("chiller_1_temp", "supply_temp", (-0.5, 0.5)),
    ("tower_temp", "cond_temp_max", (-2.0, 2.0)),
    ("chw_dp", "chw_flow_min", (-1.0, 1.0)),
)


def insensitivity_fixture(config: FacilityConfig, params: SimParams, seed: int, days: int = 6,
                          hold_hours: float = 3.0) -> pd.DataFrame:
    """Rule-based operation with rare, long-held setpoint perturbations.

    Actions barely move between consecutive steps, so the current power reading
    nearly determines the next 15 minutes of energy. A model that can see it
    learns to ignore the actions.
    """
    rules = SooRules.from_config(config)
    soo = SooController(rules)
    rng = np.random.default_rng([seed, 23])
    state = initial_state(params, seed, 0, soo_action(rules, params.wetbulb_mean, 1, 1, False))
    hold = int(hold_hours * 60 // STEP_MINUTES)
    offset = {}
    rows = []
    for k in range(days * STEPS_PER_DAY):
        obs = state.values
        base = soo(obs)
        if k % hold == 0:
            offset = {"chiller_1_temp": float(rng.choice([-1.0, -0.5, 0.0, 0.5, 1.0])),
                      "chiller_2_temp": float(rng.choice([-1.0, -0.5, 0.0, 0.5, 1.0])),
                      "chiller_3_temp": float(rng.choice([-1.0, -0.5, 0.0, 0.5, 1.0])),
                      "tower_temp": float(rng.integers(-6, 7)), "chw_dp": float(rng.choice(np.arange(-3.0, 0.5, 0.5)))}
        action = dict(base)
        for name, d in offset.items():
            spec = config.action_dim(name)
            action[name] = float(spec.quantize(action[name] + d))
        if not check_action(config, obs, action).passed:
            action = base
        nxt, reward = step(state, action, params, seed)
        rows.append(tj.make_row(state.timestamp, obs, action, reward, "AI"))
        state = nxt
    return tj.from_rows(rows, config)


def fixture_anchors(config: FacilityConfig, traj: pd.DataFrame, n: int, seed: int) -> list[dict]:
    rng = np.random.default_rng([seed, 29])
    idx = np.sort(rng.choice(len(traj), size=min(n, len(traj)), replace=False))
    keep = ["timestamp", *config.sensor_names, *config.action_names]
    return [{k: float(traj.iloc[i][k]) for k in keep} for i in idx]


@dataclass
class ArchitectureComparison:
    seed: int
    masked: float
    monolithic: float


def compare_architectures(config: FacilityConfig, params: SimParams, seed: int, hparams: CriticHParams | None = None,
                          n_anchors: int = 8, days: int = 6) -> ArchitectureComparison:
    """Aggregated unit-test metric of the masked multi-tower vs the monolithic critic on one fixture."""
    hparams = hparams or CriticHParams(epochs=40, seed=seed)
    traj = insensitivity_fixture(config, params, seed, days)
    examples = build_targets(traj, config)
    tests = derive_unit_tests(config, params, fixture_anchors(config, traj, n_anchors, seed), FIXTURE_RELATIONSHIPS)
    scores = {}
    for mono in (False, True):
        model = train(examples, masks_from_config(config, monolithic=mono), hparams)
        scores[mono] = aggregated_metric(run_unit_tests(model, tests, config))
    return ArchitectureComparison(seed, scores[False], scores[True])

"""Constrained action search on top of the ensemble critic.

One control decision:

1. the chiller heuristic picks the operating mode and the running chiller count;
2. dims inactive in that mode are pinned to their neutral/previous values;
3. candidate actions are generated around the previous action and pruned
   against the action constraints, then thinned to the candidate cap;
4. the critic predicts energy and constrained-sensor extremes per candidate;
5. candidates whose pessimistic prediction breaks an observation bound are dropped;
6. exploit (prob. ``1 - eps``) takes the lowest ``mu_E + alpha*sigma_E``;
   explore samples a softmax over the optimistic ``-mu_E + alpha*sigma_E``.

An empty candidate or survivor set yields a fallback decision; the caller then
hands control back to the rule-based controller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .config import GRID_TOL, ActionDimSpec, FacilityConfig, active_observation_constraints, evaluate_bound, mask_for_mode
from .critic import EnsembleModel, EnsemblePrediction, predict_features
from .dataset import ENERGY
from .expr import refs

EXPLOIT, EXPLORE, FALLBACK = "exploit", "explore", "fallback"
MECHANICAL, FREE_COOLING = "mechanical", "free_cooling"


@dataclass(frozen=True)
class PolicyHParams:
    epsilon: float = 0.05
    alpha: float = 1.0
    beta: float = 0.01
    candidate_cap: int = 100_000
    seed: int = 0
    samples_per_direction: int = 8
    filter_alpha: float | None = None  # defaults to alpha
    use_heuristic: bool = True  # False hands the chiller count back to the search
    z_scale_scores: bool = True

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.alpha < 0 or (self.filter_alpha is not None and self.filter_alpha < 0):
            raise ValueError("alpha must be >= 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.candidate_cap < 1:
            raise ValueError("candidate_cap must be >= 1")
        if self.samples_per_direction < 0:
            raise ValueError("samples_per_direction must be >= 0")

    @property
    def pessimism(self) -> float:
        return self.alpha if self.filter_alpha is None else self.filter_alpha


# --------------------------------------------------------------------------- candidates


@dataclass
class CandidateSet:
    actions: np.ndarray  # (n, n_dims) in config action order
    names: tuple[str, ...]
    uncapped: int  # count before thinning to the cap

    def __len__(self) -> int:
        return len(self.actions)

    def action(self, i: int) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.actions[i])}


def dim_candidates(spec: ActionDimSpec, prev: float, rng: np.random.Generator, samples: int) -> np.ndarray:
    """Per-dim value set around ``prev``.

    Continuous dims: ``samples`` step magnitudes per direction drawn log-uniformly
    between the grid step and the full range, snapped to the grid, plus no change.
    A grid with no more values than that sampling could produce is taken whole.
    """
    if spec.kind == "discrete":
        return np.array(sorted(spec.values), dtype=float)
    allowed = spec.allowed_values
    if len(allowed) <= 2 * samples + 1:
        return allowed
    lo, hi = spec.range
    lmin, lmax = math.log(spec.step_size), math.log(hi - lo)
    mags = np.exp(rng.uniform(lmin, lmax, size=(2, samples)))
    raw = np.concatenate([[prev], prev + mags[0], prev - mags[1]])
    return np.unique(spec.quantize(np.clip(raw, lo, hi)))


class _Components:
    """Union-find over action dims linked by a shared constraint."""

    def __init__(self, names):
        self.parent = {n: n for n in names}

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        self.parent[self.find(a)] = self.find(b)


def generate_candidates(config: FacilityConfig, prev_action: Mapping[str, float], state: Mapping[str, float],
                        hparams: PolicyHParams, rng: np.random.Generator,
                        fixed: Mapping[str, float] | None = None) -> CandidateSet:
    """Constraint-pruned candidate actions, thinned to the cap.

    ``fixed`` pins dims to one value (heuristic output, mode masking). Dims are
    expanded one at a time and partial assignments are pruned as soon as every
    multi-valued dim of a constraint is assigned. Dims that share no constraint
    form independent blocks, so the uncapped set is the product of the blocks
    and never has to be materialized. When that product ``N`` exceeds the cap,
    each candidate is kept independently with probability ``cap / N`` (the kept
    count is then clipped to the cap).
    """
    fixed = dict(fixed or {})
    names = tuple(config.action_names)
    values = {}
    for spec in config.action_dims:
        if spec.name in fixed:
            values[spec.name] = np.array([float(fixed[spec.name])])
        else:
            values[spec.name] = dim_candidates(spec, float(prev_action[spec.name]), rng, hparams.samples_per_direction)
    empty = CandidateSet(np.zeros((0, len(names))), names, 0)
    multi = {n for n in names if len(values[n]) > 1}
    env0 = {k: float(v) for k, v in state.items()}
    env0.update({n: float(values[n][0]) for n in names if n not in multi})

    uf = _Components(sorted(multi))
    plan = []  # (constraint, multi dims it touches)
    for c in config.action_constraints:
        dims = [d for d in refs(c.lhs) | refs(c.rhs) if d in multi]
        if not dims:
            if float(c.margin(env0)) < -GRID_TOL:
                return empty
            continue
        for d in dims[1:]:
            uf.union(dims[0], d)
        plan.append((c, set(dims)))

    blocks: dict[str, list[str]] = {}
    for n in names:
        if n in multi:
            blocks.setdefault(uf.find(n), []).append(n)
    block_rows = []
    for dims in blocks.values():
        rows = np.zeros((1, 0))
        done: set[str] = set()
        for depth, d in enumerate(dims):
            v = values[d]
            rows = np.hstack([np.repeat(rows, len(v), axis=0), np.tile(v, len(rows))[:, None]])
            done.add(d)
            env = dict(env0)
            env.update({n: rows[:, j] for j, n in enumerate(dims[:depth + 1])})
            keep = np.ones(len(rows), dtype=bool)
            for c, cd in plan:
                if d in cd and cd <= done:
                    keep &= np.asarray(c.margin(env)) >= -GRID_TOL
            rows = rows[keep]
            if len(rows) == 0:
                return empty
        block_rows.append((dims, rows))

    sizes = [len(r) for _, r in block_rows]
    total = math.prod(sizes)
    cap = hparams.candidate_cap
    if total <= cap:
        index = np.arange(total, dtype=np.int64)
    else:
        p = cap / total
        kept = min(int(rng.binomial(total, p)), cap)
        index = np.sort(rng.choice(total, size=kept, replace=False))

    out = np.empty((len(index), len(names)))
    for j, n in enumerate(names):
        if n not in multi:
            out[:, j] = values[n][0]
    rem = index.copy()
    # mixed-radix decode, last block varies fastest
    for dims, rows in reversed(block_rows):
        k = rem % len(rows)
        rem //= len(rows)
        for col, d in enumerate(dims):
            out[:, names.index(d)] = rows[k, col]
    return CandidateSet(out, names, int(total))


# --------------------------------------------------------------------------- filter / select


def constraint_bounds(config: FacilityConfig, state: Mapping[str, float], mode: str | None = None) -> dict[str, float]:
    mode_spec = config.mode(mode) if mode else None
    return {c.id: evaluate_bound(config, state, c) for c in active_observation_constraints(config, mode_spec)}


def filter_candidates(pred: EnsemblePrediction, config: FacilityConfig, state: Mapping[str, float],
                      alpha: float, mode: str | None = None) -> np.ndarray:
    """Indices of candidates whose pessimistic prediction respects every bound."""
    ok = np.ones(len(pred), dtype=bool)
    bounds = constraint_bounds(config, state, mode)
    for c in config.observation_constraints:
        if c.id not in bounds:
            continue
        mu, sd = pred.head(c.id)
        if c.direction == "max_le":
            ok &= mu + alpha * sd <= bounds[c.id]
        else:
            ok &= mu - alpha * sd >= bounds[c.id]
    return np.flatnonzero(ok)


def softmax(scores: np.ndarray, beta: float) -> np.ndarray:
    z = beta * np.asarray(scores, dtype=float)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def select_action(mu_e: np.ndarray, sigma_e: np.ndarray, hparams: PolicyHParams, rng: np.random.Generator,
                  scale: float = 1.0) -> tuple[int, str]:
    """(index into the survivors, branch). ``scale`` divides scores before the softmax."""
    if len(mu_e) == 0:
        return -1, FALLBACK
    x = rng.uniform()
    if x >= hparams.epsilon:
        return int(np.argmax(-mu_e - hparams.alpha * sigma_e)), EXPLOIT
    probs = softmax((-mu_e + hparams.alpha * sigma_e) / scale, hparams.beta)
    return int(rng.choice(len(probs), p=probs)), EXPLORE


# --------------------------------------------------------------------------- chiller heuristic


@dataclass
class ChillerHeuristicState:
    """High-level agent: operating mode and running machine count."""

    count: int = 1
    mode: str = MECHANICAL
    last_toggle: int | None = None  # minutes
    up_thresholds: tuple[float, ...] = (380.0, 700.0)
    down_thresholds: tuple[float, ...] = (340.0, 640.0)
    min_toggle_minutes: int = 120
    free_cooling_wetbulb: float = 45.0
    free_cooling_hysteresis: float = 2.0
    fc_breakpoints: tuple[float, ...] = (400.0, 800.0)
    max_count: int = 3

    def __post_init__(self):
        if len(self.up_thresholds) != len(self.down_thresholds):
            raise ValueError("need one down threshold per up threshold")
        if any(d >= u for u, d in zip(self.up_thresholds, self.down_thresholds)):
            raise ValueError("each down threshold must sit below its up threshold")

    @classmethod
    def from_config(cls, config: FacilityConfig, **overrides) -> "ChillerHeuristicState":
        block = dict(config.extras.get("heuristic") or {})
        for k in ("up_thresholds", "down_thresholds", "fc_breakpoints"):
            if k in block:
                block[k] = tuple(float(v) for v in block[k])
        block.update(overrides)
        return cls(**block)

    def desired(self, state: Mapping[str, float]) -> tuple[str, int]:
        wb = float(state["oat_wetbulb"])
        load = float(state["building_load"])
        mode = self.mode
        if mode == MECHANICAL and wb < self.free_cooling_wetbulb - self.free_cooling_hysteresis:
            mode = FREE_COOLING
        elif mode == FREE_COOLING and wb > self.free_cooling_wetbulb + self.free_cooling_hysteresis:
            mode = MECHANICAL
        if mode == FREE_COOLING:
            return mode, min(1 + sum(load > b for b in self.fc_breakpoints), self.max_count)
        if mode != self.mode:
            # leaving free cooling: size the mechanical plant from scratch
            return mode, min(1 + sum(load > b for b in self.up_thresholds), self.max_count)
        count = self.count
        if count - 1 < len(self.up_thresholds) and count < self.max_count and load > self.up_thresholds[count - 1]:
            return mode, count + 1
        if count >= 2 and load < self.down_thresholds[count - 2]:
            return mode, count - 1
        return mode, count


def chiller_heuristic(state: Mapping[str, float], hs: ChillerHeuristicState, t: int) -> int:
    """Advance the heuristic at minute ``t``; returns the running machine count.

    A change (count or mode) happens only when the thresholds call for it and at
    least ``min_toggle_minutes`` have passed since the previous change.
    """
    mode, count = hs.desired(state)
    if (mode, count) != (hs.mode, hs.count):
        if hs.last_toggle is None or t - hs.last_toggle >= hs.min_toggle_minutes:
            hs.mode, hs.count, hs.last_toggle = mode, count, t
    return hs.count


def heuristic_fixed_dims(hs: ChillerHeuristicState) -> dict[str, float]:
    if hs.mode == FREE_COOLING:
        return {"n_mech_chillers": 0.0, "n_fc_chillers": float(hs.count)}
    return {"n_mech_chillers": float(hs.count), "n_fc_chillers": 0.0}


# --------------------------------------------------------------------------- decision


@dataclass
class DecisionRecord:
    timestamp: int
    generated: int
    uncapped: int
    surviving: int
    branch: str
    mode: str
    action: dict[str, float] | None
    mu: dict[str, float] = field(default_factory=dict)
    sigma: dict[str, float] = field(default_factory=dict)
    table: pd.DataFrame | None = None

    def to_row(self) -> dict:
        row = {"timestamp": self.timestamp, "generated": self.generated, "uncapped": self.uncapped,
               "surviving": self.surviving, "branch": self.branch, "mode": self.mode}
        for k, v in (self.action or {}).items():
            row[f"action:{k}"] = v
        for k, v in self.mu.items():
            row[f"mu:{k}"] = v
        for k, v in self.sigma.items():
            row[f"sigma:{k}"] = v
        return row

    def same_decision(self, other: "DecisionRecord") -> bool:
        return self.to_row() == other.to_row()


def act(state: Mapping[str, float], prev_action: Mapping[str, float], model: EnsembleModel, config: FacilityConfig,
        hparams: PolicyHParams, heuristic_state: ChillerHeuristicState | None, mode: str | None,
        rng: np.random.Generator, t: int | None = None, keep_table: bool = False
        ) -> tuple[dict[str, float] | None, DecisionRecord]:
    """One decision. Returns (action, record); action is None on fallback.

    ``mode`` overrides the heuristic's mode choice when given.
    """
    t = int(state.get("timestamp", 0)) if t is None else t
    fixed: dict[str, float] = {}
    if heuristic_state is not None and hparams.use_heuristic:
        chiller_heuristic(state, heuristic_state, t)
        fixed.update(heuristic_fixed_dims(heuristic_state))
        mode = mode or heuristic_state.mode
    if mode is not None:
        spec = config.mode(mode)
        masked = mask_for_mode(config, spec, prev_action, previous=prev_action)
        for d in config.action_names:
            if d not in spec.active_action_dims:
                fixed.setdefault(d, masked[d])
    cands = generate_candidates(config, prev_action, state, hparams, rng, fixed)
    record = DecisionRecord(t, len(cands), cands.uncapped, 0, FALLBACK, mode or "", None)
    if len(cands) == 0:
        return None, record

    pred = predict_features(model, model.features_for(state, cands.actions, cands.names))
    alive = filter_candidates(pred, config, state, hparams.pessimism, mode)
    record.surviving = len(alive)
    mu_e, sd_e = pred.head(ENERGY)
    scale = float(model.target_norm.std[model.target_names.index(ENERGY)]) if hparams.z_scale_scores else 1.0
    pick, branch = select_action(mu_e[alive], sd_e[alive], hparams, rng, scale)
    if keep_table:
        record.table = candidate_table(cands, pred, config, state, hparams, mode, alive, scale)
    if branch == FALLBACK:
        return None, record
    i = int(alive[pick])
    record.branch = branch
    record.action = cands.action(i)
    record.mu = {n: float(pred.mean[i, k]) for k, n in enumerate(pred.names)}
    record.sigma = {n: float(pred.std[i, k]) for k, n in enumerate(pred.names)}
    return record.action, record


def candidate_table(cands: CandidateSet, pred: EnsemblePrediction, config: FacilityConfig, state: Mapping[str, float],
                    hparams: PolicyHParams, mode: str | None, alive: np.ndarray, scale: float) -> pd.DataFrame:
    """Every candidate with its predictions, bounds, filter verdict and both scores."""
    df = pd.DataFrame(cands.actions, columns=list(cands.names))
    for k, n in enumerate(pred.names):
        df[f"mu:{n}"] = pred.mean[:, k]
        df[f"sigma:{n}"] = pred.std[:, k]
    for cid, u in constraint_bounds(config, state, mode).items():
        df[f"bound:{cid}"] = u
    df["survives"] = np.isin(np.arange(len(df)), alive)
    mu_e, sd_e = pred.head(ENERGY)
    df["exploit_score"] = -mu_e - hparams.alpha * sd_e
    df["explore_score"] = (-mu_e + hparams.alpha * sd_e) / scale
    return df


def initial_heuristic_state(config: FacilityConfig, state: Mapping[str, float], last_toggle: int | None,
                            **overrides) -> ChillerHeuristicState:
    """Heuristic state matching what is currently running (used at handover)."""
    hs = ChillerHeuristicState.from_config(config, **overrides)
    if float(state.get("free_cooling_mode", 0.0)) > 0.5:
        hs.mode, hs.count = FREE_COOLING, max(int(round(state["n_fc_running"])), 1)
    else:
        hs.mode, hs.count = MECHANICAL, max(int(round(state["n_chillers_running"])), 1)
    hs.last_toggle = last_toggle
    return hs


def decisions_frame(records: Sequence[DecisionRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in records])

"""From trajectory logs to normalized training examples.

Row ``t`` of a log holds the observation ``s_t``, the action ``a_t`` chosen from
it, and the reward of the step that follows. Targets for row ``t``:

* energy: mean of ``-12 * reward`` (kWh per 5 min to kW) over the ``n`` steps
  starting at ``t``, where ``n`` is the objective horizon in steps;
* one target per observation constraint: the max (``max_le``) or min
  (``min_ge``) of the constrained sensor over the readings that close each of
  the ``m`` steps starting at ``t``, i.e. rows ``t+1 .. t+m``.

Both windows therefore cover the outcomes of the steps in ``[t, t+h)``. Rows
whose window touches a gap row or a timestamp break are dropped.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .config import FacilityConfig, ObservationConstraint
from .trajectory import segment_ids

log = logging.getLogger(__name__)

ENERGY = "energy"
TRAINING_SET_HEADER = "# chillerlab training set v1"


# --------------------------------------------------------------------------- cleaning


@dataclass
class CleaningReport:
    gap_filled: dict[str, int] = field(default_factory=dict)
    dropped_implausible: dict[str, int] = field(default_factory=dict)
    stuck_runs: dict[str, int] = field(default_factory=dict)
    jumps: dict[str, int] = field(default_factory=dict)
    stuck_run_lengths: dict[str, list[int]] = field(default_factory=dict)
    rows_marked_gap: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _runs(values: np.ndarray, usable: np.ndarray, seg: np.ndarray):
    """(start, length) of maximal runs of equal consecutive usable values within a segment."""
    n = len(values)
    out = []
    i = 0
    while i < n:
        if not usable[i]:
            i += 1
            continue
        j = i + 1
        while j < n and usable[j] and seg[j] == seg[i] and values[j] == values[i]:
            j += 1
        out.append((i, j - i))
        i = j
    return out


def _clean_pass(df: pd.DataFrame, config: FacilityConfig, lookback: int, stuck_steps: int,
                jump_fraction: float):
    seg = segment_ids(df)
    gap = df["gap"].to_numpy(dtype=bool).copy()
    new_gap = np.zeros(len(df), dtype=bool)
    report = CleaningReport()
    out = df.copy()
    idx = np.arange(len(df))
    seg_start = np.zeros(len(df), dtype=np.int64)
    if len(df):
        first = np.concatenate([[True], seg[1:] != seg[:-1]])
        seg_start = np.maximum.accumulate(np.where(first, idx, 0))
    for spec in config.sensors:
        name = spec.name
        x = df[name].to_numpy(dtype=float).copy()
        lo, hi = spec.plausible_range
        live = ~gap
        bad = live & np.isfinite(x) & ((x < lo) | (x > hi))
        x[bad] = np.nan
        usable = live & np.isfinite(x)

        lengths = []
        if spec.stuck_check and stuck_steps > 0:
            for start, length in _runs(x, usable, seg):
                if length >= stuck_steps:
                    lengths.append(length)
                    x[start + 1:start + length] = np.nan

        finite = np.isfinite(x) & live
        pairs = finite[1:] & finite[:-1] & (seg[1:] == seg[:-1])
        n_jumps = int(np.sum(pairs & (np.abs(np.diff(x)) > jump_fraction * (hi - lo))))

        # last usable index at or before each row, restricted to the row's segment
        src = np.maximum.accumulate(np.where(finite, idx, -1)) if len(x) else idx
        missing = live & ~np.isfinite(x)
        prev = np.concatenate([[-1], src[:-1]]) if len(x) else src
        ok = missing & (prev >= seg_start) & (idx - prev <= lookback) & (prev >= 0)
        filled = x.copy()
        filled[ok] = x[prev[ok]]
        new_gap |= missing & ~ok
        out[name] = filled

        report.dropped_implausible[name] = int(bad.sum())
        report.stuck_runs[name] = len(lengths)
        report.stuck_run_lengths[name] = lengths
        report.jumps[name] = n_jumps
        report.gap_filled[name] = int(ok.sum())
    out["gap"] = gap | new_gap
    report.rows_marked_gap = int(new_gap.sum())
    return out, report


def clean(raw: pd.DataFrame, config: FacilityConfig, lookback_steps: int = 3, stuck_steps: int = 6,
          jump_fraction: float = 0.5, max_passes: int = 20) -> tuple[pd.DataFrame, CleaningReport]:
    """Fill short gaps, drop implausible readings, neutralize stuck runs, count jumps.

    A missing reading is filled from the most recent usable reading of the same
    sensor no more than ``lookback_steps`` rows earlier in the same segment;
    otherwise the whole row becomes a gap row. Runs of ``stuck_steps`` or more
    identical readings keep their first value and treat the rest as missing.
    The pass is repeated until nothing changes, so ``clean`` is idempotent.
    The report describes what the first pass found in the raw data.
    """
    if lookback_steps < 0:
        raise ValueError("lookback_steps must be >= 0")
    df = raw.copy()
    if "gap" not in df:
        df["gap"] = False
    df["gap"] = df["gap"].astype(bool)
    report = None
    for _ in range(max_passes):
        nxt, rep = _clean_pass(df, config, lookback_steps, stuck_steps, jump_fraction)
        if report is None:
            report = rep
        done = _same(nxt, df, config)
        df = nxt
        if done:
            break
    report.rows_marked_gap = int(df["gap"].sum() - raw.get("gap", pd.Series(False, index=raw.index)).astype(bool).sum())
    return df, report


def _same(a: pd.DataFrame, b: pd.DataFrame, config: FacilityConfig) -> bool:
    if not np.array_equal(a["gap"].to_numpy(), b["gap"].to_numpy()):
        return False
    x = a[list(config.sensor_names)].to_numpy(dtype=float)
    y = b[list(config.sensor_names)].to_numpy(dtype=float)
    return bool(np.array_equal(x, y, equal_nan=True))


# --------------------------------------------------------------------------- targets


@dataclass
class TrainingSet:
    features: np.ndarray  # (n, n_features)
    feature_names: tuple[str, ...]
    targets: np.ndarray  # (n, 1 + n_constraints); column 0 is energy
    target_names: tuple[str, ...]
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, rows) -> "TrainingSet":
        return TrainingSet(self.features[rows], self.feature_names, self.targets[rows], self.target_names,
                           self.timestamps[rows])

    def column(self, name: str) -> np.ndarray:
        return self.features[:, self.feature_names.index(name)]

    @staticmethod
    def concat(sets: Sequence["TrainingSet"]) -> "TrainingSet":
        sets = [s for s in sets if len(s)] or list(sets[:1])
        return TrainingSet(np.concatenate([s.features for s in sets]), sets[0].feature_names,
                           np.concatenate([s.targets for s in sets]), sets[0].target_names,
                           np.concatenate([s.timestamps for s in sets]))


def feature_names(config: FacilityConfig) -> tuple[str, ...]:
    return (*config.sensor_names, *config.action_names)


def target_names(config: FacilityConfig) -> tuple[str, ...]:
    return (ENERGY, *(c.id for c in config.observation_constraints))


def _window_reduce(x: np.ndarray, start: int, width: int, fn) -> np.ndarray:
    n = len(x)
    m = n - start - width + 1
    if m <= 0:
        return np.zeros(0)
    stacked = np.stack([x[start + k:start + k + m] for k in range(width)])
    return fn(stacked, axis=0)


def build_targets(traj: pd.DataFrame, config: FacilityConfig) -> TrainingSet:
    n_obj = config.objective_steps
    n_con = config.constraint_steps
    names = feature_names(config)
    tnames = target_names(config)
    span = max(n_obj, n_con + 1)  # rows t .. t+span-1 must be clean and contiguous
    n = len(traj)
    if n < span:
        return TrainingSet(np.zeros((0, len(names))), names, np.zeros((0, len(tnames))), tnames,
                           np.zeros(0, dtype=np.int64))
    seg = segment_ids(traj)
    gap = traj["gap"].to_numpy(dtype=bool) if "gap" in traj else np.zeros(n, dtype=bool)
    m = n - span + 1
    valid = np.ones(m, dtype=bool)
    for k in range(span):
        valid &= (seg[k:k + m] == seg[:m]) & ~gap[k:k + m]

    energy = -12.0 * traj["reward_kwh"].to_numpy(dtype=float)
    cols = [_window_reduce(energy, 0, n_obj, np.mean)[:m]]
    for c in config.observation_constraints:
        x = traj[c.constrained_sensor].to_numpy(dtype=float)
        fn = np.max if c.direction == "max_le" else np.min
        cols.append(_window_reduce(x, 1, n_con, fn)[:m])
    targets = np.column_stack(cols)
    feats = traj[list(names)].to_numpy(dtype=float)[:m]
    valid &= np.all(np.isfinite(targets), axis=1) & np.all(np.isfinite(feats), axis=1)
    return TrainingSet(feats[valid], names, targets[valid], tnames,
                       traj["timestamp"].to_numpy(dtype=np.int64)[:m][valid])


def filter_ai_only(traj: pd.DataFrame, enabled: bool = True) -> pd.DataFrame:
    """Keep only rows driven by the AI controller; ``enabled=False`` is the identity."""
    if not enabled:
        return traj
    out = traj[traj["controller"] == "AI"]
    if len(out) == 0:
        warnings.warn("no AI-controlled rows in trajectory; training set is empty", stacklevel=2)
    return out


# --------------------------------------------------------------------------- normalization


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    names: tuple[str, ...] = ()

    @classmethod
    def fit(cls, values: np.ndarray, names: Sequence[str] = ()) -> "Normalizer":
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if len(values) < 2:
            raise ValueError("need at least 2 examples to fit a normalizer")
        mean = values.mean(axis=0)
        std = values.std(axis=0)  # population
        degenerate = ~(std > 0)
        if degenerate.any():
            which = [names[i] if i < len(names) else str(i) for i in np.flatnonzero(degenerate)]
            warnings.warn(f"zero variance in {', '.join(which)}; using std = 1", stacklevel=2)
            std = np.where(degenerate, 1.0, std)
        return cls(mean, std, tuple(names))

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.std + self.mean


def fit_normalizers(examples: TrainingSet) -> tuple[Normalizer, Normalizer]:
    """(feature normalizer, target normalizer)."""
    with warnings.catch_warnings():
        # constant features are common (e.g. idle equipment) and harmless
        warnings.simplefilter("ignore")
        feats = Normalizer.fit(examples.features, examples.feature_names)
    return feats, Normalizer.fit(examples.targets, examples.target_names)


# --------------------------------------------------------------------------- feature masks


@dataclass(frozen=True)
class FeatureMask:
    """One critic tower: the inputs it sees and the heads it feeds."""

    name: str
    features: tuple[str, ...]
    heads: tuple[str, ...]


def masks_from_config(config: FacilityConfig, monolithic: bool = False) -> tuple[FeatureMask, ...]:
    """Tower masks from the config's ``towers`` block.

    ``monolithic`` gives a single tower that sees every feature and feeds every head.
    """
    names = feature_names(config)
    heads = target_names(config)
    block = config.extras.get("towers")
    if monolithic or not block:
        return (FeatureMask("all", names, heads),)
    masks = tuple(FeatureMask(k, tuple(v["features"]), tuple(v["heads"])) for k, v in block.items())
    validate_masks(masks, names, heads, config.action_names)
    return masks


def validate_masks(masks: Sequence[FeatureMask], names: Sequence[str], heads: Sequence[str],
                   action_names: Sequence[str] = ()) -> None:
    seen: list[str] = []
    for m in masks:
        if not m.features:
            raise ValueError(f"tower {m.name!r}: empty feature mask")
        unknown = [f for f in m.features if f not in names]
        if unknown:
            raise ValueError(f"tower {m.name!r}: unknown feature {unknown[0]!r}")
        bad = [h for h in m.heads if h not in heads]
        if bad:
            raise ValueError(f"tower {m.name!r}: unknown head {bad[0]!r}")
        if ENERGY in m.heads:
            lacking = [a for a in action_names if a not in m.features]
            if lacking:
                raise ValueError(f"tower {m.name!r}: energy tower must see every action (missing {lacking[0]})")
        seen.extend(m.heads)
    missing = [h for h in heads if h not in seen]
    if missing:
        raise ValueError(f"no tower feeds head {missing[0]!r}")
    if len(seen) != len(set(seen)):
        raise ValueError("a head is fed by more than one tower")


def select_features(features: np.ndarray, names: Sequence[str], masks: Sequence[FeatureMask]) -> dict[str, np.ndarray]:
    """Per-tower column blocks, in mask order."""
    out = {}
    pos = {n: i for i, n in enumerate(names)}
    for m in masks:
        if not m.features:
            raise ValueError(f"tower {m.name!r}: empty feature mask")
        try:
            cols = [pos[f] for f in m.features]
        except KeyError as e:
            raise ValueError(f"tower {m.name!r}: unknown feature {e.args[0]!r}") from None
        out[m.name] = features[:, cols]
    return out


# --------------------------------------------------------------------------- files


def write_training_set(ts: TrainingSet, path: str | Path) -> None:
    df = pd.DataFrame(ts.features, columns=list(ts.feature_names))
    for i, name in enumerate(ts.target_names):
        df[f"target:{name}"] = ts.targets[:, i]
    df.insert(0, "timestamp", ts.timestamps)
    with open(path, "w", newline="") as fh:
        fh.write(TRAINING_SET_HEADER + "\n")
        df.to_csv(fh, index=False, float_format="%.17g")


def read_training_set(path: str | Path) -> TrainingSet:
    with open(path) as fh:
        if fh.readline().strip() != TRAINING_SET_HEADER:
            raise ValueError(f"{path}: not a training-set file")
        df = pd.read_csv(fh)
    tcols = [c for c in df.columns if c.startswith("target:")]
    fcols = [c for c in df.columns if c not in tcols and c != "timestamp"]
    return TrainingSet(df[fcols].to_numpy(float), tuple(fcols), df[tcols].to_numpy(float),
                       tuple(c.split(":", 1)[1] for c in tcols), df["timestamp"].to_numpy(np.int64))


def constraint_of(config: FacilityConfig, target: str) -> ObservationConstraint:
    for c in config.observation_constraints:
        if c.id == target:
            return c
    raise KeyError(target)

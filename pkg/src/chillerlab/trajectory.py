"""Trajectory logs: one row per 5-minute step, stored as CSV.

Column order is fixed by the facility config::

    timestamp, <sensors...>, <actions...>, reward_kwh, controller, guard, gap, <extras...>

``timestamp`` is minutes since the epoch. ``controller`` is ``AI`` or ``SOO``.
``gap`` marks rows that carry no usable observation; windows never span a gap
row or a break in the 5-minute timestamp sequence. The first line of the file
is a comment carrying the schema version.
"""

from __future__ import annotations

import io
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from .config import STEP_MINUTES, FacilityConfig

SCHEMA_VERSION = 1
HEADER = f"# chillerlab trajectory schema v{SCHEMA_VERSION}"
META_COLUMNS = ("reward_kwh", "controller", "guard", "gap")
CONTROLLERS = ("AI", "SOO")


def columns(config: FacilityConfig) -> list[str]:
    return ["timestamp", *config.sensor_names, *config.action_names, *META_COLUMNS]


def make_row(timestamp: int, state: Mapping[str, float], action: Mapping[str, float], reward_kwh: float,
             controller: str, guard: str = "accept", gap: bool = False, **extra) -> dict:
    row = {"timestamp": int(timestamp)}
    row.update(state)
    row.update(action)
    row.update(reward_kwh=float(reward_kwh), controller=controller, guard=guard, gap=bool(gap))
    row.update(extra)
    return row


def from_rows(rows: Iterable[Mapping], config: FacilityConfig) -> pd.DataFrame:
    df = pd.DataFrame(list(rows))
    return conform(df, config)


def conform(df: pd.DataFrame, config: FacilityConfig) -> pd.DataFrame:
    """Reorder columns to the canonical layout, filling optional metadata."""
    df = df.copy()
    if "gap" not in df:
        df["gap"] = False
    if "guard" not in df:
        df["guard"] = "accept"
    missing = [c for c in columns(config) if c not in df]
    if missing:
        raise ValueError(f"trajectory is missing columns: {', '.join(missing)}")
    base = columns(config)
    extra = [c for c in df.columns if c not in base]
    df = df[base + extra].reset_index(drop=True)
    df["timestamp"] = df["timestamp"].astype(np.int64)
    numeric = [*config.sensor_names, *config.action_names, "reward_kwh"]
    df[numeric] = df[numeric].astype(float)
    df["gap"] = df["gap"].astype(bool)
    return df


def write_csv(df: pd.DataFrame, path: str | Path, config: FacilityConfig) -> None:
    df = conform(df, config)
    with open(path, "w", newline="") as fh:
        fh.write(HEADER + "\n")
        df.to_csv(fh, index=False, float_format="%.10g")


def append_csv(df: pd.DataFrame, path: str | Path, config: FacilityConfig) -> None:
    """Append rows; writes the header first when the file does not exist yet."""
    path = Path(path)
    if not path.exists() or path.stat().st_size == 0:
        write_csv(df, path, config)
        return
    with open(path, "a", newline="") as fh:
        conform(df, config).to_csv(fh, index=False, header=False, float_format="%.10g")


def read_csv(path: str | Path, config: FacilityConfig | None = None) -> pd.DataFrame:
    text = Path(path).read_text()
    first = text.split("\n", 1)[0]
    if not first.startswith("# chillerlab trajectory schema v"):
        raise ValueError(f"{path}: missing trajectory schema header")
    version = int(first.rsplit("v", 1)[1])
    if version != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema version {version}")
    df = pd.read_csv(io.StringIO(text.split("\n", 1)[1]), keep_default_na=True)
    df["controller"] = df["controller"].astype(str)
    df["guard"] = df["guard"].astype(str)
    return conform(df, config) if config is not None else df


def segment_ids(df: pd.DataFrame) -> np.ndarray:
    """Integer id per row; a new segment starts after any timestamp jump."""
    ts = df["timestamp"].to_numpy()
    if len(ts) == 0:
        return np.zeros(0, dtype=np.int64)
    breaks = np.concatenate([[0], (np.diff(ts) != STEP_MINUTES).astype(np.int64)])
    return np.cumsum(breaks)

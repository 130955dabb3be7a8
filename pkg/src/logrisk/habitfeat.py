"""Sessions, time-of-day habit entropy and timestamp-only behavioural features.

The dependent variable is the base-2 entropy of each actor's time spent in
four daily windows.  The feature library reads only event timestamps and the
sessions built from them; no feature has access to the window proportions,
which keeps the regressors from being rewrites of the response.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .logmodel import DAY, Dataset

logger = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_PARTITION",
    "FEATURES",
    "FeatureDef",
    "FeatureMatrix",
    "HabitTable",
    "Session",
    "SessionParams",
    "TimeWindowPartition",
    "build_sessions",
    "extract_features",
    "habit_entropy",
    "habit_table",
    "regression_frame",
    "window_proportions",
]


@dataclass(frozen=True)
class TimeWindowPartition:
    """Four labelled local-time windows covering the day, as minute ranges [start, end)."""

    windows: tuple[tuple[str, int, int], ...] = (
        ("morning", 0, 5 * 60),
        ("afternoon", 5 * 60, 12 * 60),
        ("evening", 12 * 60, 17 * 60),
        ("overnight", 17 * 60, 24 * 60),
    )
    tz_offset_min: int = 0

    def __post_init__(self) -> None:
        w = tuple((str(a), int(b), int(c)) for a, b, c in self.windows)
        object.__setattr__(self, "windows", w)
        if len(w) != 4:
            raise ValueError("exactly four windows are required")
        if w[0][1] != 0 or w[-1][2] != 24 * 60:
            raise ValueError("windows must cover 00:00 to 24:00")
        for (_, _, end), (_, start, _) in zip(w[:-1], w[1:]):
            if end != start:
                raise ValueError("windows must be contiguous and disjoint")
        if any(b >= c for _, b, c in w):
            raise ValueError("every window must be non-empty")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(n for n, _, _ in self.windows)

    def describe(self) -> dict:
        return {n: f"{b // 60:02d}:{b % 60:02d}-{(c - 1) // 60:02d}:{(c - 1) % 60:02d}" for n, b, c in self.windows} | {
            "tz_offset_min": self.tz_offset_min
        }

    def window_of(self, local_seconds: np.ndarray) -> np.ndarray:
        minute = (np.asarray(local_seconds) % DAY) // 60
        starts = np.array([b for _, b, _ in self.windows[1:]])
        return np.searchsorted(starts, minute, side="right")

    def overlap(self, start: np.ndarray, end: np.ndarray) -> np.ndarray:
        """Seconds of each interval [start, end) (UTC) that fall in each window; shape (m, 4)."""
        off = self.tz_offset_min * 60
        a = np.asarray(start, dtype=np.int64) + off
        b = np.asarray(end, dtype=np.int64) + off
        out = np.empty((len(a), 4), dtype=np.float64)
        for j, (_, ws, we) in enumerate(self.windows):
            ws, we = ws * 60, we * 60
            length = we - ws

            def cum(t: np.ndarray) -> np.ndarray:
                return (t // DAY) * length + np.clip(t % DAY - ws, 0, length)

            out[:, j] = cum(b) - cum(a)
        return out


DEFAULT_PARTITION = TimeWindowPartition()


@dataclass(frozen=True)
class SessionParams:
    timeout_s: int = 1800
    tail_cap_s: int = 300
    tz_offset_min: int = 0
    duration_mode: str = "session"

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if self.tail_cap_s < 0:
            raise ValueError("tail_cap_s must be non-negative")
        if self.duration_mode not in ("session", "count"):
            raise ValueError("duration_mode must be 'session' or 'count'")

    @property
    def tail(self) -> int:
        return min(self.tail_cap_s, self.timeout_s)


# -- sessions --------------------------------------------------------------------


@dataclass(frozen=True)
class Session:
    actor: str
    start: int
    end: int
    duration: int
    n_events: int


def _sessionize(actor_idx: np.ndarray, ts: np.ndarray, timeout_s: int, tail: int) -> dict[str, np.ndarray]:
    """Vectorised sessionization of (actor, ts)-sorted events."""
    n = len(ts)
    new = np.ones(n, dtype=bool)
    if n > 1:
        new[1:] = (actor_idx[1:] != actor_idx[:-1]) | (np.diff(ts) >= timeout_s)
    first = np.flatnonzero(new)
    last = np.append(first[1:] - 1, n - 1)
    start = ts[first]
    end = ts[last]
    return {
        "actor": actor_idx[first],
        "start": start,
        "end": end,
        "n_events": last - first + 1,
        "duration": end - start + tail,
    }


def build_sessions(ts: Sequence[int], timeout_s: int = 1800, tail_cap_s: int = 300, actor: str = "") -> list[Session]:
    """Split one actor's time-ordered events wherever the gap reaches ``timeout_s``.

    >>> [s.duration for s in build_sessions([0, 600], 1800, 300)]
    [900]
    """
    if timeout_s <= 0:
        raise ValueError("timeout_s must be positive")
    t = np.asarray(ts, dtype=np.int64)
    if len(t) == 0:
        return []
    if np.any(np.diff(t) < 0):
        raise ValueError("events must be time-ordered")
    s = _sessionize(np.zeros(len(t), dtype=np.int32), t, timeout_s, min(tail_cap_s, timeout_s))
    return [
        Session(actor, int(a), int(b), int(d), int(c))
        for a, b, d, c in zip(s["start"], s["end"], s["duration"], s["n_events"])
    ]


# -- habit entropy ---------------------------------------------------------------


def window_proportions(sessions: Sequence[Session], partition: TimeWindowPartition = DEFAULT_PARTITION) -> np.ndarray | None:
    """Share of session time per window, or ``None`` when there is no time at all."""
    if not sessions:
        return None
    start = np.array([s.start for s in sessions], dtype=np.int64)
    dur = np.array([s.duration for s in sessions], dtype=np.int64)
    spent = partition.overlap(start, start + dur).sum(axis=0)
    total = spent.sum()
    if total <= 0:
        return None
    return spent / total


def habit_entropy(p: Sequence[float] | np.ndarray) -> float:
    """Base-2 Shannon entropy of window shares; 0 is a single habitual window, 2 is uniform."""
    q = np.asarray(p, dtype=float)
    if q.shape != (4,) or np.any(q < -1e-12) or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("p must be a point of the 4-simplex")
    nz = q[q > 0]
    h = 0.0 - float(np.sum(nz * np.log2(nz)))  # avoids -0.0
    return min(max(h, 0.0), 2.0)


@dataclass
class HabitTable:
    frame: pd.DataFrame
    n_flagged: int
    partition: TimeWindowPartition
    params: SessionParams


def habit_table(d: Dataset, partition: TimeWindowPartition = DEFAULT_PARTITION, params: SessionParams = SessionParams()) -> HabitTable:
    """Per-actor window shares, total time and habit entropy.

    Actors with zero total time are kept with ``flag_zero_time`` set and
    NaN shares; they are dropped from the regression frame.
    """
    n = d.n_actors
    if params.duration_mode == "session":
        s = _sessionize(d.actor_idx, d.ts, params.timeout_s, params.tail)
        spent_rows = partition.overlap(s["start"], s["start"] + s["duration"])
        owner = s["actor"]
    else:
        w = partition.window_of(d.ts + partition.tz_offset_min * 60)
        spent_rows = np.zeros((d.n_events, 4))
        spent_rows[np.arange(d.n_events), w] = 1.0
        owner = d.actor_idx
    spent = np.zeros((n, 4))
    for j in range(4):
        spent[:, j] = np.bincount(owner, weights=spent_rows[:, j], minlength=n)
    total = spent.sum(axis=1)
    zero = total <= 0
    with np.errstate(invalid="ignore", divide="ignore"):
        p = spent / total[:, None]
    ent = np.full(n, np.nan)
    for i in np.flatnonzero(~zero):
        ent[i] = habit_entropy(p[i])
    frame = pd.DataFrame(p, columns=[f"p_{lab}" for lab in partition.labels], index=pd.Index(d.actors, name="actor"))
    frame["total_time"] = total
    frame["habit_entropy"] = ent
    frame["flag_zero_time"] = zero
    return HabitTable(frame, int(zero.sum()), partition, params)


# -- features --------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureDef:
    name: str
    description: str
    unit: str
    inputs: frozenset = field(default_factory=lambda: frozenset({"timestamps"}))
    imputation: str = "none"


FEATURES: tuple[FeatureDef, ...] = (
    FeatureDef("active_days", "number of distinct local calendar dates with at least one event", "days"),
    FeatureDef("events_per_active_day", "event count divided by active_days", "events/day"),
    FeatureDef("session_count", "number of sessions (gap >= timeout starts a new session)", "sessions", frozenset({"sessions"})),
    FeatureDef(
        "mean_session_duration",
        "mean session duration: last minus first event plus the tail cap",
        "minutes",
        frozenset({"sessions"}),
    ),
    FeatureDef(
        "mean_intersession_gap",
        "mean time from the last event of a session to the first event of the next",
        "hours",
        frozenset({"sessions"}),
        "global median over actors with >= 2 sessions",
    ),
    FeatureDef(
        "median_intersession_gap",
        "median time from the last event of a session to the first event of the next",
        "hours",
        frozenset({"sessions"}),
        "global median over actors with >= 2 sessions",
    ),
    FeatureDef("weekday_share", "share of events on local Monday to Friday (weekday/weekend balance)", "fraction"),
    FeatureDef(
        "sd_first_event_hour",
        "population standard deviation over active days of the local hour of the day's first event",
        "hours",
    ),
    FeatureDef("span_days", "time from first to last event", "days"),
)

_FORBIDDEN_INPUTS = frozenset({"window_proportions", "habit_entropy"})
assert all(not (f.inputs & _FORBIDDEN_INPUTS) for f in FEATURES), "a feature reads the response"


@dataclass
class FeatureMatrix:
    frame: pd.DataFrame
    definitions: tuple[FeatureDef, ...]
    imputed: pd.DataFrame
    n_dropped: int = 0
    params: SessionParams = field(default_factory=SessionParams)

    @property
    def columns(self) -> list[str]:
        return [f.name for f in self.definitions]

    def sidecar(self) -> dict:
        return {
            "columns": [
                {"name": f.name, "description": f.description, "unit": f.unit, "inputs": sorted(f.inputs), "imputation": f.imputation}
                for f in self.definitions
            ],
            "imputed_counts": {c: int(self.imputed[c].sum()) for c in self.imputed.columns},
            "imputed_actors": {c: [str(a) for a in self.imputed.index[self.imputed[c]]] for c in self.imputed.columns},
            "n_rows": int(len(self.frame)),
            "n_dropped": self.n_dropped,
            "params": {
                "timeout_s": self.params.timeout_s,
                "tail_cap_s": self.params.tail_cap_s,
                "tz_offset_min": self.params.tz_offset_min,
                "duration_mode": self.params.duration_mode,
            },
        }


def _group_mean(values: np.ndarray, groups: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    cnt = np.bincount(groups, minlength=n)
    tot = np.bincount(groups, weights=values, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        return tot / cnt, cnt


def extract_features(d: Dataset, params: SessionParams = SessionParams()) -> FeatureMatrix:
    """Compute the fixed timestamp-only feature set, one row per actor in roster order."""
    n = d.n_actors
    if n == 0:
        raise ValueError("dataset is empty")
    counts = np.diff(d.offsets)
    keep = counts > 0
    off = params.tz_offset_min * 60
    local = d.ts + off
    day = local // DAY

    new_day = np.ones(d.n_events, dtype=bool)
    new_day[1:] = (d.actor_idx[1:] != d.actor_idx[:-1]) | (day[1:] != day[:-1])
    active_days = np.bincount(d.actor_idx[new_day], minlength=n)
    first_hour = (local[new_day] % DAY) / 3600.0
    fh_actor = d.actor_idx[new_day]
    mean_fh, _ = _group_mean(first_hour, fh_actor, n)
    sq, _ = _group_mean((first_hour - mean_fh[fh_actor]) ** 2, fh_actor, n)

    weekday = ((day + 3) % 7) < 5  # epoch day 0 was a Thursday
    weekday_events = np.bincount(d.actor_idx, weights=weekday.astype(float), minlength=n)

    s = _sessionize(d.actor_idx, d.ts, params.timeout_s, params.tail)
    mean_dur, n_sess = _group_mean(s["duration"].astype(float), s["actor"], n)
    same = s["actor"][1:] == s["actor"][:-1]
    gaps = ((s["start"][1:] - s["end"][:-1])[same]) / 3600.0
    gap_owner = s["actor"][1:][same]
    mean_gap, n_gap = _group_mean(gaps, gap_owner, n)
    median_gap = np.full(n, np.nan)
    if len(gaps):
        med = pd.Series(gaps).groupby(gap_owner).median()
        median_gap[med.index.to_numpy()] = med.to_numpy()

    first_ts = d.ts[d.offsets[:-1]]
    last_ts = d.ts[d.offsets[1:] - 1]
    cols = {
        "active_days": active_days.astype(float),
        "events_per_active_day": counts / np.maximum(active_days, 1),
        "session_count": n_sess.astype(float),
        "mean_session_duration": mean_dur / 60.0,
        "mean_intersession_gap": mean_gap,
        "median_intersession_gap": median_gap,
        "weekday_share": weekday_events / np.maximum(counts, 1),
        "sd_first_event_hour": np.sqrt(sq),
        "span_days": (last_ts - first_ts) / DAY,
    }
    frame = pd.DataFrame(cols, index=pd.Index(d.actors, name="actor"))[[f.name for f in FEATURES]]
    imputed = pd.DataFrame(False, index=frame.index, columns=["mean_intersession_gap", "median_intersession_gap"])
    for c in imputed.columns:
        missing = frame[c].isna().to_numpy()
        if missing.any():
            observed = frame.loc[~missing, c]
            fill = float(observed.median()) if len(observed) else 0.0
            frame.loc[missing, c] = fill
            imputed[c] = missing
            logger.info("imputed %s for %d actors with %s", c, int(missing.sum()), fill)
    frame = frame[keep]
    imputed = imputed[keep]
    return FeatureMatrix(frame, FEATURES, imputed, int((~keep).sum()), params)


def regression_frame(features: FeatureMatrix, habit: HabitTable, events: pd.Series | None = None) -> tuple[pd.DataFrame, dict]:
    """Join features with the response, dropping zero-time and single-event actors."""
    frame = features.frame.join(habit.frame[["habit_entropy", "flag_zero_time"]], how="inner")
    drop_zero = frame["flag_zero_time"].to_numpy()
    drop_single = np.zeros(len(frame), dtype=bool)
    if events is not None:
        drop_single = (events.reindex(frame.index).to_numpy() < 2) & ~drop_zero
    out = frame[~(drop_zero | drop_single)].drop(columns=["flag_zero_time"])
    return out, {"dropped_zero_time": int(drop_zero.sum()), "dropped_single_event": int(drop_single.sum()), "n_rows": int(len(out))}


def event_counts(d: Dataset) -> pd.Series:
    return pd.Series(np.diff(d.offsets), index=pd.Index(d.actors, name="actor"))


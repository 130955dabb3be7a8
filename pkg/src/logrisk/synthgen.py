"""Seeded synthetic event logs and regression data with planted structure.

All randomness comes from numpy's PCG64 bit generator.  Each actor (or the
regression draw) gets its own stream ``SeedSequence(seed, spawn_key=(i,))``,
so adding actors never perturbs the events of existing ones.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
import pandas as pd

from .logmodel import DAY, Dataset
from .regress import INTERCEPT, DesignMatrix

__all__ = [
    "GENERATOR_VERSION",
    "GroundTruth",
    "LogGenConfig",
    "RegGenConfig",
    "fragile_robust_pair",
    "gen_event_log",
    "gen_regression_data",
    "write_event_log",
    "write_regression_data",
]

GENERATOR_VERSION = 1
PRNG = "numpy PCG64, stream SeedSequence(entropy=seed, spawn_key=(index,))"
VERBS = ("OPEN", "NEXT", "PREV", "CLOSE", "ADD MARKER", "ADD MEMO", "SEARCH")
# Monday 2021-04-05 00:00 UTC
DEFAULT_START = 1_617_580_800
DEFAULT_SLOTS = (
    (0, 9 * 60, 90),
    (0, 13 * 60, 90),
    (1, 10 * 60 + 40, 90),
    (2, 9 * 60, 90),
    (3, 14 * 60 + 40, 90),
    (4, 10 * 60 + 40, 90),
)


def _stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(index,))))


@dataclass(frozen=True)
class LogGenConfig:
    """Synthetic log parameters.

    ``slots`` are weekly local-time sessions ``(weekday, start_minute,
    length_minutes)`` with Monday = 0; in scheduled mode every actor enrols
    in ``slots_per_actor`` of them and is only active during those slots.
    """

    n_actors: int = 200
    events_per_actor: int | tuple[int, int] = (20, 60)
    period_days: int = 28
    mode: str = "self_paced"
    slots: tuple[tuple[int, int, int], ...] = DEFAULT_SLOTS
    slots_per_actor: int = 2
    twin_pairs: int = 0
    seed: int = 0
    start: int = DEFAULT_START
    tz_offset_min: int = 0

    def __post_init__(self) -> None:
        epa = self.events_per_actor
        if isinstance(epa, (list, tuple)):
            epa = (int(epa[0]), int(epa[1]))
            object.__setattr__(self, "events_per_actor", epa)
            if not 1 <= epa[0] <= epa[1]:
                raise ValueError("events_per_actor range must satisfy 1 <= lo <= hi")
        elif int(epa) < 1:
            raise ValueError("events_per_actor must be >= 1")
        object.__setattr__(self, "slots", tuple(tuple(int(v) for v in s) for s in self.slots))
        if self.n_actors < 1:
            raise ValueError("n_actors must be >= 1")
        if self.twin_pairs < 0 or 2 * self.twin_pairs > self.n_actors:
            raise ValueError("twin_pairs * 2 must not exceed n_actors")
        if self.period_days < 1:
            raise ValueError("period_days must be >= 1")
        if self.mode not in ("scheduled", "self_paced"):
            raise ValueError("mode must be 'scheduled' or 'self_paced'")
        if self.mode == "scheduled":
            if not self.slots or not 1 <= self.slots_per_actor <= len(self.slots):
                raise ValueError("scheduled mode needs 1 <= slots_per_actor <= len(slots)")
            if not any(self._slot_starts(s).size for s in self.slots):
                raise ValueError("no slot falls inside the period")

    def _slot_starts(self, slot: tuple[int, int, int]) -> np.ndarray:
        """UTC start times of every occurrence of ``slot`` within the period."""
        weekday, minute, _ = slot
        local0 = self.start + self.tz_offset_min * 60
        first_wd = ((local0 // DAY) + 3) % 7
        day0 = (weekday - first_wd) % 7
        days = np.arange(day0, self.period_days, 7)
        return self.start + days * DAY + minute * 60 - (local0 % DAY)


def _actor_events(cfg: LogGenConfig, i: int) -> tuple[np.ndarray, np.ndarray]:
    rng = _stream(cfg.seed, i)
    epa = cfg.events_per_actor
    k = int(rng.integers(epa[0], epa[1] + 1)) if isinstance(epa, tuple) else int(epa)
    if cfg.mode == "scheduled":
        enrolled = rng.choice(len(cfg.slots), size=cfg.slots_per_actor, replace=False)
        starts = [(cfg._slot_starts(cfg.slots[j]), cfg.slots[j][2] * 60) for j in enrolled]
        starts = [(s, w) for s, w in starts if s.size]
        if not starts:
            starts = [(cfg._slot_starts(s), s[2] * 60) for s in cfg.slots if cfg._slot_starts(s).size][:1]
        pick = rng.integers(0, len(starts), size=k)
        ts = np.empty(k, dtype=np.int64)
        for j, (s, width) in enumerate(starts):
            sel = pick == j
            m = int(sel.sum())
            occ = rng.integers(0, len(s), size=m)
            ts[sel] = s[occ] + rng.integers(0, width, size=m)
    else:
        center = rng.uniform(0, 24)
        spread = rng.uniform(1.0, 4.0)
        day = rng.integers(0, cfg.period_days, size=k)
        hour = np.mod(center + spread * rng.standard_normal(k), 24.0)
        local_day0 = cfg.start + cfg.tz_offset_min * 60
        local_day0 -= local_day0 % DAY
        ts = local_day0 - cfg.tz_offset_min * 60 + day * DAY + (hour * 3600).astype(np.int64)
        ts = np.clip(ts, cfg.start, None)
    verbs = rng.integers(0, len(VERBS), size=k).astype(np.int32)
    order = np.argsort(ts, kind="stable")
    return ts[order], verbs[order]


def gen_event_log(cfg: LogGenConfig) -> tuple[Dataset, dict[str, Any]]:
    """Generate a log and its manifest (per-actor counts, twin pairs, provenance).

    Twins are consecutive actors ``(2j, 2j+1)`` for ``j < twin_pairs``; the
    second is an exact copy of the first, so their projections coincide at
    every generalization level.
    """
    n = cfg.n_actors
    width = max(5, len(str(n - 1)))
    actors = np.array([f"u{i:0{width}d}" for i in range(n)], dtype=object)
    ts_parts: list[np.ndarray] = []
    verb_parts: list[np.ndarray] = []
    for i in range(n):
        if i < 2 * cfg.twin_pairs and i % 2 == 1:
            ts_parts.append(ts_parts[-1])
            verb_parts.append(verb_parts[-1])
            continue
        t, v = _actor_events(cfg, i)
        ts_parts.append(t)
        verb_parts.append(v)
    counts = np.array([len(t) for t in ts_parts], dtype=np.int64)
    actor_idx = np.repeat(np.arange(n, dtype=np.int32), counts)
    ts = np.concatenate(ts_parts)
    verbs = np.concatenate(verb_parts)
    d = Dataset(actors, actor_idx, ts, {"verb": (np.array(VERBS, dtype=object), verbs)})
    manifest = {
        "generator": "logrisk.synthgen.gen_event_log",
        "generator_version": GENERATOR_VERSION,
        "prng": PRNG,
        "numpy_version": np.__version__,
        "config": _config_dict(cfg),
        "n_actors": n,
        "n_events": int(counts.sum()),
        "counts": dict(zip(actors.tolist(), counts.tolist())),
        "twins": [[actors[2 * j], actors[2 * j + 1]] for j in range(cfg.twin_pairs)],
        "schema": {"actor_col": "actor", "ts_col": "timestamp", "attr_cols": ["verb"]},
    }
    return d, manifest


def _config_dict(cfg: Any) -> dict:
    def norm(v: Any) -> Any:
        if isinstance(v, tuple):
            return [norm(x) for x in v]
        return v

    return {k: norm(v) for k, v in asdict(cfg).items()}


def write_event_log(d: Dataset, path: str | os.PathLike, fmt: str = "csv", ts_format: str = "iso8601") -> None:
    """Write a dataset in an ingestible layout: ``actor``, ``timestamp`` plus attribute columns."""
    if ts_format == "iso8601":
        stamp = np.char.add(np.datetime_as_string(d.ts.astype("datetime64[s]"), unit="s").astype(str), "Z")
    else:
        stamp = d.ts
    frame = pd.DataFrame({"actor": d.actors[d.actor_idx], "timestamp": stamp})
    for name in d.attributes:
        frame[name] = d.attribute_values(name)
    if fmt == "csv":
        frame.to_csv(path, index=False)
    elif fmt == "jsonl":
        if ts_format == "epoch":
            frame["timestamp"] = frame["timestamp"].astype(np.int64)
        frame.to_json(path, orient="records", lines=True, force_ascii=False)
    else:
        raise ValueError(f"unsupported format {fmt!r}")


# -- regression data -------------------------------------------------------------


@dataclass(frozen=True)
class RegGenConfig:
    """Linear model ``y = b0 + X b + sigma * noise`` with optional planted rows.

    Planted rows sit at ``leverage`` on the first feature (zero elsewhere)
    and carry a residual of ``planted_residual`` around the true line.
    """

    n: int = 100
    p: int = 3
    beta: tuple[float, ...] | None = None
    sigma: float = 1.0
    planted_count: int = 0
    planted_leverage: float = 10.0
    planted_residual: float = -20.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.beta is not None:
            object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
            if len(self.beta) != self.p + 1:
                raise ValueError("beta needs p + 1 entries (intercept first)")
        if self.n + self.planted_count <= self.p + 1:
            raise ValueError("need n > p + 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    @property
    def true_beta(self) -> np.ndarray:
        return np.ones(self.p + 1) if self.beta is None else np.asarray(self.beta)


@dataclass(frozen=True)
class GroundTruth:
    beta: np.ndarray
    planted: tuple[int, ...]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "planted": list(self.planted), "config": self.config, "prng": PRNG}


def gen_regression_data(cfg: RegGenConfig) -> tuple[DesignMatrix, GroundTruth]:
    rng = _stream(cfg.seed, 0)
    beta = cfg.true_beta
    F = rng.standard_normal((cfg.n, cfg.p))
    noise = rng.standard_normal(cfg.n)
    if cfg.planted_count:
        P = np.zeros((cfg.planted_count, cfg.p))
        P[:, 0] = cfg.planted_leverage
        F = np.vstack([F, P])
        noise = np.concatenate([noise, np.zeros(cfg.planted_count)])
    X = np.column_stack([np.ones(len(F)), F])
    y = X @ beta + cfg.sigma * noise
    planted = tuple(range(cfg.n, cfg.n + cfg.planted_count))
    y[list(planted)] += cfg.planted_residual
    names = (INTERCEPT,) + tuple(f"x{j + 1}" for j in range(cfg.p))
    return DesignMatrix(X, y, names), GroundTruth(beta, planted, _config_dict(cfg))


def write_regression_data(dm: DesignMatrix, path: str | os.PathLike) -> None:
    cols = {name: dm.X[:, j] for j, name in enumerate(dm.names) if name != INTERCEPT}
    frame = pd.DataFrame(cols, index=pd.Index([str(r) for r in dm.row_ids], name="row"))
    frame["y"] = dm.y
    frame.to_csv(path, float_format="%.17g")


def fragile_robust_pair(seed: int = 2024) -> tuple[RegGenConfig, RegGenConfig]:
    """A regression whose conclusions hinge on a few rows, and one that does not.

    The fragile design has a weak true slope and a handful of high-leverage
    rows pulling it; the robust design has many rows, strong effects on
    every coefficient (intercept included) and no planted rows.
    """
    fragile = RegGenConfig(
        n=300, p=2, beta=(0.3, 0.15, 0.1), sigma=1.0, planted_count=6, planted_leverage=8.0, planted_residual=-12.0, seed=seed
    )
    robust = RegGenConfig(n=2000, p=2, beta=(3.0, 1.0, -1.0), sigma=0.5, seed=seed + 1)
    return fragile, robust


def save_manifest(manifest: dict, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def manifest_consistent(d: Dataset, manifest: dict) -> bool:
    """Check the per-actor counts and twin set equality recorded in ``manifest``."""
    if d.event_counts() != manifest["counts"]:
        return False
    for a, b in manifest["twins"]:
        ea = [(e.ts, tuple(sorted(e.attributes.items()))) for e in d.events_of(a)]
        eb = [(e.ts, tuple(sorted(e.attributes.items()))) for e in d.events_of(b)]
        if ea != eb:
            return False
    return True


def twin_ceiling(n_actors: int, twin_pairs: int) -> float:
    return 1.0 - 2.0 * twin_pairs / n_actors


"""Actor event logs: ingestion, timestamp generalization and quasi-identifier projection.

Events are held column-wise in numpy arrays sorted by (actor, timestamp) so
that logs with tens of millions of rows fit comfortably in memory.  Actor
identifiers are kept as strings and ordered lexicographically; that sorted
roster defines the actor index used everywhere else in the package.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import IO, Any, Hashable, Iterable, Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

__all__ = [
    "LEVEL_NAMES",
    "DATE",
    "HOUR",
    "MINUTE",
    "QUARTER_HOUR",
    "Dataset",
    "EventRecord",
    "GeneralizationLevel",
    "IngestError",
    "ProjectedDataset",
    "QISpec",
    "RowError",
    "Schema",
    "SchemaError",
    "Timestamp",
    "format_iso8601",
    "generalize_timestamp",
    "parse_events",
    "parse_iso8601",
    "project_dataset",
]

DAY = 86_400
LEVEL_WIDTHS = {"minute": 60, "quarter_hour": 900, "hour": 3600, "date": DAY}
LEVEL_NAMES = tuple(LEVEL_WIDTHS)


class IngestError(ValueError):
    """Base class for ingestion failures."""


class SchemaError(IngestError):
    def __init__(self, column: str, message: str | None = None) -> None:
        self.column = column
        super().__init__(message or f"missing mapped column {column!r}")


class RowError(IngestError):
    def __init__(self, line: int, message: str) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}")


# -- timestamps ----------------------------------------------------------------


def parse_iso8601(text: str) -> int:
    """Parse an ISO-8601 string to integer UTC epoch seconds.

    Naive timestamps are read as UTC.  Sub-second precision is truncated.
    """
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp() // 1)


def format_iso8601(seconds: int) -> str:
    return datetime.fromtimestamp(int(seconds), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True, order=True)
class Timestamp:
    seconds_since_epoch: int

    def __post_init__(self) -> None:
        if self.seconds_since_epoch < 0:
            raise ValueError("timestamps must be non-negative epoch seconds")

    @classmethod
    def from_iso(cls, text: str) -> "Timestamp":
        return cls(parse_iso8601(text))

    def isoformat(self) -> str:
        return format_iso8601(self.seconds_since_epoch)

    def __int__(self) -> int:
        return self.seconds_since_epoch


@dataclass(frozen=True)
class GeneralizationLevel:
    """A partition of the time axis into fixed windows or local calendar days.

    ``tz_offset_min`` only applies to ``date``; the sub-daily levels are
    aligned to UTC.
    """

    name: str
    tz_offset_min: int = 0

    def __post_init__(self) -> None:
        if self.name not in LEVEL_WIDTHS:
            raise ValueError(f"unknown generalization level {self.name!r}; expected one of {LEVEL_NAMES}")
        if self.name != "date" and self.tz_offset_min:
            raise ValueError("a timezone offset is only meaningful for the date level")
        if not -24 * 60 < self.tz_offset_min < 24 * 60:
            raise ValueError("timezone offset must lie strictly within +-24h")

    @classmethod
    def parse(cls, text: str) -> "GeneralizationLevel":
        """Parse ``minute``, ``quarter_hour``, ``hour``, ``date`` or ``date@+540``."""
        name, _, off = text.strip().partition("@")
        aliases = {"quarter": "quarter_hour", "day": "date"}
        name = aliases.get(name, name)
        return cls(name, int(off) if off else 0)

    @property
    def width(self) -> int:
        return LEVEL_WIDTHS[self.name]

    @property
    def offset_seconds(self) -> int:
        return self.tz_offset_min * 60

    def floor(self, ts):
        """Window start (UTC epoch seconds) of the window containing ``ts``; vectorized."""
        off = self.offset_seconds
        return (ts + off) // self.width * self.width - off

    def label(self, window_start: int) -> str:
        local = datetime.fromtimestamp(int(window_start) + self.offset_seconds, tz=timezone.utc)
        if self.name == "date":
            return local.strftime("%Y-%m-%d")
        return local.strftime("%Y-%m-%dT%H:%M")

    def __str__(self) -> str:
        if self.name == "date" and self.tz_offset_min:
            return f"date@{self.tz_offset_min:+d}"
        return self.name


MINUTE = GeneralizationLevel("minute")
QUARTER_HOUR = GeneralizationLevel("quarter_hour")
HOUR = GeneralizationLevel("hour")
DATE = GeneralizationLevel("date")


def generalize_timestamp(ts: int | Timestamp, level: GeneralizationLevel) -> int:
    """Return the start of the ``level`` window containing ``ts``.

    >>> MINUTE.label(generalize_timestamp(parse_iso8601("2021-05-06T11:22:33Z"), MINUTE))
    '2021-05-06T11:22'
    """
    return int(level.floor(int(ts)))


# -- events and datasets ---------------------------------------------------------


@dataclass(frozen=True)
class EventRecord:
    actor: str
    ts: int
    attributes: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.actor:
            raise ValueError("actor must be non-empty")


@dataclass(frozen=True)
class Schema:
    actor_col: str
    ts_col: str
    ts_format: str = "iso8601"
    attr_cols: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.ts_format not in ("iso8601", "epoch"):
            raise ValueError(f"ts_format must be 'iso8601' or 'epoch', got {self.ts_format!r}")
        object.__setattr__(self, "attr_cols", tuple(self.attr_cols))

    @property
    def columns(self) -> tuple[str, ...]:
        return (self.actor_col, self.ts_col, *self.attr_cols)


def _is_grouped_sorted(actor_idx: np.ndarray, ts: np.ndarray) -> bool:
    if len(ts) < 2:
        return True
    da = np.diff(actor_idx)
    return bool(np.all(da >= 0) and np.all((da > 0) | (np.diff(ts) >= 0)))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class Dataset:
    """Actor-grouped events, ordered by timestamp within each actor.

    Events live in flat arrays: ``actor_idx[i]`` indexes the sorted
    ``actors`` roster, ``ts[i]`` is epoch seconds, and each categorical
    attribute is stored as ``(categories, codes)``.  ``offsets`` delimits the
    contiguous block of each actor.  Instances are read-only.
    """

    def __init__(
        self,
        actors: np.ndarray,
        actor_idx: np.ndarray,
        ts: np.ndarray,
        attributes: Mapping[str, tuple[np.ndarray, np.ndarray]] | None = None,
        *,
        rows_read: int | None = None,
        rows_skipped: int = 0,
    ) -> None:
        attributes = dict(attributes or {})
        n = len(actors)
        if n > 1 and not np.all(np.asarray(actors[:-1], dtype=object) < np.asarray(actors[1:], dtype=object)):
            raise ValueError("actor roster must be sorted and free of duplicates")
        actor_idx = np.asarray(actor_idx, dtype=np.int32)
        ts = np.asarray(ts, dtype=np.int64)
        if len(actor_idx) != len(ts):
            raise ValueError("actor_idx and ts must have equal length")
        if not _is_grouped_sorted(actor_idx, ts):
            order = np.lexsort((ts, actor_idx))
            actor_idx = actor_idx[order]
            ts = ts[order]
            attributes = {k: (cats, np.asarray(codes)[order]) for k, (cats, codes) in attributes.items()}
        counts = np.bincount(actor_idx, minlength=n) if n else np.zeros(0, dtype=np.int64)
        if len(counts) != n or (n and counts.min() < 1):
            raise ValueError("every actor in the roster must have at least one event")
        if len(ts) and ts.min() < 0:
            raise ValueError("timestamps must be non-negative")
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        self.actors = _frozen(np.asarray(actors, dtype=object))
        self.actor_idx = _frozen(actor_idx)
        self.ts = _frozen(ts)
        self.offsets = _frozen(offsets)
        self.attributes = {
            k: (_frozen(np.asarray(c, dtype=object)), _frozen(np.asarray(v, dtype=np.int32)))
            for k, (c, v) in attributes.items()
        }
        self.rows_read = len(ts) if rows_read is None else rows_read
        self.rows_skipped = rows_skipped

    @classmethod
    def from_columns(
        cls,
        actor: Sequence[str] | np.ndarray,
        ts: Sequence[int] | np.ndarray,
        attributes: Mapping[str, Sequence[str]] | None = None,
        **kwargs: Any,
    ) -> "Dataset":
        codes, uniques = pd.factorize(pd.Series(actor, dtype=object), sort=True)
        attrs = {}
        for name, values in (attributes or {}).items():
            acodes, cats = pd.factorize(pd.Series(values, dtype=object), sort=True)
            attrs[name] = (np.asarray(cats, dtype=object), acodes.astype(np.int32))
        return cls(np.asarray(uniques, dtype=object), codes.astype(np.int32), np.asarray(ts, dtype=np.int64), attrs, **kwargs)

    @classmethod
    def from_records(cls, records: Iterable[EventRecord], attr_names: Sequence[str] | None = None) -> "Dataset":
        records = list(records)
        if attr_names is None:
            attr_names = sorted({k for r in records for k in r.attributes})
        return cls.from_columns(
            [r.actor for r in records],
            [int(r.ts) for r in records],
            {a: [r.attributes[a] for r in records] for a in attr_names},
        )

    @property
    def n_actors(self) -> int:
        return len(self.actors)

    @property
    def n_events(self) -> int:
        return len(self.ts)

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(self.attributes)

    def event_counts(self) -> dict[str, int]:
        return dict(zip(self.actors.tolist(), np.diff(self.offsets).tolist()))

    def actor_index(self, actor: str) -> int:
        i = int(np.searchsorted(self.actors, actor))
        if i >= self.n_actors or self.actors[i] != actor:
            raise KeyError(actor)
        return i

    def actor_slice(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def events_of(self, actor: str) -> list[EventRecord]:
        sl = self.actor_slice(self.actor_index(actor))
        return [self._record(j) for j in range(sl.start, sl.stop)]

    def _record(self, j: int) -> EventRecord:
        attrs = {k: str(cats[codes[j]]) for k, (cats, codes) in self.attributes.items()}
        return EventRecord(str(self.actors[self.actor_idx[j]]), int(self.ts[j]), attrs)

    def __iter__(self) -> Iterator[EventRecord]:
        for j in range(self.n_events):
            yield self._record(j)

    def attribute_values(self, name: str) -> np.ndarray:
        cats, codes = self.attributes[name]
        return cats[codes]

    def to_frame(self) -> pd.DataFrame:
        cols: dict[str, Any] = {"actor": self.actors[self.actor_idx], "ts": self.ts}
        for name in self.attributes:
            cols[name] = self.attribute_values(name)
        return pd.DataFrame(cols)

    def __repr__(self) -> str:
        return f"Dataset(n_actors={self.n_actors}, n_events={self.n_events}, attributes={list(self.attributes)})"


# -- ingestion -------------------------------------------------------------------


def _open_text(source: Any) -> IO[str]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"))
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def _parse_ts_column(values: pd.Series, ts_format: str) -> np.ndarray:
    """Return int64 epoch seconds with -1 marking unparseable entries."""
    s = values.astype(str).str.strip()
    if ts_format == "epoch":
        ok = s.str.fullmatch(r"\d+")
        out = np.full(len(s), -1, dtype=np.int64)
        out[ok.to_numpy()] = s[ok].astype(np.int64).to_numpy()
        return out
    secs = np.full(len(s), -1, dtype=np.int64)
    # pandas reuses the first row's offset for later naive strings, so the
    # two kinds are parsed separately; naive means UTC.
    aware = s.str.contains(r"(?:[Zz]|[+-]\d{2}(?::?\d{2})?)$", regex=True).to_numpy()
    for mask in (aware, ~aware):
        if not mask.any():
            continue
        parsed = pd.to_datetime(s[mask], utc=True, format="ISO8601", errors="coerce")
        good = parsed.notna().to_numpy()
        delta = parsed[good] - pd.Timestamp(0, tz="UTC")
        idx = np.flatnonzero(mask)[good]
        secs[idx] = (delta // pd.Timedelta(seconds=1)).to_numpy(dtype=np.int64)
    return secs


def _read_jsonl(stream: IO[str], schema: Schema) -> tuple[pd.DataFrame, np.ndarray, list[tuple[int, str]], int]:
    rows: list[list[Any]] = []
    seen = 0
    lines: list[int] = []
    bad: list[tuple[int, str]] = []
    checked = False
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        seen += 1
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            bad.append((lineno, f"invalid JSON ({exc.msg})"))
            continue
        if not isinstance(obj, dict):
            bad.append((lineno, "expected a JSON object"))
            continue
        if not checked:
            for col in schema.columns:
                if col not in obj:
                    raise SchemaError(col)
            checked = True
        try:
            rows.append(["" if obj[c] is None else str(obj[c]) for c in schema.columns])
        except KeyError as exc:
            bad.append((lineno, f"missing key {exc.args[0]!r}"))
            continue
        lines.append(lineno)
    frame = pd.DataFrame(rows, columns=list(schema.columns), dtype=object)
    return frame, np.asarray(lines, dtype=np.int64), bad, seen


def parse_events(
    source: Any,
    schema: Schema,
    format: str = "csv",
    *,
    skip_bad_rows: bool = False,
) -> Dataset:
    """Read a CSV or JSONL event log into a :class:`Dataset`.

    ``source`` may be a path, a binary or text stream, or raw bytes.  By
    default the first malformed row raises :class:`RowError` carrying its
    1-based line number; with ``skip_bad_rows`` such rows are dropped and
    counted in ``Dataset.rows_skipped``.
    """
    if format not in ("csv", "jsonl"):
        raise ValueError(f"unsupported format {format!r}")
    stream = _open_text(source)
    try:
        if format == "csv":
            frame = pd.read_csv(stream, dtype=str, keep_default_na=False, skipinitialspace=False)
            for col in schema.columns:
                if col not in frame.columns:
                    raise SchemaError(col)
            lines = np.arange(len(frame), dtype=np.int64) + 2
            bad: list[tuple[int, str]] = []
            n_rows = len(frame)
        else:
            frame, lines, bad, n_rows = _read_jsonl(stream, schema)
    finally:
        if isinstance(source, (str, os.PathLike)):
            stream.close()

    secs = _parse_ts_column(frame[schema.ts_col], schema.ts_format) if len(frame) else np.zeros(0, np.int64)
    actor = frame[schema.actor_col].astype(str).to_numpy(dtype=object) if len(frame) else np.zeros(0, object)
    bad_ts = secs < 0
    bad_actor = np.array([not a for a in actor], dtype=bool)
    for j in np.flatnonzero(bad_ts | bad_actor):
        if bad_actor[j]:
            bad.append((int(lines[j]), "empty actor identifier"))
        else:
            raw = frame[schema.ts_col].iloc[j]
            bad.append((int(lines[j]), f"unparseable timestamp {raw!r} (format {schema.ts_format})"))
    if bad and not skip_bad_rows:
        line, msg = min(bad)
        raise RowError(line, msg)
    keep = ~(bad_ts | bad_actor)
    attrs = {c: frame[c].to_numpy(dtype=object)[keep] for c in schema.attr_cols}
    if not keep.any():
        raise IngestError("no valid rows")
    return Dataset.from_columns(actor[keep], secs[keep], attrs, rows_read=n_rows, rows_skipped=len(bad))


# -- projection ------------------------------------------------------------------


@dataclass(frozen=True)
class QISpec:
    """Quasi-identifier definition: the generalized timestamp plus optional attributes."""

    level: GeneralizationLevel = MINUTE
    attributes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "attributes", tuple(self.attributes))

    def validate(self, d: Dataset) -> None:
        for a in self.attributes:
            if a not in d.attributes:
                raise KeyError(f"unknown attribute {a!r}; dataset has {list(d.attributes)}")

    def with_level(self, level: GeneralizationLevel) -> "QISpec":
        return QISpec(level, self.attributes)


class ProjectedDataset:
    """Per-actor sets of quasi-identifier tuples.

    Tuples are interned as dense integer ids ``0..n_tuples-1``.  The set of
    actor ``i`` is ``act_tuples[act_ptr[i]:act_ptr[i+1]]``, sorted ascending
    with no repeats.  ``tuple_key(tid)`` recovers the tuple itself.
    """

    def __init__(
        self,
        actors: np.ndarray,
        act_ptr: np.ndarray,
        act_tuples: np.ndarray,
        n_tuples: int,
        qispec: QISpec | None = None,
        *,
        tuple_rows: np.ndarray | None = None,
        keys: Sequence[Hashable] | None = None,
    ) -> None:
        self.actors = _frozen(np.asarray(actors, dtype=object))
        self.act_ptr = _frozen(np.asarray(act_ptr, dtype=np.int64))
        self.act_tuples = _frozen(np.asarray(act_tuples, dtype=np.int32))
        self.n_tuples = int(n_tuples)
        self.qispec = qispec
        self._rows = tuple_rows
        self._keys = list(keys) if keys is not None else None
        self._tid: dict[Hashable, int] | None = None

    @classmethod
    def from_sets(cls, sets: Mapping[str, Iterable[Hashable]]) -> "ProjectedDataset":
        """Build directly from ``{actor: tuples}``; handy for hand-made cases."""
        actors = sorted(sets)
        universe = sorted({t for a in actors for t in sets[a]}, key=lambda t: (type(t).__name__, t))
        tid = {t: i for i, t in enumerate(universe)}
        ptr = [0]
        flat: list[int] = []
        for a in actors:
            ids = sorted({tid[t] for t in sets[a]})
            flat.extend(ids)
            ptr.append(len(flat))
        return cls(np.array(actors, dtype=object), np.array(ptr), np.array(flat, dtype=np.int32), len(universe), keys=universe)

    @property
    def n_actors(self) -> int:
        return len(self.actors)

    @property
    def n_pairs(self) -> int:
        return len(self.act_tuples)

    def set_sizes(self) -> np.ndarray:
        return np.diff(self.act_ptr)

    def tuple_key(self, tid: int) -> Hashable:
        if self._keys is not None:
            return self._keys[tid]
        return tuple(self._rows[tid].tolist())

    def keys(self) -> list[Hashable]:
        if self._keys is None:
            self._keys = [tuple(r) for r in self._rows.tolist()]
        return self._keys

    def tid_of(self, key: Hashable) -> int | None:
        if self._tid is None:
            self._tid = {k: i for i, k in enumerate(self.keys())}
        return self._tid.get(key)

    def tids_of_actor(self, i: int) -> np.ndarray:
        return self.act_tuples[self.act_ptr[i] : self.act_ptr[i + 1]]

    def tuples_of(self, actor: str) -> frozenset:
        i = int(np.searchsorted(self.actors, actor))
        if i >= self.n_actors or self.actors[i] != actor:
            raise KeyError(actor)
        return frozenset(self.tuple_key(int(t)) for t in self.tids_of_actor(i))

    def as_sets(self) -> dict[str, frozenset]:
        return {str(a): frozenset(self.tuple_key(int(t)) for t in self.tids_of_actor(i)) for i, a in enumerate(self.actors)}

    def __repr__(self) -> str:
        return f"ProjectedDataset(n_actors={self.n_actors}, n_tuples={self.n_tuples}, n_pairs={self.n_pairs})"


def project_dataset(d: Dataset, q: QISpec) -> ProjectedDataset:
    """Reduce each actor's events to the deduplicated set of QI tuples.

    A tuple is ``(window_start, *attribute_values)``; attribute values are
    kept as category codes internally and decoded by ``tuple_key``.
    """
    q.validate(d)
    windows = q.level.floor(d.ts)
    cols = [windows] + [d.attributes[a][1].astype(np.int64) for a in q.attributes]
    if len(cols) == 1:
        tuple_vals, tuple_code = np.unique(windows, return_inverse=True)
        rows = tuple_vals.reshape(-1, 1)
    else:
        stacked = np.stack(cols, axis=1)
        rows, tuple_code = np.unique(stacked, axis=0, return_inverse=True)
    tuple_code = tuple_code.reshape(-1).astype(np.int64)
    n_tuples = len(rows)
    pair = np.unique(d.actor_idx.astype(np.int64) * n_tuples + tuple_code)
    act = pair // n_tuples
    tids = (pair % n_tuples).astype(np.int32)
    act_ptr = np.zeros(d.n_actors + 1, dtype=np.int64)
    np.cumsum(np.bincount(act, minlength=d.n_actors), out=act_ptr[1:])
    if q.attributes:
        rows = _decode_rows(rows, d, q)
    return ProjectedDataset(d.actors, act_ptr, tids, n_tuples, q, tuple_rows=rows)


def _decode_rows(rows: np.ndarray, d: Dataset, q: QISpec) -> np.ndarray:
    out = np.empty(rows.shape, dtype=object)
    out[:, 0] = rows[:, 0].tolist()
    for j, a in enumerate(q.attributes, start=1):
        out[:, j] = d.attributes[a][0][rows[:, j]]
    return out

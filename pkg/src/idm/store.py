"""Relational store of loop-detector observations.

Backed by SQLite: ingestion with range checks, a seeded synthetic data
generator, read-only SQL execution with an authorizer-level write guard,
the non-LLM dataset describer, and schema rendering for prompts.
"""

from __future__ import annotations

import csv
import math
import re
import sqlite3
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Iterable, Iterator

import numpy as np

from .errors import IdmError

DIRECTIONS = ("N", "S", "E", "W")

CSV_HEADER = "detector_id,timestamp,volume,occupancy,speed,route,milepost,direction,detector_type"

DEFAULT_ROW_CAP = 100_000


class IngestError(IdmError):
    """Parse or constraint failure during ingestion; carries the row number."""

    def __init__(self, row: int, message: str) -> None:
        super().__init__(f"row {row}: {message}")
        self.row = row


class SqlExecutionError(IdmError):
    """SQL engine error; message preserved verbatim for the retry loop."""


class WriteAttemptError(IdmError):
    """A statement tried to mutate the read-only store."""


@dataclass(frozen=True)
class DetectorRecord:
    detector_id: str
    timestamp: datetime
    volume: float
    occupancy: float
    speed: float
    route: str
    milepost: float
    direction: str
    detector_type: str = "loop"

    def validate(self) -> None:
        if self.timestamp.second or self.timestamp.microsecond:
            raise ValueError("timestamp must be aligned to whole minutes")
        if self.volume < 0:
            raise ValueError(f"volume must be >= 0, got {self.volume}")
        if not (0 <= self.occupancy <= 100):
            raise ValueError(f"occupancy must be in [0, 100], got {self.occupancy}")
        if self.speed < 0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")
        if self.milepost < 0:
            raise ValueError(f"milepost must be >= 0, got {self.milepost}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")


@dataclass(frozen=True)
class Column:
    name: str
    kind: str  # numeric | categorical | temporal


@dataclass
class Dataset:
    """Rectangular query result with typed columns."""

    columns: list[Column]
    rows: list[tuple]
    truncated: bool = False

    def __post_init__(self) -> None:
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("column names must be unique")
        width = len(self.columns)
        for row in self.rows:
            if len(row) != width:
                raise ValueError("dataset must be rectangular")

    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column_values(self, name: str) -> list:
        idx = self.column_names().index(name)
        return [row[idx] for row in self.rows]

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame(self.rows, columns=self.column_names())


@dataclass
class NumericSummary:
    count: int
    null_count: int
    mean: float | None
    sample_std: float | None
    min: float | None
    max: float | None
    quartiles: tuple[float, float, float] | None


@dataclass
class CategoricalSummary:
    distinct: int
    top_values: list[tuple[str, int]]


@dataclass
class TimeCoverage:
    first: str
    last: str
    gap_count: int


@dataclass
class DatasetDescription:
    row_count: int
    numeric: dict[str, NumericSummary]
    categorical: dict[str, CategoricalSummary]
    time_coverage: TimeCoverage | None

    def render(self) -> str:
        """Narrative rendering for analysis prompts."""
        lines = [f"The dataset contains {self.row_count} rows."]
        if self.time_coverage:
            lines.append(
                f"Time coverage: {self.time_coverage.first} to {self.time_coverage.last}"
                f" ({self.time_coverage.gap_count} missing one-minute intervals)."
            )
        if self.numeric:
            lines.append("Numeric columns (std is the sample standard deviation):")
            for name, s in self.numeric.items():
                if s.count == 0:
                    lines.append(f"  {name}: no non-null values ({s.null_count} nulls)")
                else:
                    q1, q2, q3 = s.quartiles
                    lines.append(
                        f"  {name}: count={s.count} nulls={s.null_count} mean={s.mean:.4f}"
                        f" std={s.sample_std:.4f} min={s.min:.4f} q1={q1:.4f}"
                        f" median={q2:.4f} q3={q3:.4f} max={s.max:.4f}"
                    )
        if self.categorical:
            lines.append("Categorical columns:")
            for name, s in self.categorical.items():
                tops = ", ".join(f"{v}:{n}" for v, n in s.top_values)
                lines.append(f"  {name}: distinct={s.distinct} top=[{tops}]")
        return "\n".join(lines)


_TS_FORMATS = ("%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S")


def parse_timestamp(value: str) -> datetime:
    for fmt in _TS_FORMATS:
        try:
            return datetime.strptime(value, fmt)
        except ValueError:
            continue
    raise ValueError(f"unparsable timestamp {value!r}")


def _format_ts(ts: datetime) -> str:
    return ts.strftime("%Y-%m-%dT%H:%M")


def looks_temporal(value) -> bool:
    if not isinstance(value, str):
        return False
    try:
        parse_timestamp(value)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# Synthetic data generation


@dataclass(frozen=True)
class SynthEvent:
    """Injected congestion: speed drops by `speed_drop` over the window."""

    detector_index: int
    start_minute: int
    duration_minutes: int
    speed_drop: float = 0.5

    def __post_init__(self) -> None:
        if not (0.0 < self.speed_drop < 1.0):
            raise ValueError("speed_drop must be in (0, 1)")
        if self.duration_minutes <= 0 or self.start_minute < 0:
            raise ValueError("event window must be positive")


@dataclass(frozen=True)
class SynthConfig:
    n_detectors: int = 20
    days: int = 14
    seed: int = 7
    events: tuple[SynthEvent, ...] = ()
    start: datetime = datetime(2023, 1, 1)
    routes: tuple[str, ...] = ("I-5", "I-90", "SR-520", "I-405", "SR-99")

    def __post_init__(self) -> None:
        if self.n_detectors < 1 or self.days < 1:
            raise ValueError("n_detectors and days must be >= 1")
        if not self.routes:
            raise ValueError("at least one route required")
        for ev in self.events:
            if not (0 <= ev.detector_index < self.n_detectors):
                raise ValueError("event detector index out of range")


def generate_synthetic(config: SynthConfig) -> Iterator[DetectorRecord]:
    """Seeded per-minute records: daily sinusoid, weekly factor, noise.

    Speed is anti-correlated with occupancy; events force a speed drop of
    at least the configured fraction. Fully deterministic per seed.
    """
    rng = np.random.default_rng(config.seed)
    minutes = config.days * 1440
    n = config.n_detectors

    base_volume = rng.uniform(20, 60, size=n)
    free_flow = rng.uniform(55, 70, size=n)
    phase = rng.uniform(-0.5, 0.5, size=n)
    noise_v = rng.normal(0, 2.0, size=(n, minutes))
    noise_s = rng.normal(0, 1.5, size=(n, minutes))
    noise_o = rng.normal(0, 1.0, size=(n, minutes))

    event_windows: dict[int, list[SynthEvent]] = {}
    for ev in config.events:
        event_windows.setdefault(ev.detector_index, []).append(ev)

    for det in range(n):
        route = config.routes[det % len(config.routes)]
        direction = ("N", "S") if route.startswith("I-") and route != "I-90" else ("E", "W")
        d_dir = direction[det % 2]
        milepost = round(1.0 + (det // len(config.routes)) * 2.5, 1)
        det_id = f"{route}-{d_dir}-{det:03d}"
        for m in range(minutes):
            ts = config.start + timedelta(minutes=m)
            tod = (m % 1440) / 1440.0
            weekday = ts.weekday()
            weekly = 0.7 if weekday >= 5 else 1.0
            # Two commute peaks near 08:00 and 17:00.
            daily = 0.55 + 0.3 * math.sin(2 * math.pi * (tod - 0.33) + phase[det]) + 0.15 * math.sin(
                4 * math.pi * (tod - 0.33)
            )
            volume = max(0.0, base_volume[det] * daily * weekly + noise_v[det, m])
            occupancy = min(100.0, max(0.0, volume / 1.2 + noise_o[det, m]))
            speed = free_flow[det] * (1.0 - 0.006 * occupancy) + noise_s[det, m]
            for ev in event_windows.get(det, ()):
                if ev.start_minute <= m < ev.start_minute + ev.duration_minutes:
                    speed *= 1.0 - ev.speed_drop
                    occupancy = min(100.0, occupancy * 1.6 + 10)
            yield DetectorRecord(
                detector_id=det_id,
                timestamp=ts,
                volume=round(float(volume), 2),
                occupancy=round(float(occupancy), 2),
                speed=round(max(0.0, float(speed)), 2),
                route=route,
                milepost=milepost,
                direction=d_dir,
                detector_type="loop",
            )


# ---------------------------------------------------------------------------
# Store


_SCHEMA = """
CREATE TABLE IF NOT EXISTS observations (
    detector_id TEXT NOT NULL,
    timestamp TEXT NOT NULL,
    volume REAL NOT NULL CHECK (volume >= 0),
    occupancy REAL NOT NULL CHECK (occupancy BETWEEN 0 AND 100),
    speed REAL NOT NULL CHECK (speed >= 0),
    route TEXT NOT NULL,
    milepost REAL NOT NULL CHECK (milepost >= 0),
    direction TEXT NOT NULL CHECK (direction IN ('N','S','E','W')),
    detector_type TEXT NOT NULL,
    PRIMARY KEY (detector_id, timestamp)
);
CREATE TABLE IF NOT EXISTS segments (
    segment_id INTEGER PRIMARY KEY,
    route TEXT NOT NULL,
    direction TEXT NOT NULL,
    milepost_start REAL NOT NULL,
    milepost_end REAL NOT NULL,
    name TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS synthetic_events (
    detector_id TEXT NOT NULL,
    start_ts TEXT NOT NULL,
    end_ts TEXT NOT NULL,
    speed_drop REAL NOT NULL
);
"""

_TABLE_DOC = {
    "observations": (
        "One row per loop detector per minute.",
        {
            "detector_id": ("TEXT", "Stable detector identifier"),
            "timestamp": ("TEXT", "Observation minute, ISO-8601"),
            "volume": ("REAL", "Vehicles counted in the interval"),
            "occupancy": ("REAL", "Percent of interval the loop was occupied, 0-100"),
            "speed": ("REAL", "Mean speed in miles per hour"),
            "route": ("TEXT", "Route designation, e.g. I-5 or SR-520"),
            "milepost": ("REAL", "Detector milepost along the route"),
            "direction": ("TEXT", "Travel direction: N, S, E or W"),
            "detector_type": ("TEXT", "Detector hardware type"),
        },
        "Joins to segments on route and direction where milepost falls between milepost_start and milepost_end.",
    ),
    "segments": (
        "Named road segments used for scoping queries.",
        {
            "segment_id": ("INTEGER", "Segment identifier"),
            "route": ("TEXT", "Route designation"),
            "direction": ("TEXT", "Travel direction"),
            "milepost_start": ("REAL", "Segment start milepost"),
            "milepost_end": ("REAL", "Segment end milepost"),
            "name": ("TEXT", "Human-readable segment name"),
        },
        "A segment covers the detectors whose milepost lies within its milepost range on the same route and direction.",
    ),
}

_BRACKET = re.compile(r"\[([^\]\[]+)\]")

_READ_OK_ACTIONS = {
    sqlite3.SQLITE_SELECT,
    sqlite3.SQLITE_READ,
    sqlite3.SQLITE_FUNCTION,
    getattr(sqlite3, "SQLITE_RECURSIVE", 33),
}


def normalize_sql(sql: str) -> str:
    """Normalize bracketed identifiers and strip catalog qualifiers."""
    sql = _BRACKET.sub(lambda m: f'"{m.group(1)}"', sql)
    # Example banks use a placeholder catalog prefix; strip it.
    sql = re.sub(r'"?DatabaseX"?\.', "", sql)
    return sql.strip()


class TrafficStore:
    """SQLite-backed observation store. Ingestion happens before runs;
    all pipeline-reachable access is read-only."""

    def __init__(self, path: str = ":memory:", row_cap: int = DEFAULT_ROW_CAP) -> None:
        self.path = path
        self.row_cap = row_cap
        self._conn = sqlite3.connect(path)
        self._conn.executescript(_SCHEMA)
        self._conn.commit()
        self.blocked_statements = 0  # execution-side re-guard counter

    def close(self) -> None:
        self._conn.close()

    # -- ingestion ---------------------------------------------------------

    def ingest(self, records: Iterable[DetectorRecord]) -> int:
        """Persist records; duplicate (detector_id, timestamp) pairs are
        skipped and excluded from the returned count."""
        stored = 0
        cur = self._conn.cursor()
        for i, rec in enumerate(records, start=1):
            try:
                rec.validate()
            except ValueError as exc:
                self._conn.commit()
                raise IngestError(i, str(exc)) from exc
            cur.execute(
                "INSERT OR IGNORE INTO observations VALUES (?,?,?,?,?,?,?,?,?)",
                (
                    rec.detector_id,
                    _format_ts(rec.timestamp),
                    rec.volume,
                    rec.occupancy,
                    rec.speed,
                    rec.route,
                    rec.milepost,
                    rec.direction,
                    rec.detector_type,
                ),
            )
            stored += cur.rowcount
        self._conn.commit()
        return stored

    def ingest_csv(self, path: str) -> int:
        """Ingest the committed CSV layout (see CSV_HEADER)."""
        expected = CSV_HEADER.split(",")

        def rows() -> Iterator[DetectorRecord]:
            with open(path, "r", encoding="utf-8", newline="") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames != expected:
                    raise IngestError(1, f"header must be exactly {CSV_HEADER!r}")
                for i, row in enumerate(reader, start=2):
                    try:
                        yield DetectorRecord(
                            detector_id=row["detector_id"],
                            timestamp=parse_timestamp(row["timestamp"]),
                            volume=float(row["volume"]),
                            occupancy=float(row["occupancy"]),
                            speed=float(row["speed"]),
                            route=row["route"],
                            milepost=float(row["milepost"]),
                            direction=row["direction"],
                            detector_type=row["detector_type"],
                        )
                    except (TypeError, ValueError, KeyError) as exc:
                        raise IngestError(i, str(exc)) from exc

        return self.ingest(rows())

    def ingest_synthetic(self, config: SynthConfig) -> int:
        """Generate and persist synthetic data, recording injected events."""
        count = self.ingest(generate_synthetic(config))
        det_ids = [r[0] for r in self._conn.execute("SELECT DISTINCT detector_id FROM observations ORDER BY detector_id")]
        index_by_pos = sorted(det_ids, key=lambda d: int(d.rsplit("-", 1)[1]))
        cur = self._conn.cursor()
        for ev in config.events:
            det_id = index_by_pos[ev.detector_index]
            start = config.start + timedelta(minutes=ev.start_minute)
            end = start + timedelta(minutes=ev.duration_minutes)
            cur.execute(
                "INSERT INTO synthetic_events VALUES (?,?,?,?)",
                (det_id, _format_ts(start), _format_ts(end), ev.speed_drop),
            )
        self._seed_segments()
        self._conn.commit()
        return count

    def _seed_segments(self) -> None:
        cur = self._conn.cursor()
        cur.execute("DELETE FROM segments")
        rows = self._conn.execute(
            "SELECT route, direction, MIN(milepost), MAX(milepost) FROM observations GROUP BY route, direction"
        ).fetchall()
        for i, (route, direction, lo, hi) in enumerate(rows, start=1):
            cur.execute(
                "INSERT INTO segments VALUES (?,?,?,?,?,?)",
                (i, route, direction, lo, hi, f"{route} {direction} corridor"),
            )

    # -- read-only execution ----------------------------------------------

    def _authorizer(self, action, arg1, arg2, db_name, trigger):
        if action in _READ_OK_ACTIONS:
            return sqlite3.SQLITE_OK
        return sqlite3.SQLITE_DENY

    @staticmethod
    def _allow_all(action, arg1, arg2, db_name, trigger):
        # set_authorizer(None) does not clear the hook on all supported
        # Python versions; an allow-everything hook does.
        return sqlite3.SQLITE_OK

    def execute_sql(self, sql: str) -> Dataset:
        """Execute a read-only statement and return a typed Dataset.

        Any write or DDL attempt is denied at the engine level and counted
        in `blocked_statements`. Results are capped at `row_cap` rows with
        the truncation flag set.
        """
        sql = normalize_sql(sql)
        self._conn.set_authorizer(self._authorizer)
        try:
            cur = self._conn.execute(sql)
            rows = cur.fetchmany(self.row_cap + 1)
        except sqlite3.Error as exc:
            message = str(exc)
            if "not authorized" in message or "readonly" in message or "prohibited" in message:
                self.blocked_statements += 1
                raise WriteAttemptError(f"write attempt rejected: {message}") from exc
            raise SqlExecutionError(message) from exc
        finally:
            self._conn.set_authorizer(self._allow_all)

        truncated = len(rows) > self.row_cap
        rows = rows[: self.row_cap]
        names = [d[0] for d in cur.description] if cur.description else []
        columns = [Column(name, _infer_kind(name, [r[i] for r in rows])) for i, name in enumerate(names)]
        return Dataset(columns=columns, rows=[tuple(r) for r in rows], truncated=truncated)

    # -- description -------------------------------------------------------

    def schema_text(self) -> str:
        """Render the schema in the table/column/relationship prompt layout."""
        parts = ["Database Schema:", ""]
        for t, (table_name) in enumerate(_TABLE_DOC, start=1):
            desc, cols, relationship = _TABLE_DOC[table_name]
            parts.append(f"Table {t}: `{table_name}` - {desc}")
            for c, (col, (ctype, cdesc)) in enumerate(cols.items(), start=1):
                parts.append(f"    Column {c}: `{col}` - `{ctype}` - {cdesc}")
            parts.append(f"    {relationship}")
            parts.append("")
        return "\n".join(parts).rstrip() + "\n"

    def detectors_on_routes(self, routes: list[str]) -> list[str]:
        if not routes:
            return []
        marks = ",".join("?" for _ in routes)
        rows = self._conn.execute(
            f"SELECT DISTINCT detector_id FROM observations WHERE route IN ({marks}) ORDER BY detector_id",
            routes,
        ).fetchall()
        return [r[0] for r in rows]

    def known_routes(self) -> list[str]:
        return [r[0] for r in self._conn.execute("SELECT DISTINCT route FROM observations ORDER BY route")]

    def last_timestamp(self) -> datetime | None:
        row = self._conn.execute("SELECT MAX(timestamp) FROM observations").fetchone()
        return parse_timestamp(row[0]) if row and row[0] else None

    def synthetic_events(self) -> list[tuple[str, datetime, datetime, float]]:
        rows = self._conn.execute(
            "SELECT detector_id, start_ts, end_ts, speed_drop FROM synthetic_events ORDER BY detector_id, start_ts"
        ).fetchall()
        return [(d, parse_timestamp(s), parse_timestamp(e), drop) for d, s, e, drop in rows]


def _infer_kind(name: str, values: list) -> str:
    non_null = [v for v in values if v is not None]
    if non_null and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in non_null):
        return "numeric"
    if non_null and all(looks_temporal(v) for v in non_null):
        return "temporal"
    if not non_null and name.lower() in ("timestamp", "date", "start_ts", "end_ts"):
        return "temporal"
    if not non_null and name.lower() in ("volume", "occupancy", "speed", "milepost"):
        return "numeric"
    return "categorical"


def describe(d: Dataset) -> DatasetDescription:
    """Statistical summary of a dataset; no LLM involved and every figure
    is recomputable from the rows."""
    numeric: dict[str, NumericSummary] = {}
    categorical: dict[str, CategoricalSummary] = {}
    coverage: TimeCoverage | None = None

    for col in d.columns:
        values = d.column_values(col.name)
        if col.kind == "numeric":
            non_null = np.array([v for v in values if v is not None], dtype=float)
            nulls = len(values) - len(non_null)
            if len(non_null) == 0:
                numeric[col.name] = NumericSummary(0, nulls, None, None, None, None, None)
            else:
                std = float(np.std(non_null, ddof=1)) if len(non_null) > 1 else 0.0
                q1, q2, q3 = (float(q) for q in np.percentile(non_null, [25, 50, 75]))
                numeric[col.name] = NumericSummary(
                    count=len(non_null),
                    null_count=nulls,
                    mean=float(np.mean(non_null)),
                    sample_std=std,
                    min=float(np.min(non_null)),
                    max=float(np.max(non_null)),
                    quartiles=(q1, q2, q3),
                )
        elif col.kind == "temporal":
            stamps = sorted(parse_timestamp(v) for v in values if v is not None)
            if stamps:
                expected = int((stamps[-1] - stamps[0]).total_seconds() // 60) + 1
                gaps = expected - len(set(stamps))
                coverage = TimeCoverage(_format_ts(stamps[0]), _format_ts(stamps[-1]), max(0, gaps))
        else:
            from collections import Counter

            counts = Counter(str(v) for v in values if v is not None)
            categorical[col.name] = CategoricalSummary(
                distinct=len(counts),
                top_values=counts.most_common(5),
            )
    return DatasetDescription(
        row_count=len(d.rows), numeric=numeric, categorical=categorical, time_coverage=coverage
    )

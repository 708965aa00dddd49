"""Evaluation harness: code-computed data-integrity and result-correctness
criteria, judge-scored report criteria, the query battery, results tables,
and the ablation runner."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import timedelta

import numpy as np

from . import gateway as gw
from .agents.iv import FormattedQuestion
from .agents.sp import Criterion
from .agents.ss import DEFAULT_RESULT_CRITERIA
from .errors import IdmError
from .store import Dataset, TrafficStore, parse_timestamp

CATEGORIES = ("MAP", "OO", "ES", "ID-M")
SUBCATEGORIES = ("RT-TP", "RT-CF", "WIP", "CNA", "PR", "IDTP", "ARFI", "PSM", "EISS")

GROUND_TRUTH_BINDINGS = ("forecast", "events", "none")

CRITERION_COLUMNS = ("DI", "RC", "MV", "CR", "EQ", "VC")


class ConstantTruth(IdmError):
    """Result correctness is undefined for a constant ground-truth series."""


class BatteryParseError(IdmError):
    """Malformed battery file; carries a line number when known."""


class InvalidAblationConfig(IdmError):
    """Only the IV, SP and SS stages may be skipped."""


@dataclass(frozen=True)
class QuerySpec:
    category: str
    subcategory: str
    text: str
    ground_truth: str = "none"
    open_ended: bool = False

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.subcategory not in SUBCATEGORIES:
            raise ValueError(f"unknown subcategory {self.subcategory!r}")
        if self.ground_truth not in GROUND_TRUTH_BINDINGS:
            raise ValueError(f"unknown ground-truth binding {self.ground_truth!r}")
        if self.subcategory == "CNA" and (not self.open_ended or self.ground_truth != "none"):
            raise ValueError("CNA specs are open-ended and carry no ground truth")


@dataclass
class ResultsRow:
    label: str
    values: dict[str, float | None]
    note: str = ""

    @property
    def avg(self) -> float | None:
        present = [v for v in self.values.values() if v is not None]
        if not present:
            return None
        return sum(present) / len(present)


@dataclass
class ResultsTable:
    rows: list[ResultsRow] = field(default_factory=list)

    @staticmethod
    def recompute_avg(values: list[float]) -> float:
        """The Avg rule: unweighted mean of the present criterion values."""
        return sum(values) / len(values)

    def to_markdown(self) -> str:
        header = "| Label | " + " | ".join(CRITERION_COLUMNS) + " | Avg |"
        sep = "|" + "---|" * (len(CRITERION_COLUMNS) + 2)
        lines = [header, sep]
        for row in self.rows:
            cells = [f"{row.values.get(c):.4f}" if row.values.get(c) is not None else "-" for c in CRITERION_COLUMNS]
            avg = f"{row.avg:.4f}" if row.avg is not None else "-"
            label = row.label + (f" ({row.note})" if row.note else "")
            lines.append(f"| {label} | " + " | ".join(cells) + f" | {avg} |")
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["label," + ",".join(CRITERION_COLUMNS) + ",avg,note"]
        for row in self.rows:
            cells = [f"{row.values.get(c):.6f}" if row.values.get(c) is not None else "" for c in CRITERION_COLUMNS]
            avg = f"{row.avg:.6f}" if row.avg is not None else ""
            lines.append(f"{row.label}," + ",".join(cells) + f",{avg},{row.note}")
        return "\n".join(lines) + "\n"


# -- code-computed criteria -------------------------------------------------

_RANGE_CHECKS = {
    "volume": lambda v: v >= 0,
    "occupancy": lambda v: 0 <= v <= 100,
    "speed": lambda v: v >= 0,
    "milepost": lambda v: v >= 0,
    "direction": lambda v: v in ("N", "S", "E", "W"),
}


def compute_di(d: Dataset, fq: FormattedQuestion, store: TrafficStore | None = None) -> float:
    """Data integrity: mean of completeness, validity, and scope coverage."""
    if not d.rows:
        return 0.0
    return (_completeness(d, fq) + _validity(d) + _coverage(d, fq, store)) / 3.0


def _completeness(d: Dataset, fq: FormattedQuestion) -> float:
    temporal = [c.name for c in d.columns if c.kind == "temporal"]
    if not temporal:
        return 0.0
    stamps = set()
    for v in d.column_values(temporal[0]):
        if v is None:
            continue
        try:
            stamps.add(parse_timestamp(v))
        except ValueError:
            continue
    expected = int((fq.window_end - fq.window_start).total_seconds() // 60)
    if expected <= 0:
        return 0.0
    in_window = {s for s in stamps if fq.window_start <= s < fq.window_end}
    return min(1.0, len(in_window) / expected)


def _validity(d: Dataset) -> float:
    checked_cols = [
        (i, _RANGE_CHECKS[c.name.lower()]) for i, c in enumerate(d.columns) if c.name.lower() in _RANGE_CHECKS
    ]
    if not checked_cols:
        return 1.0
    valid = 0
    for row in d.rows:
        ok = True
        for i, check in checked_cols:
            v = row[i]
            if v is None or not check(v):
                ok = False
                break
        valid += ok
    return valid / len(d.rows)


def _coverage(d: Dataset, fq: FormattedQuestion, store: TrafficStore | None) -> float:
    requested_routes = fq.routes()
    names = [c.name.lower() for c in d.columns]
    if store is not None:
        routes = requested_routes or store.known_routes()
        requested = set(store.detectors_on_routes(routes))
        if requested and "detector_id" in names:
            present = {str(v) for v in d.column_values(d.column_names()[names.index("detector_id")]) if v}
            return len(present & requested) / len(requested)
    if requested_routes and "route" in names:
        present = {str(v).upper() for v in d.column_values(d.column_names()[names.index("route")]) if v}
        hit = sum(1 for r in requested_routes if r.upper() in present)
        return hit / len(requested_routes)
    return 1.0  # nothing identifiable requested; nonempty data counts as covered


def compute_rc(pred, truth) -> float:
    """Result correctness: max(0, 1 - RMSE / range(truth)), in [0, 1]."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 1 or len(pred) < 1:
        raise ValueError("pred and truth must be equal-length 1-D series of length >= 1")
    span = float(np.max(truth) - np.min(truth))
    if span == 0:
        if len(truth) > 1:
            raise ConstantTruth("ground-truth series is constant; score undefined")
        return 1.0 if pred[0] == truth[0] else 0.0
    error = float(np.sqrt(np.mean((pred - truth) ** 2)))
    return max(0.0, 1.0 - error / span)


# -- judge-scored criteria --------------------------------------------------


def geval_criterion(
    backend: gw.Backend,
    artifact_text: str,
    criterion: Criterion,
    n_samples: int = 8,
) -> float:
    """Chain-of-thought scoring of a report artifact on one criterion."""
    if not artifact_text.strip():
        raise ValueError("artifact text must be nonempty")
    cot = backend.complete(
        gw.request(
            f"eval.cot.{criterion.slug}",
            artifact_text,
            system=f"Reason step by step about this criterion: {criterion.definition}",
        )
    )
    req = gw.request(
        f"eval.score.{criterion.slug}",
        artifact_text,
        f"Reasoning:\n{cot.text}",
        system=f"Score on '{criterion.name}' with a single value in "
        f"{criterion.scale[0]}..{criterion.scale[-1]}.",
        temperature=1.0,
    )
    dist = gw.score_distribution(backend, req, criterion.scale, n_samples)
    return gw.expected_score(dist)


# -- battery ----------------------------------------------------------------


def load_query_battery(path: str, store: TrafficStore | None = None) -> list["QuerySpec"]:
    """Load query specs, filling template placeholders from the store."""
    import yaml

    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = mark.line + 1 if mark else 0
            raise BatteryParseError(f"line {line}: {exc}") from exc
    if not isinstance(doc, dict) or "queries" not in doc:
        raise BatteryParseError("line 1: battery file must contain a top-level 'queries' list")
    specs = []
    for i, rec in enumerate(doc["queries"], start=1):
        try:
            specs.append(
                QuerySpec(
                    category=rec["category"],
                    subcategory=rec["subcategory"],
                    text=_fill_placeholders(rec["text"], store),
                    ground_truth=rec.get("ground_truth", "none"),
                    open_ended=bool(rec.get("open_ended", False)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BatteryParseError(f"query {i}: {exc}") from exc
    return specs


def _fill_placeholders(text: str, store: TrafficStore | None) -> str:
    if store is None or "<" not in text:
        return text
    last = store.last_timestamp()
    subs: dict[str, str] = {}
    if last is not None:
        subs["<date>"] = last.strftime("%Y-%m-%d")
        for i in range(1, 4):
            subs[f"<date{i}>"] = (last - timedelta(days=7 * i)).strftime("%Y-%m-%d")
    events = store.synthetic_events()
    if events:
        rows = "; ".join(f"{det} from {s.isoformat()} to {e.isoformat()}" for det, s, e, _ in events[:5])
        subs["<data>"] = rows
    else:
        subs["<data>"] = "no recorded incidents"
    subs["<weather data>"] = "icy mornings in the first and last week of the window"
    subs["<milepost1>"], subs["<milepost2>"] = "1.0", "8.5"
    subs["<dates>"] = subs.get("<date>", "recent dates")
    for key, value in subs.items():
        text = text.replace(key, value)
    return re.sub(r"<[^<>]{1,40}>", "recent data", text)


def run_battery(queries: list[QuerySpec], pipeline) -> ResultsTable:
    """Run each query end to end and average criteria per subcategory.

    Per-query failures are recorded as row annotations; the run continues.
    Open-ended specs leave the RC column blank.
    """
    by_sub: dict[str, list[dict[str, float | None]]] = {}
    notes: dict[str, list[str]] = {}
    for spec in queries:
        try:
            scores = pipeline.score_query(spec)
        except IdmError as exc:
            notes.setdefault(spec.subcategory, []).append(str(exc))
            continue
        by_sub.setdefault(spec.subcategory, []).append(scores)

    table = ResultsTable()
    for sub in SUBCATEGORIES:
        runs = by_sub.get(sub)
        if runs is None and sub not in notes:
            continue
        values: dict[str, float | None] = {}
        for crit in CRITERION_COLUMNS:
            present = [r[crit] for r in (runs or []) if r.get(crit) is not None]
            values[crit] = sum(present) / len(present) if present else None
        note = "; ".join(notes.get(sub, []))
        table.rows.append(ResultsRow(label=sub, values=values, note=note))
    return table


ABLATION_SKIPPABLE = frozenset({"IV", "SP", "SS"})


def run_ablation(queries: list[QuerySpec], pipeline_factory) -> ResultsTable:
    """One battery run per configuration in {IV, SP, SS, None}.

    `pipeline_factory(skips)` must return a pipeline with those stages
    disabled; the DBI and DAS stages are never skippable.
    """
    table = ResultsTable()
    for label in ("IV", "SP", "SS", "None"):
        skips = frozenset() if label == "None" else frozenset({label})
        pipeline = pipeline_factory(skips)
        sub_table = run_battery(queries, pipeline)
        values: dict[str, float | None] = {}
        for crit in CRITERION_COLUMNS:
            present = [row.values[crit] for row in sub_table.rows if row.values.get(crit) is not None]
            values[crit] = sum(present) / len(present) if present else None
        note = "; ".join(filter(None, (row.note for row in sub_table.rows)))
        table.rows.append(ResultsRow(label=label, values=values, note=note))
    return table


def check_skips(skips: frozenset[str]) -> None:
    bad = skips - ABLATION_SKIPPABLE
    if bad:
        raise InvalidAblationConfig(f"stages {sorted(bad)} cannot be skipped")


# Judge criteria reused for report scoring in the battery.
REPORT_CRITERIA = {c.name: c for c in DEFAULT_RESULT_CRITERIA}

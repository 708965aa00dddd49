"""Database interaction agent.

Schema-and-examples prompting for SQL generation, a SELECT-only
validation guard, dataset anonymization, and the bounded
retry-on-error retrieval loop.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

from .. import gateway as gw
from ..errors import IdmError
from ..store import (
    Column,
    Dataset,
    SqlExecutionError,
    TrafficStore,
    WriteAttemptError,
    normalize_sql,
    parse_timestamp,
)
from .iv import FormattedQuestion

CATEGORIES = ("select", "conditional", "join", "aggregate", "filter-with-join", "date-range", "group-by")

MAX_ATTEMPTS = 3


class NoSqlFound(IdmError):
    """The completion contained no recognizable SQL statement."""


class AttemptsExhausted(IdmError):
    """Retrieval failed after the maximum number of generation attempts."""

    def __init__(self, attempts: int, last_error: str) -> None:
        super().__init__(f"retrieval failed after {attempts} attempts; last error: {last_error}")
        self.last_error = last_error


@dataclass(frozen=True)
class SqlCandidate:
    sql: str
    category_hint: str = "select"
    attempt: int = 1

    def __post_init__(self) -> None:
        if self.attempt < 1 or self.attempt > MAX_ATTEMPTS:
            raise ValueError(f"attempt must be in 1..{MAX_ATTEMPTS}")


@dataclass(frozen=True)
class PiiRule:
    column: str
    action: str  # drop | hash | coarsen

    def __post_init__(self) -> None:
        if self.action not in ("drop", "hash", "coarsen"):
            raise ValueError(f"unknown PII action {self.action!r}")


@dataclass(frozen=True)
class PiiPolicy:
    denied_columns: tuple[str, ...] = ()
    transformations: tuple[PiiRule, ...] = ()
    hash_key: str = "idm-anonymizer"

    @classmethod
    def from_file(cls, path: str) -> "PiiPolicy":
        import yaml

        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        return cls(
            denied_columns=tuple(doc.get("denied_columns", [])),
            transformations=tuple(PiiRule(r["column"], r["action"]) for r in doc.get("transformations", [])),
            hash_key=doc.get("hash_key", "idm-anonymizer"),
        )


# -- prompt construction ----------------------------------------------------


def build_sql_prompt(
    fq: FormattedQuestion,
    schema: str,
    examples: list[dict],
    prior_sql: str | None = None,
    prior_error: str | None = None,
) -> str:
    """Three-part prompt: schema, category examples, user objective slot.

    On retries the prior statement and its verbatim engine error are
    appended so the model can repair the query.
    """
    parts = [
        "Part 1: Database Schema Illustration",
        "Here is the schema for the database you will be interacting with. "
        "Use it to identify relevant tables and columns.",
        schema,
        "Part 2: SQL Query Examples",
        "Here are example queries demonstrating typical patterns. Refer to these when writing your query.",
    ]
    for i, ex in enumerate(examples, start=1):
        parts.append(f"{i}. {ex['title']}\n   - Example Prompt: \"{ex['prompt']}\"\n   - SQL:\n{ex['sql']}")
    parts.append(
        "Use these as templates, keep the query structure standard, and strip any personally "
        "identifiable information."
    )
    parts.append("Part 3: SQL Query Generation")
    window = f"{fq.window_start.isoformat()} to {fq.window_end.isoformat()}"
    parts.append(
        "Now, based on the schema and examples above, write a single SQL SELECT statement that "
        "retrieves the data relevant to the user's objective and scope.\n"
        f"User Query: `{fq.objective} | time scope: {fq.time_scope} ({window}) | "
        f"location scope: {fq.location_scope}`"
    )
    if prior_sql is not None:
        parts.append(
            "The previous attempt failed. Fix the statement.\n"
            f"Previous SQL: {prior_sql}\n"
            f"Error: {prior_error}"
        )
    return "\n\n".join(parts)


_SQL_FENCE = re.compile(r"```(?:sql)?\s*(.+?)```", re.DOTALL | re.IGNORECASE)
_SQL_STMT = re.compile(r"((?:SELECT|WITH)\b.+?)(?:;|\Z)", re.DOTALL | re.IGNORECASE)


def extract_sql(reply: str) -> str:
    """Pull the SQL statement out of a completion, stripping prose."""
    m = _SQL_FENCE.search(reply)
    body = m.group(1) if m else reply
    m = _SQL_STMT.search(body)
    if not m:
        raise NoSqlFound("no SQL statement found in the completion")
    return " ".join(m.group(1).split()).rstrip(";") + ";"


# -- validation guard -------------------------------------------------------

_WRITE_KEYWORDS = re.compile(
    r"\b(insert|update|delete|drop|alter|create|attach|detach|pragma|replace|truncate|"
    r"vacuum|reindex|grant|revoke|exec|execute)\b",
    re.IGNORECASE,
)
_LINE_COMMENT = re.compile(r"--[^\n]*")
_BLOCK_COMMENT = re.compile(r"/\*.*?\*/", re.DOTALL)
_STRING_LITERAL = re.compile(r"'(?:[^']|'')*'")
_LIMIT = re.compile(r"\blimit\s+\d+", re.IGNORECASE)


@dataclass
class ValidationResult:
    statement: str | None
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_sql(candidate: SqlCandidate, policy: PiiPolicy, row_cap: int = 10_000) -> ValidationResult:
    """Accept exactly one top-level read-only SELECT.

    Comments are stripped before inspection so statements hidden inside
    them cannot slip past; denied columns anywhere in the statement are a
    violation; a row cap is appended when absent.
    """
    violations: list[str] = []
    sql = normalize_sql(candidate.sql)
    sql = _BLOCK_COMMENT.sub(" ", sql)
    sql = _LINE_COMMENT.sub(" ", sql)
    scrubbed = _STRING_LITERAL.sub("''", sql)

    statements = [s for s in scrubbed.split(";") if s.strip()]
    if len(statements) > 1:
        violations.append("multiple-statements")
    head = scrubbed.strip().split(None, 1)[0].lower() if scrubbed.strip() else ""
    if head not in ("select", "with"):
        violations.append("non-select")
    m = _WRITE_KEYWORDS.search(scrubbed)
    if m:
        violations.append(f"write-keyword:{m.group(1).lower()}")
    for col in policy.denied_columns:
        if re.search(rf"\b{re.escape(col)}\b", scrubbed, re.IGNORECASE):
            violations.append(f"denied-column:{col}")

    if violations:
        return ValidationResult(statement=None, violations=violations)
    statement = sql.split(";")[0].strip()
    if not _LIMIT.search(statement):
        statement = f"{statement} LIMIT {row_cap}"
    return ValidationResult(statement=statement + ";")


# -- anonymization ----------------------------------------------------------


def _hash_value(value, key: str) -> str:
    digest = hashlib.blake2s(str(value).encode("utf-8"), key=key.encode("utf-8"), digest_size=8)
    return digest.hexdigest()


def _coarsen_value(column: str, value):
    if value is None:
        return None
    if isinstance(value, (int, float)):
        return float(round(value))  # mileposts to a 1.0 grain
    try:
        ts = parse_timestamp(value)
    except (ValueError, TypeError):
        return value
    ts = ts.replace(minute=ts.minute - ts.minute % 15)
    return ts.strftime("%Y-%m-%dT%H:%M")


def anonymize(d: Dataset, policy: PiiPolicy) -> Dataset:
    """Apply drop/hash/coarsen rules; idempotent for a fixed policy."""
    actions = {r.column: r.action for r in policy.transformations}
    keep = [i for i, c in enumerate(d.columns) if actions.get(c.name) != "drop"]
    columns: list[Column] = []
    for i in keep:
        c = d.columns[i]
        if actions.get(c.name) == "hash":
            columns.append(Column(c.name, "categorical"))
        else:
            columns.append(c)

    rows = []
    for row in d.rows:
        new_row = []
        for i in keep:
            c = d.columns[i]
            v = row[i]
            action = actions.get(c.name)
            if action == "hash":
                # Re-hashing a hash would break idempotence; hashes are
                # recognizable by their fixed hex shape.
                if isinstance(v, str) and re.fullmatch(r"[0-9a-f]{16}", v):
                    new_row.append(v)
                else:
                    new_row.append(_hash_value(v, policy.hash_key))
            elif action == "coarsen":
                new_row.append(_coarsen_value(c.name, v))
            else:
                new_row.append(v)
        rows.append(tuple(new_row))
    return Dataset(columns=columns, rows=rows, truncated=d.truncated)


# -- the agent --------------------------------------------------------------


class DatabaseInteractor:
    """Owns the generate/validate/execute retry loop."""

    def __init__(
        self,
        backend: gw.Backend,
        store: TrafficStore,
        examples: list[dict],
        policy: PiiPolicy = PiiPolicy(),
        max_attempts: int = MAX_ATTEMPTS,
        prompt_preamble: str | None = None,
    ) -> None:
        self.backend = backend
        self.store = store
        self.examples = examples
        self.policy = policy
        self.max_attempts = max_attempts
        self.prompt_preamble = prompt_preamble

    def generate_sql(self, prompt: str, attempt: int = 1) -> SqlCandidate:
        if not prompt.strip():
            raise ValueError("prompt must be nonempty")
        resp = self.backend.complete(
            gw.request("dbi.sql", prompt, system="You translate analysis requests into SQL.")
        )
        return SqlCandidate(sql=extract_sql(resp.text), attempt=attempt)

    def retrieve(self, fq: FormattedQuestion) -> tuple[Dataset, SqlCandidate, int]:
        prior_sql: str | None = None
        prior_error: str | None = None
        last_error = "no attempt made"
        for attempt in range(1, self.max_attempts + 1):
            prompt = build_sql_prompt(fq, self.store.schema_text(), self.examples, prior_sql, prior_error)
            if self.prompt_preamble:
                prompt = f"{self.prompt_preamble}\n\n{prompt}"
            try:
                candidate = self.generate_sql(prompt, attempt)
            except NoSqlFound as exc:
                prior_sql, prior_error, last_error = "", str(exc), str(exc)
                continue
            result = validate_sql(candidate, self.policy, row_cap=self.store.row_cap)
            if not result.ok:
                prior_sql = candidate.sql
                prior_error = last_error = "validation violations: " + ", ".join(result.violations)
                continue
            try:
                dataset = self.store.execute_sql(result.statement)
            except (SqlExecutionError, WriteAttemptError) as exc:
                prior_sql, prior_error, last_error = candidate.sql, str(exc), str(exc)
                continue
            return anonymize(dataset, self.policy), candidate, attempt
        raise AttemptsExhausted(self.max_attempts, last_error)

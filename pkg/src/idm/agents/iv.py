"""Input validation agent.

Gates the user query on four semantic checks (topic, objective, time
scope, location scope), runs the bounded clarification loop, and emits a
formatted question with a resolved time window or a general fallback
response.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import datetime, timedelta

from .. import gateway as gw
from ..errors import IdmError
from ..semantic import HashingEmbedder, ReferenceSet, gate, max_similarity

MAX_WINDOW_DAYS = 7

CHECK_NAMES = ("topic", "objective", "time_scope", "location_scope")


class RoundsExhausted(IdmError):
    """The clarification budget is spent."""


class NotValidated(IdmError):
    """Operation requires a query that passed validation."""


@dataclass(frozen=True)
class UserQuery:
    text: str
    clarification_round: int = 0

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("query text must be nonempty")
        if self.clarification_round < 0:
            raise ValueError("clarification_round must be >= 0")


@dataclass(frozen=True)
class CheckEvidence:
    score: float
    best_label: str


@dataclass(frozen=True)
class ValidationOutcome:
    topic: bool
    objective: bool
    time_scope: bool
    location_scope: bool
    evidence: dict[str, CheckEvidence]

    @property
    def overall(self) -> bool:
        return self.topic and self.objective and self.time_scope and self.location_scope

    @property
    def missing(self) -> list[str]:
        return [name for name in CHECK_NAMES if not getattr(self, name)]


@dataclass(frozen=True)
class FormattedQuestion:
    objective: str
    time_scope: str
    location_scope: str
    original: str
    window_start: datetime
    window_end: datetime
    window_clipped: bool = False

    def __post_init__(self) -> None:
        for f in (self.objective, self.time_scope, self.location_scope):
            if not f.strip():
                raise ValueError("formatted question fields must be nonempty")
        span = self.window_end - self.window_start
        if span <= timedelta(0) or span > timedelta(days=MAX_WINDOW_DAYS):
            raise ValueError(f"time window must be positive and at most {MAX_WINDOW_DAYS} days")

    def routes(self) -> list[str]:
        return _ROUTE.findall(self.location_scope)


# -- span extraction --------------------------------------------------------

_ROUTE = re.compile(r"\b(?:SR|I|US|WA)-\d+\b", re.IGNORECASE)

_OBJECTIVE = re.compile(
    r"\b(forecast|predict|estimate|analy[sz]e|detect|identify|optimi[sz]e|suggest|simulate|"
    r"assess|compare|evaluate|monitor|reduce|improve|balance)\b"
    r"((?:\s+[\w\-]+){0,5}?)"
    r"(?=\s+(?:at|on|for|during|using|from|near|between|along|across|next|last|tomorrow|by|to|of)\b|[.,;]|$)",
    re.IGNORECASE,
)

_TIME_PATTERNS = [
    r"next\s+(?:weekend|week|monday|tuesday|wednesday|thursday|friday|saturday|sunday|winter|month)",
    r"(?:last|past|this)\s+(?:weekend|week|month|season|winter|summer|year|\d+\s+(?:days?|weeks?|months?|years?))",
    r"(?:monday|tuesday|wednesday|thursday|friday|saturday|sunday)(?:\s+(?:morning|evening|afternoon|night))?"
    r"(?:\s+(?:peak|rush)\s+hours?)?",
    r"tomorrow(?:\s+(?:morning|evening|afternoon|night))?",
    r"(?:morning|evening|afternoon)\s+(?:peak|rush)\s+hours?",
    r"\d{4}-\d{2}-\d{2}(?:\s*(?:to|through|-)\s*\d{4}-\d{2}-\d{2})?",
    r"(?:january|february|march|april|may|june|july|august|september|october|november|december)"
    r"(?:\s+\d{4})?",
    r"\d+\s+(?:days?|weeks?|months?)",
    r"(?:heavy|busy|peak)\s+(?:traffic\s+)?periods?",
    r"commuters?\b",  # recurring commute timing counts as a time scope
    r"(?:real[- ]time|current(?:ly)?|now|today)",
]
_TIME = re.compile("|".join(f"(?:{p})" for p in _TIME_PATTERNS), re.IGNORECASE)

_PLACE = r"[A-Z][a-z]+(?:\s+[A-Z][a-z]+)?"
_LOCATION_PATTERNS = [
    rf"(?:SR|I|US|WA)-\d+\s+(?:from|between)\s+{_PLACE}\s+(?:to|and)\s+{_PLACE}",
    rf"(?:SR|I|US|WA)-\d+\s+(?:near|at|around)\s+(?:downtown\s+)?{_PLACE}",
    rf"(?:SR|I|US|WA)-\d+\s+(?:bridge|corridor|southbound|northbound|eastbound|westbound)",
    r"(?:SR|I|US|WA)-\d+",
    rf"from\s+{_PLACE}\s+to\s+(?:downtown\s+)?{_PLACE}",
    rf"(?:near|in|at)\s+downtown\s+{_PLACE}",
]
_LOCATION = re.compile("|".join(f"(?:{p})" for p in _LOCATION_PATTERNS))


def extract_phrases(query: UserQuery) -> tuple[list[str], list[str], list[str]]:
    """Rule-based candidate spans for objective, time, and location."""
    text = query.text
    objectives = [" ".join(m.group(0).split()) for m in _OBJECTIVE.finditer(text)]
    times = [" ".join(m.group(0).split()) for m in _TIME.finditer(text)]
    locations = [" ".join(m.group(0).split()) for m in _LOCATION.finditer(text)]
    return objectives, times, locations


# -- time window resolution -------------------------------------------------

_WEEKDAYS = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")
_SPAN = re.compile(r"(\d+)\s+(day|week|month|year)s?", re.IGNORECASE)
_DATE_RANGE = re.compile(r"(\d{4}-\d{2}-\d{2})\s*(?:to|through|-)\s*(\d{4}-\d{2}-\d{2})")
_SINGLE_DATE = re.compile(r"\d{4}-\d{2}-\d{2}")


def resolve_window(time_text: str, now: datetime) -> tuple[datetime, datetime, bool]:
    """Resolve a time-scope phrase to a concrete window.

    Windows longer than one week are clipped to seven days and flagged.
    Unrecognized phrases default to the most recent full day.
    """
    text = time_text.lower()
    today = now.replace(hour=0, minute=0, second=0, microsecond=0)

    m = _DATE_RANGE.search(time_text)
    if m:
        start = datetime.strptime(m.group(1), "%Y-%m-%d")
        end = datetime.strptime(m.group(2), "%Y-%m-%d") + timedelta(days=1)
        return _clip(start, end)
    m = _SINGLE_DATE.search(time_text)
    if m:
        start = datetime.strptime(m.group(0), "%Y-%m-%d")
        return start, start + timedelta(days=1), False
    m = _SPAN.search(text)
    if m:
        count, unit = int(m.group(1)), m.group(2).lower()
        days = count * {"day": 1, "week": 7, "month": 30, "year": 365}[unit]
        anchor = "next" not in text
        if anchor:  # trailing window ending now
            return _clip(today - timedelta(days=days), today)
        return _clip(today, today + timedelta(days=days))

    if "next weekend" in text or ("weekend" in text and "last" not in text):
        days_to_sat = (5 - today.weekday()) % 7 or 7
        start = today + timedelta(days=days_to_sat)
        return start, start + timedelta(days=2), False
    for i, day in enumerate(_WEEKDAYS):
        if day in text:
            if "last" in text or "past" in text:
                back = (today.weekday() - i) % 7 or 7
                start = today - timedelta(days=back)
            else:
                ahead = (i - today.weekday()) % 7 or 7
                start = today + timedelta(days=ahead)
            return start, start + timedelta(days=1), False
    if "tomorrow" in text:
        start = today + timedelta(days=1)
        return start, start + timedelta(days=1), False
    if "last week" in text or "past week" in text:
        return today - timedelta(days=7), today, False
    for word, days in (("month", 30), ("season", 90), ("winter", 90), ("summer", 90), ("year", 365)):
        if word in text:
            return _clip(today - timedelta(days=days), today)
    # "real-time", "today", "peak hours", or anything unrecognized: the
    # most recent full day.
    return today - timedelta(days=1), today, False


def _clip(start: datetime, end: datetime) -> tuple[datetime, datetime, bool]:
    if end - start > timedelta(days=MAX_WINDOW_DAYS):
        return end - timedelta(days=MAX_WINDOW_DAYS), end, True
    return start, end, False


# -- the agent --------------------------------------------------------------


class InputValidator:
    """Runs the four-gate validation, clarification, and formatting."""

    def __init__(
        self,
        embedder: HashingEmbedder,
        topic_set: ReferenceSet,
        objective_set: ReferenceSet,
        time_set: ReferenceSet,
        location_set: ReferenceSet,
        backend: gw.Backend | None = None,
        max_rounds: int = 2,
        now: datetime | None = None,
    ) -> None:
        self.embedder = embedder
        self.topic_set = topic_set
        self.objective_set = objective_set
        self.time_set = time_set
        self.location_set = location_set
        self.backend = backend
        self.max_rounds = max_rounds
        self.now = now or datetime.now().replace(second=0, microsecond=0)

    def _span_check(self, spans: list[str], refset: ReferenceSet) -> CheckEvidence:
        best = CheckEvidence(score=-1.0, best_label="")
        for span in spans:
            score, label = max_similarity(self.embedder.embed(span), refset)
            if score > best.score:
                best = CheckEvidence(score=score, best_label=label)
        return best

    def validate(self, query: UserQuery) -> ValidationOutcome:
        q_vec = self.embedder.embed(query.text)
        topic_score, topic_label = max_similarity(q_vec, self.topic_set)
        objectives, times, locations = extract_phrases(query)

        evidence = {"topic": CheckEvidence(topic_score, topic_label)}
        checks = {"topic": gate(q_vec, self.topic_set)}
        for name, spans, refset in (
            ("objective", objectives, self.objective_set),
            ("time_scope", times, self.time_set),
            ("location_scope", locations, self.location_set),
        ):
            ev = self._span_check(spans, refset)
            evidence[name] = ev
            checks[name] = ev.score >= refset.threshold
        return ValidationOutcome(
            topic=checks["topic"],
            objective=checks["objective"],
            time_scope=checks["time_scope"],
            location_scope=checks["location_scope"],
            evidence=evidence,
        )

    def clarification_question(self, outcome: ValidationOutcome) -> str:
        labels = {
            "topic": "a transportation-related topic",
            "objective": "a clear analysis objective",
            "time_scope": "a time scope (when)",
            "location_scope": "a location scope (where)",
        }
        needs = ", ".join(labels[name] for name in outcome.missing)
        return f"Your question is missing {needs}. Could you restate it with those details?"

    def clarify(self, query: UserQuery, outcome: ValidationOutcome, user_reply: str) -> UserQuery:
        if outcome.overall:
            raise NotValidated("clarify requires a failed validation outcome")
        if query.clarification_round >= self.max_rounds:
            raise RoundsExhausted(f"clarification rounds exhausted ({self.max_rounds})")
        return UserQuery(
            text=f"{query.text} {user_reply}".strip(),
            clarification_round=query.clarification_round + 1,
        )

    def format_question(self, query: UserQuery, outcome: ValidationOutcome) -> FormattedQuestion:
        if not outcome.overall:
            raise NotValidated("cannot format a query that failed validation")
        objectives, times, locations = extract_phrases(query)
        time_text = times[0] if times else "most recent day"
        start, end, clipped = resolve_window(time_text, self.now)
        return FormattedQuestion(
            objective=objectives[0] if objectives else query.text,
            time_scope=time_text,
            location_scope="; ".join(dict.fromkeys(locations)) if locations else "network-wide",
            original=query.text,
            window_start=start,
            window_end=end,
            window_clipped=clipped,
        )

    def fallback_general_response(self, query: UserQuery) -> tuple[str, bool]:
        """General completion for queries that never validated.

        Returns (text, general_flag); the flag marks the answer as
        non-transportation-specific.
        """
        if self.validate(query).overall:
            raise NotValidated("fallback is unreachable for a valid query")
        if self.backend is None:
            return (
                "This question falls outside the traffic-analysis scope, so no data-backed report was produced.",
                True,
            )
        resp = self.backend.complete(
            gw.request("iv.fallback", query.text, system="Answer the user's question directly.")
        )
        return resp.text, True

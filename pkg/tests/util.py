"""Shared helpers for the test suite."""

from __future__ import annotations

from datetime import datetime, timedelta

from idm.agents.das import AnalysisBundle, AnalysisStep, StepResult
from idm.agents.iv import FormattedQuestion
from idm.agents.sp import DEFAULT_CRITERIA
from idm.gateway import ScriptedBackend
from idm.registry import ModelResult
from idm.store import Column, Dataset

SP_SLUGS = tuple(c.slug for c in DEFAULT_CRITERIA)
SS_SLUGS = ("mv", "cr", "eq", "vc")


def scripted(routes: dict) -> ScriptedBackend:
    return ScriptedBackend({"routes": routes})


def text_route(text: str) -> dict:
    return {"repeat": True, "replies": [{"text": text}]}


def probs_for(score: float) -> dict[int, float]:
    """A {4,5} or {3,4} mass on the 1..5 scale whose expected score is `score`."""
    # score = (raw - 1) / 4 with raw = 4*p4 + 5*p5 etc.
    raw = 1 + 4 * score
    lo = int(raw)
    if lo >= 5:
        return {5: 1.0}
    frac = round(raw - lo, 6)
    if frac == 0:
        return {lo: 1.0}
    return {lo: round(1 - frac, 6), lo + 1: frac}


def sp_backend(epoch_scores: list[float], repeat: bool = False) -> ScriptedBackend:
    """Scripted backend driving the prompt optimizer through the given
    per-epoch aggregate scores (every criterion scores the same)."""
    routes = {
        "sp.cot": text_route("step-by-step reasoning"),
        "sp.critique": text_route("could be clearer"),
        "sp.rewrite": text_route("rewritten prompt body"),
    }
    entries = [{"score_probs": probs_for(s)} for s in epoch_scores]
    for slug in SP_SLUGS:
        routes[f"sp.score.{slug}"] = {"repeat": repeat, "replies": list(entries)}
    return scripted(routes)


def ss_backend(epoch_scores: list[float] | dict[str, list[float]], repeat: bool = False) -> ScriptedBackend:
    """Scripted backend driving the supervisor; per-criterion score lists
    or one shared list."""
    routes = {
        "ss.suggest": text_route("add residual diagnostics"),
    }
    for slug in SS_SLUGS:
        routes[f"ss.cot.{slug}"] = text_route(f"reasoning about {slug}")
        series = epoch_scores[slug] if isinstance(epoch_scores, dict) else epoch_scores
        routes[f"ss.score.{slug}"] = {
            "repeat": repeat,
            "replies": [{"score_probs": probs_for(s)} for s in series],
        }
    return scripted(routes)


def make_fq(**overrides) -> FormattedQuestion:
    values = dict(
        objective="Forecast real-time speed changes",
        time_scope="next weekend",
        location_scope="SR-520",
        original="Forecast real-time speed changes at SR-520 during road closure period on next weekend.",
        window_start=datetime(2023, 1, 21),
        window_end=datetime(2023, 1, 23),
    )
    values.update(overrides)
    return FormattedQuestion(**values)


def minute_series(values, start: datetime = datetime(2023, 1, 1), extra_columns=()) -> Dataset:
    """Dataset with a per-minute timestamp column and a speed column."""
    columns = [Column("timestamp", "temporal"), Column("speed", "numeric")]
    columns += [Column(name, "numeric") for name, _ in extra_columns]
    rows = []
    for i, v in enumerate(values):
        row = [(start + timedelta(minutes=i)).strftime("%Y-%m-%dT%H:%M"), float(v)]
        row += [float(vals[i]) for _, vals in extra_columns]
        rows.append(tuple(row))
    return Dataset(columns=columns, rows=rows)


def model_result(**overrides) -> ModelResult:
    values = dict(
        role="forecast",
        predictions=[1.0, 2.0],
        labels=[1.1, 1.9],
        scores=[],
        metrics={"MAE": 0.1, "RMSE": 0.1414, "R2": 0.9},
        fitted_params="test fit",
        holdout_spec="temporal tail of 2 steps",
    )
    values.update(overrides)
    return ModelResult(**values)


def tiny_bundle() -> AnalysisBundle:
    step = AnalysisStep(
        goal="Forecast the speed series",
        required_columns=("timestamp", "speed"),
        expected_output_kind="table",
    )
    sr = StepResult(step=step, model_name="LSTM", result=model_result())
    return AnalysisBundle(
        results=[sr],
        insights=["the fitted model tracks the series closely"],
        suggestions=["adjust ramp metering ahead of the peak"],
    )

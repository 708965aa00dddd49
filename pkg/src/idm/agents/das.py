"""Data analysis agent.

Plans analysis steps from the dataset description, selects a model card
per step, executes the bound executor, and turns each result into an
insight and a suggestion. Figure steps emit CSV data plus a declarative
plot-spec file; rendering is external.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .. import gateway as gw
from ..errors import IdmError
from ..registry import ModelDescriptor, ModelRegistry, ModelResult
from ..store import Dataset, DatasetDescription
from .iv import FormattedQuestion

OUTPUT_KINDS = ("figure", "table", "metric", "text")


class UnparsablePlan(IdmError):
    """The plan completion could not be parsed into steps."""


class InvalidColumns(IdmError):
    """The plan references columns absent from the dataset."""


@dataclass(frozen=True)
class AnalysisStep:
    goal: str
    required_columns: tuple[str, ...]
    expected_output_kind: str = "table"

    def __post_init__(self) -> None:
        if not self.goal.strip():
            raise ValueError("step goal must be nonempty")
        if self.expected_output_kind not in OUTPUT_KINDS:
            raise ValueError(f"unknown output kind {self.expected_output_kind!r}")


@dataclass(frozen=True)
class AnalysisPlan:
    steps: tuple[AnalysisStep, ...]

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValueError("plan must contain at least one step")


@dataclass
class StepResult:
    step: AnalysisStep
    model_name: str
    result: ModelResult | None
    failed: bool = False
    error: str | None = None
    table: list[dict] = field(default_factory=list)
    figure_data: str | None = None
    figure_spec: str | None = None

    def metric_summary(self) -> str:
        if self.result is None:
            return "no metrics (step failed)"
        return ", ".join(f"{k}={v:.4f}" for k, v in self.result.metrics.items())


@dataclass
class AnalysisBundle:
    results: list[StepResult]
    insights: list[str]
    suggestions: list[str]

    def __post_init__(self) -> None:
        if not (len(self.results) == len(self.insights) == len(self.suggestions)):
            raise ValueError("results, insights and suggestions must have equal cardinality")

    def rendered_text(self) -> str:
        """Flat text view of the bundle for evaluation prompts."""
        parts = []
        for i, (r, ins, sug) in enumerate(zip(self.results, self.insights, self.suggestions), start=1):
            parts.append(f"Step {i}: {r.step.goal}")
            parts.append(f"  Model: {r.model_name}; metrics: {r.metric_summary()}")
            if r.figure_spec:
                parts.append(f"  Figure: {r.figure_spec} (data: {r.figure_data})")
            parts.append(f"  Insight: {ins}")
            parts.append(f"  Suggestion: {sug}")
        return "\n".join(parts)


# -- plan parsing -----------------------------------------------------------

_STEP_LINE = re.compile(
    r"^\s*\d+[.)]\s*(?P<goal>[^|]+?)\s*\|\s*columns?:\s*(?P<cols>[^|]+?)"
    r"(?:\s*\|\s*output:\s*(?P<kind>\w+))?\s*$",
    re.IGNORECASE,
)


def parse_plan(text: str) -> AnalysisPlan:
    steps = []
    for line in text.splitlines():
        m = _STEP_LINE.match(line)
        if not m:
            continue
        kind = (m.group("kind") or "table").lower()
        if kind not in OUTPUT_KINDS:
            kind = "table"
        cols = tuple(c.strip() for c in m.group("cols").split(",") if c.strip())
        steps.append(AnalysisStep(goal=m.group("goal").strip(), required_columns=cols, expected_output_kind=kind))
    if not steps:
        raise UnparsablePlan("no plan steps found in the completion")
    return AnalysisPlan(steps=tuple(steps))


# -- model-selection fallback ----------------------------------------------

_ROLE_KEYWORDS = (
    ("irregularity", ("incident", "irregular", "anomal", "sudden", "drop", "accident", "detect")),
    ("routing", ("route", "routing", "path", "travel time", "commut")),
    ("importance", ("factor", "importance", "driver", "risk", "cause", "contribut")),
    ("spatial", ("spatial", "network", "neighbor", "correlat", "spread", "propagat")),
    ("pattern", ("pattern", "recurring", "profile", "cluster", "trend")),
    ("forecast", ("forecast", "predict", "estimat", "future", "project")),
)


def role_for_text(text: str) -> str:
    lowered = text.lower()
    for role, keywords in _ROLE_KEYWORDS:
        if any(k in lowered for k in keywords):
            return role
    return "forecast"


# -- the agent --------------------------------------------------------------


class DataAnalyst:
    def __init__(
        self,
        backend: gw.Backend,
        registry: ModelRegistry,
        figure_dir: str | Path | None = None,
        seed: int = 0,
        instruction_preamble: str | None = None,
    ) -> None:
        self.backend = backend
        self.registry = registry
        self.figure_dir = Path(figure_dir) if figure_dir else None
        self.seed = seed
        self.instruction_preamble = instruction_preamble

    def build_system_instruction(self, desc: DatasetDescription, fq: FormattedQuestion) -> str:
        parts = []
        if self.instruction_preamble:
            parts.append(self.instruction_preamble)
        parts.append(desc.render())
        parts.append(f"Now you should {fq.objective} for {fq.location_scope} during {fq.time_scope}.")
        parts.append("Select machine learning models from the following JSON.")
        parts.append(self.registry.descriptor_document())
        return "\n\n".join(parts)

    def plan(self, instruction: str, dataset_columns: list[str]) -> AnalysisPlan:
        """Ask for a numbered plan; one retry on unknown columns."""
        if not instruction.strip():
            raise ValueError("instruction must be nonempty")
        ask = (
            "Produce a numbered analysis plan. Each line must look like:\n"
            "1. <goal> | columns: <comma-separated column names> | output: <figure|table|metric|text>\n"
            f"Available columns: {', '.join(dataset_columns)}"
        )
        plan = parse_plan(self.backend.complete(gw.request("das.plan", instruction, ask)).text)
        bad = self._unknown_columns(plan, dataset_columns)
        if not bad:
            return plan
        retry = self.backend.complete(
            gw.request(
                "das.plan",
                instruction,
                ask,
                f"The previous plan referenced unknown columns: {', '.join(sorted(bad))}. "
                "Use only the available columns.",
            )
        )
        plan = parse_plan(retry.text)
        bad = self._unknown_columns(plan, dataset_columns)
        if bad:
            raise InvalidColumns(f"plan references unknown columns after retry: {', '.join(sorted(bad))}")
        return plan

    @staticmethod
    def _unknown_columns(plan: AnalysisPlan, dataset_columns: list[str]) -> set[str]:
        known = {c.lower() for c in dataset_columns}
        return {c for step in plan.steps for c in step.required_columns if c.lower() not in known}

    def select_model(self, step: AnalysisStep, fq: FormattedQuestion) -> ModelDescriptor:
        """Constrained choice with one re-ask, then keyword fallback."""
        names = [d.name for d in self.registry.list_descriptors()]
        ask = f"Analysis step: {step.goal}\nUser objective: {fq.objective}\nChoose one model from: {', '.join(names)}"
        for attempt in range(2):
            resp = self.backend.complete(
                gw.request("das.select", ask, system="Reply with exactly one model name from the list.")
            )
            chosen = self._match_name(resp.text, names)
            if chosen:
                return self.registry.get(chosen)
            ask = f"{ask}\nYour previous answer was not in the list. Pick one of: {', '.join(names)}"
        return self.registry.by_role(role_for_text(f"{step.goal} {fq.objective}"))

    @staticmethod
    def _match_name(reply: str, names: list[str]) -> str | None:
        lowered = reply.lower()
        for name in names:
            if re.search(rf"\b{re.escape(name.lower())}\b", lowered):
                return name
        return None

    def execute_step(self, step: AnalysisStep, descriptor: ModelDescriptor, d: Dataset, index: int) -> StepResult:
        try:
            result = self.registry.run(descriptor, step.goal, d, seed=self.seed)
        except IdmError as exc:
            return StepResult(step=step, model_name=descriptor.name, result=None, failed=True, error=str(exc))
        sr = StepResult(step=step, model_name=descriptor.name, result=result, table=result.scores[:50])
        if step.expected_output_kind == "figure" and self.figure_dir is not None:
            self.figure_dir.mkdir(parents=True, exist_ok=True)
            stem = f"step{index}_{descriptor.executor_role}"
            data_path = self.figure_dir / f"{stem}.csv"
            spec_path = self.figure_dir / f"{stem}.plotspec"
            self._write_figure(result, step, data_path, spec_path)
            # Run-dir-relative paths keep reports location-independent.
            sr.figure_data = f"{self.figure_dir.name}/{data_path.name}"
            sr.figure_spec = f"{self.figure_dir.name}/{spec_path.name}"
        return sr

    @staticmethod
    def _write_figure(result: ModelResult, step: AnalysisStep, data_path: Path, spec_path: Path) -> None:
        with open(data_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "predicted", "actual"])
            for i, (p, a) in enumerate(zip(result.predictions, result.labels)):
                writer.writerow([i, p, a])
        spec = {
            "kind": "line",
            "title": step.goal,
            "x_axis": {"label": "holdout index", "units": "steps"},
            "y_axis": {"label": "value", "units": "observation units"},
            "series": [
                {"name": "predicted", "data_file": data_path.name, "column": "predicted"},
                {"name": "actual", "data_file": data_path.name, "column": "actual"},
            ],
        }
        with open(spec_path, "w", encoding="utf-8") as fh:
            json.dump(spec, fh, indent=2)
            fh.write("\n")

    def interpret(self, r: StepResult) -> str:
        if r.failed:
            ask = (
                f"The analysis step '{r.step.goal}' could not run: {r.error}. "
                "State this as a data limitation in one or two sentences."
            )
        else:
            ask = (
                f"Interpret this analysis step for a traffic engineer.\n"
                f"Step: {r.step.goal}\nModel: {r.model_name}\nMetrics: {r.metric_summary()}\n"
                f"Ground the interpretation in those numbers."
            )
        text = self.backend.complete(gw.request("das.interpret", ask)).text
        if r.failed and "limitation" not in text.lower():
            text = f"Limitation: {text}"
        return text

    def suggest(self, fq: FormattedQuestion, insight: str) -> str:
        if not insight.strip():
            raise ValueError("insight must be nonempty")
        ask = (
            f"User objective: {fq.objective}\nInsight: {insight}\n"
            "Give one actionable traffic-management suggestion tied to the objective."
        )
        return self.backend.complete(gw.request("das.suggest", ask)).text

    def analyze(self, d: Dataset, fq: FormattedQuestion, desc: DatasetDescription) -> AnalysisBundle:
        instruction = self.build_system_instruction(desc, fq)
        plan = self.plan(instruction, d.column_names())
        results: list[StepResult] = []
        insights: list[str] = []
        suggestions: list[str] = []
        for i, step in enumerate(plan.steps, start=1):
            descriptor = self.select_model(step, fq)
            sr = self.execute_step(step, descriptor, d, i)
            insight = self.interpret(sr)
            suggestion = self.suggest(fq, insight)
            results.append(sr)
            insights.append(insight)
            suggestions.append(suggestion)
        return AnalysisBundle(results=results, insights=insights, suggestions=suggestions)

"""Self-supervision agent.

Scores the analysis bundle per criterion with probability-weighted
scoring, loops critique-and-reanalyze until the aggregate clears the
threshold or the epoch cap, and composes the final report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

from .. import gateway as gw
from ..errors import IdmError
from .das import AnalysisBundle
from .iv import FormattedQuestion
from .sp import Criterion

# The four result-quality criteria scored by the evaluation model.
DEFAULT_RESULT_CRITERIA = (
    Criterion(
        "MV",
        "Model validation: the results include ML evaluation metrics such as MAE, RMSE, "
        "R-squared, or precision/recall.",
    ),
    Criterion("CR", "Contextual relevance: the insights address the specific traffic issue being analyzed."),
    Criterion("EQ", "Explanation quality: results come with clear, understandable interpretations."),
    Criterion(
        "VC",
        "Visualization clarity: the declared figures (plot specs and data summaries) communicate "
        "the key insights accurately and simply.",
    ),
)


class ThresholdAlreadyMet(IdmError):
    """Improvement suggestions are only defined below the threshold."""


@dataclass(frozen=True)
class CriteriaSet:
    criteria: tuple[Criterion, ...] = DEFAULT_RESULT_CRITERIA

    def __post_init__(self) -> None:
        if not self.criteria:
            raise ValueError("criteria set must be nonempty")


@dataclass(frozen=True)
class EvaluationReport:
    per_criterion: dict[str, float]
    epoch: int

    @property
    def aggregate(self) -> float:
        return sum(self.per_criterion.values()) / len(self.per_criterion)


@dataclass
class FinalReport:
    sections: dict[str, str]
    supervision: list[tuple[int, float]]
    provenance: str
    below_threshold: bool = False

    SECTION_ORDER = (
        "Objective",
        "Data",
        "Methods",
        "Results",
        "Model Validation",
        "Insights",
        "Suggestions",
        "Figures and Tables",
    )

    def __post_init__(self) -> None:
        missing = [s for s in self.SECTION_ORDER if s not in self.sections]
        if missing:
            raise ValueError(f"report is missing sections: {missing}")

    def to_markdown(self) -> str:
        lines = ["# Traffic Analysis Report", ""]
        if self.below_threshold:
            lines += [
                "> **Quality caveat:** the self-evaluation score stayed below the configured "
                "threshold after the maximum number of refinement epochs. Findings are "
                "best-effort and should be reviewed.",
                "",
            ]
        for name in self.SECTION_ORDER:
            lines += [f"## {name}", "", self.sections[name].rstrip(), ""]
        lines += ["## Supervision Trace", ""]
        for epoch, score in self.supervision:
            lines.append(f"- epoch {epoch}: aggregate score {score:.4f}")
        lines += ["", f"Run: {self.provenance}", ""]
        return "\n".join(lines)


class Supervisor:
    def __init__(
        self,
        backend: gw.Backend,
        criteria: CriteriaSet = CriteriaSet(),
        threshold: float = 0.8,
        max_epochs: int = 3,
        n_samples: int = 8,
    ) -> None:
        self.backend = backend
        self.criteria = criteria
        self.threshold = threshold
        self.max_epochs = max_epochs
        self.n_samples = n_samples

    def evaluate(self, bundle: AnalysisBundle, epoch: int = 0) -> EvaluationReport:
        """Per-criterion chain-of-thought scoring over the rendered bundle."""
        rendered = bundle.rendered_text()
        per: dict[str, float] = {}
        for c in self.criteria.criteria:
            cot = self.backend.complete(
                gw.request(
                    f"ss.cot.{c.slug}",
                    rendered,
                    system=f"Reason step by step about whether these results satisfy: {c.definition}",
                )
            )
            req = gw.request(
                f"ss.score.{c.slug}",
                rendered,
                f"Reasoning:\n{cot.text}",
                system=f"Score the results on '{c.name}' with a single value in {c.scale[0]}..{c.scale[-1]}.",
                temperature=1.0,
            )
            dist = gw.score_distribution(self.backend, req, c.scale, self.n_samples)
            per[c.name] = gw.expected_score(dist)
        return EvaluationReport(per_criterion=per, epoch=epoch)

    def improvement_suggestions(self, bundle: AnalysisBundle, report: EvaluationReport) -> str:
        if report.aggregate >= self.threshold:
            raise ThresholdAlreadyMet("results already meet the threshold")
        ranked = sorted(report.per_criterion.items(), key=lambda kv: kv[1])
        worst = ", ".join(f"{name} ({score:.3f})" for name, score in ranked[:2])
        resp = self.backend.complete(
            gw.request(
                "ss.suggest",
                bundle.rendered_text(),
                f"Lowest-scoring criteria: {worst}. Give concrete improvement suggestions targeting them.",
            )
        )
        return resp.text

    def build_rci_prompt(self, bundle: AnalysisBundle, suggestions: str) -> str:
        """Two-phase critique-then-improve prompt for the re-analysis."""
        if not suggestions.strip():
            raise ValueError("improvement suggestions must be nonempty")
        return "\n\n".join(
            [
                "Critique phase. The previous analysis produced:",
                bundle.rendered_text(),
                "Review feedback:",
                suggestions,
                "Improvement phase. Redo the analysis, correcting every weakness named above "
                "while keeping what already works.",
            ]
        )

    def supervise(
        self,
        bundle: AnalysisBundle,
        reanalyze: Callable[[str], AnalysisBundle],
    ) -> tuple[AnalysisBundle, list[tuple[int, float]], bool]:
        """Evaluate/refine loop; returns (bundle, trace, passed)."""
        trace: list[tuple[int, float]] = []
        epoch = 0
        while True:
            report = self.evaluate(bundle, epoch)
            score = report.aggregate
            trace.append((epoch, score))
            epoch += 1
            if score >= self.threshold or epoch >= self.max_epochs:
                return bundle, trace, score >= self.threshold
            suggestions = self.improvement_suggestions(bundle, report)
            prompt = self.build_rci_prompt(bundle, suggestions)
            bundle = reanalyze(prompt)


def compose_report(
    bundle: AnalysisBundle,
    fq: FormattedQuestion,
    trace: list[tuple[int, float]],
    passed: bool,
    data_summary: str,
    model_bindings: dict[str, str],
    run_id: str,
) -> FinalReport:
    """Assemble the eight-section report from the final bundle."""
    methods_lines = [
        "Each selected model card is bound to a reference executor:",
    ]
    for name, binding in sorted(model_bindings.items()):
        methods_lines.append(f"- {name}: {binding}")
    methods_lines.append(
        "Visualization clarity is assessed on the textual plot specifications and data "
        "summaries, not rendered images."
    )

    results_lines = []
    validation_lines = []
    figure_lines = []
    for i, r in enumerate(bundle.results, start=1):
        if r.failed:
            results_lines.append(f"Step {i} ({r.step.goal}): did not run - {r.error}")
            continue
        results_lines.append(f"Step {i} ({r.step.goal}): {r.model_name}, {r.result.holdout_spec}")
        validation_lines.append(f"Step {i} [{r.model_name}]: {r.metric_summary()}")
        if r.table:
            results_lines.append(f"  Top rows: {json.dumps(r.table[:3], default=str)}")
        if r.figure_spec:
            figure_lines.append(f"- Figure: {r.figure_spec} (data: {r.figure_data})")
        else:
            figure_lines.append(f"- Table: step {i} metric table ({len(r.table)} rows)")

    sections = {
        "Objective": f"{fq.objective}\n\nOriginal question: {fq.original}",
        "Data": data_summary
        + f"\n\nScope: {fq.location_scope}; window {fq.window_start.isoformat()} to "
        f"{fq.window_end.isoformat()}"
        + (" (clipped to the one-week limit)" if fq.window_clipped else ""),
        "Methods": "\n".join(methods_lines),
        "Results": "\n".join(results_lines) or "No step produced results.",
        "Model Validation": "\n".join(validation_lines) or "No step produced metrics.",
        "Insights": "\n".join(f"{i}. {t}" for i, t in enumerate(bundle.insights, start=1)) or "None.",
        "Suggestions": "\n".join(f"{i}. {t}" for i, t in enumerate(bundle.suggestions, start=1)) or "None.",
        "Figures and Tables": "\n".join(figure_lines) or "None.",
    }
    return FinalReport(
        sections=sections,
        supervision=trace,
        provenance=run_id,
        below_threshold=not passed,
    )

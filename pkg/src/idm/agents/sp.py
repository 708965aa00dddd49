"""Prompt optimization agent.

Builds an evaluation prompt around a draft, scores it criterion by
criterion with probability-weighted scoring, and critique-rewrites the
draft until the mean score clears the threshold or the epoch cap hits.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

from .. import gateway as gw
from ..errors import IdmError


class EmptyCriteria(IdmError):
    """An evaluation prompt needs at least one criterion."""


@dataclass(frozen=True)
class Criterion:
    name: str
    definition: str
    scale: tuple[int, ...] = (1, 2, 3, 4, 5)

    def __post_init__(self) -> None:
        if not self.name.strip() or not self.definition.strip():
            raise ValueError("criterion name and definition must be nonempty")
        if len(self.scale) < 2 or any(b <= a for a, b in zip(self.scale, self.scale[1:])):
            raise ValueError("scale must be strictly increasing with at least two points")

    @property
    def slug(self) -> str:
        return re.sub(r"[^a-z0-9]+", "-", self.name.lower()).strip("-")


# The eight prompt-quality criteria used by default.
DEFAULT_CRITERIA = tuple(
    Criterion(name, definition)
    for name, definition in (
        ("Clarity and Precision", "The prompt is unambiguous and precisely conveys the task."),
        ("Context and Relevance", "The prompt stays focused on the traffic-analysis task and its data."),
        ("Directiveness", "The prompt tells the model exactly what to produce."),
        ("Appropriate Length", "The prompt is neither padded nor missing required detail."),
        ("Structured Format", "The prompt is organized so each part is easy to follow."),
        ("Objective and Neutral", "The prompt avoids leading or biased phrasing."),
        ("Avoiding Ambiguities", "Terms with multiple readings are pinned down."),
        ("Multiple Questions", "The prompt does not bundle unrelated asks into one request."),
    )
)

DEFAULT_INSTRUCTIONS = (
    "You will receive a preliminary prompt. Your task is to assess it for clarity and "
    "specificity so the generated response quality can be improved."
)


@dataclass(frozen=True)
class PromptDraft:
    body: str
    epoch: int = 0
    history: tuple[tuple[str, float], ...] = ()

    def __post_init__(self) -> None:
        if not self.body.strip():
            raise ValueError("draft body must be nonempty")
        if len(self.history) != self.epoch:
            raise ValueError("history length must equal epoch")


@dataclass
class EvaluationPrompt:
    draft: PromptDraft
    instructions: str
    criteria: tuple[Criterion, ...]
    cot: str | None = None
    cot_history: list[str] = field(default_factory=list)

    def render(self) -> str:
        parts = [self.draft.body, self.instructions]
        for c in self.criteria:
            lo, hi = c.scale[0], c.scale[-1]
            parts.append(f"{c.name} ({lo}-{hi}): {c.definition}")
        if self.cot:
            parts.append(self.cot)
        return "\n\n".join(parts)


@dataclass(frozen=True)
class OptimizedPrompt:
    body: str
    final_score: float
    epochs_used: int
    accepted: bool
    per_criterion: dict[str, float] = field(default_factory=dict)


class PromptOptimizer:
    """Bounded score/critique/rewrite loop over a prompt draft."""

    def __init__(
        self,
        backend: gw.Backend,
        criteria: tuple[Criterion, ...] = DEFAULT_CRITERIA,
        instructions: str = DEFAULT_INSTRUCTIONS,
        threshold: float = 0.8,
        max_epochs: int = 3,
        n_samples: int = 8,
        route_prefix: str = "sp",
    ) -> None:
        if not criteria:
            raise EmptyCriteria("at least one criterion is required")
        self.backend = backend
        self.criteria = tuple(criteria)
        self.instructions = instructions
        self.threshold = threshold
        self.max_epochs = max_epochs
        self.n_samples = n_samples
        self.route_prefix = route_prefix

    def build_eval_prompt(self, draft: PromptDraft) -> EvaluationPrompt:
        if not self.criteria:
            raise EmptyCriteria("at least one criterion is required")
        return EvaluationPrompt(draft=draft, instructions=self.instructions, criteria=self.criteria)

    def generate_cot(self, p_e: EvaluationPrompt) -> str:
        resp = self.backend.complete(
            gw.request(
                f"{self.route_prefix}.cot",
                p_e.render(),
                system=(
                    "Generate step-by-step reasoning assessing the quality of this prompt "
                    "against each stated criterion before any score is given."
                ),
            )
        )
        if p_e.cot is not None:
            p_e.cot_history.append(p_e.cot)
        p_e.cot = resp.text
        return resp.text

    def score_prompt(self, p_e: EvaluationPrompt) -> tuple[float, dict[str, float]]:
        """Mean of per-criterion probability-weighted scores, each in [0,1]."""
        if p_e.cot is None:
            raise ValueError("score_prompt requires chain-of-thought reasoning on the prompt")
        per: dict[str, float] = {}
        for c in self.criteria:
            req = gw.request(
                f"{self.route_prefix}.score.{c.slug}",
                p_e.render(),
                system=f"Rate the prompt on the criterion '{c.name}' with a single score in "
                f"{c.scale[0]}..{c.scale[-1]}.",
                temperature=1.0,
            )
            dist = gw.score_distribution(self.backend, req, c.scale, self.n_samples)
            per[c.name] = gw.expected_score(dist)
        return sum(per.values()) / len(per), per

    def critique_and_rewrite(self, draft: PromptDraft, per_criterion: dict[str, float], score: float) -> PromptDraft:
        worst = min(per_criterion, key=per_criterion.get)
        critique = self.backend.complete(
            gw.request(
                f"{self.route_prefix}.critique",
                draft.body,
                f"Lowest-scoring criterion: {worst} ({per_criterion[worst]:.3f}).",
                system="Point out the concrete weaknesses of this prompt, focusing on the lowest-scoring criteria.",
            )
        )
        rewrite = self.backend.complete(
            gw.request(
                f"{self.route_prefix}.rewrite",
                draft.body,
                f"Critique:\n{critique.text}",
                system="Rewrite the prompt to address the critique. Return only the improved prompt.",
            )
        )
        return PromptDraft(
            body=rewrite.text,
            epoch=draft.epoch + 1,
            history=draft.history + ((draft.body, score),),
        )

    def optimize(self, draft: PromptDraft) -> OptimizedPrompt:
        score = 0.0
        per: dict[str, float] = {}
        epochs = 0
        while True:
            p_e = self.build_eval_prompt(draft)
            self.generate_cot(p_e)
            score, per = self.score_prompt(p_e)
            epochs += 1
            if score >= self.threshold or epochs >= self.max_epochs:
                break
            draft = self.critique_and_rewrite(draft, per, score)
        return OptimizedPrompt(
            body=draft.body,
            final_score=score,
            epochs_used=epochs,
            accepted=score >= self.threshold,
            per_criterion=per,
        )

"""Prompt optimization: scoring, the critique/rewrite loop, and bounds."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idm.agents.sp import (
    DEFAULT_CRITERIA,
    Criterion,
    EmptyCriteria,
    PromptDraft,
    PromptOptimizer,
)
from util import probs_for, scripted, sp_backend, text_route


class TestCriterion:
    def test_slug(self):
        assert Criterion("Clarity and Precision", "d").slug == "clarity-and-precision"

    def test_eight_defaults(self):
        assert len(DEFAULT_CRITERIA) == 8

    def test_empty_fields_rejected(self):
        with pytest.raises(ValueError):
            Criterion(" ", "d")
        with pytest.raises(ValueError):
            Criterion("n", " ")

    def test_scale_must_increase(self):
        with pytest.raises(ValueError):
            Criterion("n", "d", scale=(3, 2, 1))


class TestPromptDraft:
    def test_history_length_must_equal_epoch(self):
        with pytest.raises(ValueError):
            PromptDraft(body="x", epoch=1, history=())

    def test_empty_body_rejected(self):
        with pytest.raises(ValueError):
            PromptDraft(body="  ")


class TestScoring:
    def test_score_requires_cot(self):
        optimizer = PromptOptimizer(sp_backend([0.9]))
        p_e = optimizer.build_eval_prompt(PromptDraft(body="draft"))
        with pytest.raises(ValueError):
            optimizer.score_prompt(p_e)

    def test_mean_of_per_criterion_scores(self):
        optimizer = PromptOptimizer(sp_backend([0.85], repeat=True))
        p_e = optimizer.build_eval_prompt(PromptDraft(body="draft"))
        optimizer.generate_cot(p_e)
        score, per = optimizer.score_prompt(p_e)
        assert len(per) == 8
        assert score == pytest.approx(0.85, abs=1e-9)
        assert score == pytest.approx(sum(per.values()) / len(per), abs=1e-12)

    def test_render_lists_every_criterion(self):
        optimizer = PromptOptimizer(sp_backend([0.9]))
        p_e = optimizer.build_eval_prompt(PromptDraft(body="the draft body"))
        text = p_e.render()
        assert "the draft body" in text
        for c in DEFAULT_CRITERIA:
            assert c.name in text

    def test_cot_history_archived(self):
        routes = {"sp.cot": {"repeat": True, "replies": [{"text": "first"}, {"text": "second"}]}}
        optimizer = PromptOptimizer(scripted(routes))
        p_e = optimizer.build_eval_prompt(PromptDraft(body="draft"))
        optimizer.generate_cot(p_e)
        optimizer.generate_cot(p_e)
        assert p_e.cot_history == ["first"]
        assert p_e.cot == "second"

    def test_empty_criteria_rejected(self):
        with pytest.raises(EmptyCriteria):
            PromptOptimizer(sp_backend([0.9]), criteria=())


class TestOptimizeLoop:
    def test_second_epoch_clears_threshold(self):
        optimizer = PromptOptimizer(sp_backend([0.6, 0.85]), threshold=0.8, max_epochs=3)
        result = optimizer.optimize(PromptDraft(body="draft"))
        assert result.epochs_used == 2
        assert result.accepted
        assert result.final_score == pytest.approx(0.85, abs=1e-9)
        assert result.body == "rewritten prompt body"

    def test_immediate_pass_uses_one_epoch(self):
        optimizer = PromptOptimizer(sp_backend([0.9]), threshold=0.8)
        result = optimizer.optimize(PromptDraft(body="draft"))
        assert result.epochs_used == 1
        assert result.body == "draft"

    def test_never_passing_stops_at_cap_and_rejects(self):
        optimizer = PromptOptimizer(sp_backend([0.5], repeat=True), threshold=0.8, max_epochs=3)
        result = optimizer.optimize(PromptDraft(body="draft"))
        assert result.epochs_used == 3
        assert not result.accepted
        assert result.final_score == pytest.approx(0.5, abs=1e-9)

    def test_critique_names_lowest_scoring_criterion(self):
        captured = []

        backend = sp_backend([0.9], repeat=True)
        routes = backend._routes
        # One criterion scores lower than the rest so the critique must name it.
        routes["sp.score.directiveness"].replies = [{"score_probs": probs_for(0.5)}]

        original = backend._complete

        def spy(req):
            if req.routing_key == "sp.critique":
                captured.append(req.messages[1].content)
            return original(req)

        backend._complete = spy
        optimizer = PromptOptimizer(backend, threshold=0.99, max_epochs=2)
        optimizer.optimize(PromptDraft(body="draft"))
        assert captured and "Directiveness" in captured[0]

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=1, max_value=5))
    def test_loop_bound_with_always_failing_backend(self, max_epochs):
        backend = sp_backend([0.1], repeat=True)
        optimizer = PromptOptimizer(backend, threshold=0.8, max_epochs=max_epochs)
        result = optimizer.optimize(PromptDraft(body="draft"))
        assert result.epochs_used == max_epochs
        assert not result.accepted

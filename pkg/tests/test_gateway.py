"""Chat request plumbing, the scripted backend, and score distributions."""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from idm.errors import DegenerateScale, NoParsableScore, ScriptExhausted
from idm.gateway import (
    Backend,
    ChatMessage,
    ChatRequest,
    ChatResponse,
    ScoreDistribution,
    ScriptedBackend,
    expected_score,
    request,
    score_distribution,
)


class TestChatRequest:
    def test_routing_key_from_system_message(self):
        req = request("dbi.sql", "body", system="translate to SQL")
        assert req.routing_key == "dbi.sql"
        assert req.messages[0].role == "system"
        assert req.messages[0].content.startswith("[route:dbi.sql]")

    def test_routing_key_defaults_when_untagged(self):
        req = ChatRequest(messages=(ChatMessage("user", "hello"),))
        assert req.routing_key == "default"

    def test_empty_messages_rejected(self):
        with pytest.raises(ValueError):
            ChatRequest(messages=())

    def test_assistant_first_rejected(self):
        with pytest.raises(ValueError):
            ChatRequest(messages=(ChatMessage("assistant", "hi"),))

    def test_bad_role_rejected(self):
        with pytest.raises(ValueError):
            ChatMessage("tool", "hi")

    def test_negative_temperature_rejected(self):
        with pytest.raises(ValueError):
            request("x", "body", temperature=-0.1)

    def test_token_probs_validated(self):
        with pytest.raises(ValueError):
            ChatResponse(text="x", backend_id="t", token_probs=(("5", 1.5),))


class TestScriptedBackend:
    def test_replies_in_order_then_exhausted(self):
        backend = ScriptedBackend({"routes": {"r": {"replies": [{"text": "one"}, {"text": "two"}]}}})
        req = request("r", "q")
        assert backend.complete(req).text == "one"
        assert backend.complete(req).text == "two"
        with pytest.raises(ScriptExhausted):
            backend.complete(req)

    def test_repeat_serves_last_entry_forever(self):
        backend = ScriptedBackend({"routes": {"r": {"repeat": True, "replies": [{"text": "a"}, {"text": "b"}]}}})
        req = request("r", "q")
        texts = [backend.complete(req).text for _ in range(5)]
        assert texts == ["a", "b", "b", "b", "b"]

    def test_unknown_route_raises(self):
        backend = ScriptedBackend({"routes": {}})
        with pytest.raises(ScriptExhausted):
            backend.complete(request("missing", "q"))

    def test_call_count_tracks_completions(self):
        backend = ScriptedBackend({"routes": {"r": {"repeat": True, "replies": [{"text": "a"}]}}})
        for _ in range(3):
            backend.complete(request("r", "q"))
        assert backend.call_count == 3

    def test_scripted_distribution_pushes_back_text_entries(self):
        backend = ScriptedBackend({"routes": {"r": {"replies": [{"text": "4"}]}}})
        req = request("r", "q")
        assert backend.scripted_distribution(req) is None
        # The text entry was not consumed by the distribution lookup.
        assert backend.complete(req).text == "4"


class TestScoreDistribution:
    def test_probs_renormalized_by_from_weights(self):
        d = ScoreDistribution.from_weights((1, 2), {1: 2.0, 2: 6.0})
        assert d.probs == (0.25, 0.75)

    def test_mass_off_scale_is_dropped(self):
        d = ScoreDistribution.from_weights((1, 2), {1: 1.0, 2: 1.0, 7: 100.0})
        assert d.probs == (0.5, 0.5)

    def test_no_mass_on_scale_raises(self):
        with pytest.raises(NoParsableScore):
            ScoreDistribution.from_weights((1, 2), {7: 1.0})

    def test_unsorted_scale_rejected(self):
        with pytest.raises(ValueError):
            ScoreDistribution(scale=(2, 1), probs=(0.5, 0.5))

    def test_probs_must_sum_to_one(self):
        with pytest.raises(ValueError):
            ScoreDistribution(scale=(1, 2), probs=(0.2, 0.2))


class TestExpectedScore:
    def test_reference_distribution_is_exact(self):
        d = ScoreDistribution.from_weights((1, 2, 3, 4, 5), {2: 0.1, 3: 0.2, 4: 0.4, 5: 0.3})
        assert expected_score(d) == 0.725

    def test_uniform_is_midpoint(self):
        d = ScoreDistribution(scale=(1, 2, 3, 4, 5), probs=(0.2,) * 5)
        assert expected_score(d) == pytest.approx(0.5, abs=1e-12)

    def test_all_mass_on_top_is_one(self):
        d = ScoreDistribution.from_weights((1, 2, 3, 4, 5), {5: 1.0})
        assert expected_score(d) == 1.0

    def test_all_mass_on_bottom_is_zero(self):
        d = ScoreDistribution.from_weights((1, 2, 3, 4, 5), {1: 1.0})
        assert expected_score(d) == 0.0

    def test_degenerate_scale_raises(self):
        with pytest.raises(DegenerateScale):
            expected_score(ScoreDistribution(scale=(3,), probs=(1.0,)))

    @given(
        st.lists(st.integers(min_value=-10, max_value=10), min_size=2, max_size=6, unique=True),
        st.lists(st.floats(min_value=0.01, max_value=1.0), min_size=6, max_size=6),
    )
    def test_bounds(self, scale, weights):
        scale = tuple(sorted(scale))
        w = {s: weights[i] for i, s in enumerate(scale)}
        value = expected_score(ScoreDistribution.from_weights(scale, w))
        assert 0.0 <= value <= 1.0

    @given(st.floats(min_value=0.0, max_value=1.0))
    def test_monotone_in_upward_mass_shift(self, shift):
        base = {2: 0.5, 4: 0.5}
        shifted = {2: 0.5 - 0.5 * shift, 4: 0.5 + 0.5 * shift}
        scale = (1, 2, 3, 4, 5)
        low = expected_score(ScoreDistribution.from_weights(scale, base))
        high = expected_score(ScoreDistribution.from_weights(scale, shifted))
        assert high >= low - 1e-12


class TestScoreDistributionReadout:
    def test_scripted_distribution_preferred(self):
        backend = ScriptedBackend({"routes": {"r": {"replies": [{"score_probs": {4: 0.5, 5: 0.5}}]}}})
        d = score_distribution(backend, request("r", "q"), (1, 2, 3, 4, 5))
        assert expected_score(d) == 0.875

    def test_sampling_fallback_counts_parsed_scores(self):
        backend = ScriptedBackend(
            {"routes": {"r": {"replies": [{"text": "score: 4"}, {"text": "4"}, {"text": "I say 5"}, {"text": "junk"}]}}}
        )
        d = score_distribution(backend, request("r", "q"), (1, 2, 3, 4, 5), n_samples=4)
        weights = dict(zip(d.scale, d.probs))
        assert weights[4] == pytest.approx(2 / 3)
        assert weights[5] == pytest.approx(1 / 3)

    def test_no_parsable_score_raises(self):
        backend = ScriptedBackend({"routes": {"r": {"repeat": True, "replies": [{"text": "no numbers here"}]}}})
        with pytest.raises(NoParsableScore):
            score_distribution(backend, request("r", "q"), (1, 2, 3, 4, 5), n_samples=3)

    def test_token_probs_aggregated(self):
        class TokenBackend(Backend):
            def _complete(self, req):
                return ChatResponse(
                    text="4",
                    backend_id="t",
                    token_probs=(("4", 0.6), (" 4", 0.1), ("5", 0.2), ("x", 0.1)),
                )

        backend = TokenBackend()
        d = score_distribution(backend, request("r", "q"), (1, 2, 3, 4, 5))
        weights = dict(zip(d.scale, d.probs))
        assert weights[4] == pytest.approx(0.7 / 0.9)
        assert weights[5] == pytest.approx(0.2 / 0.9)

    def test_invalid_args_rejected(self):
        backend = ScriptedBackend({"routes": {}})
        with pytest.raises(ValueError):
            score_distribution(backend, request("r", "q"), ())
        with pytest.raises(ValueError):
            score_distribution(backend, request("r", "q"), (1, 2), n_samples=0)

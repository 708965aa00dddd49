"""Configuration precedence and the end-to-end run path."""

import json
from pathlib import Path

import pytest

from idm.errors import ConfigError
from idm.harness import QuerySpec
from idm.pipeline import Pipeline, PipelineConfig

VALID_QUERY = "Forecast real-time speed changes at SR-520 during road closure period on next weekend."


class TestConfig:
    def test_defaults(self):
        c = PipelineConfig()
        assert c.tau_d == 0.75 and c.tau_e == 0.8 and c.e_threshold == 0.8
        assert c.sp_max_epochs == 3 and c.ss_max_epochs == 3
        assert c.dbi_max_attempts == 3 and c.clarify_rounds == 2

    def test_file_overrides_default(self, tmp_path):
        p = tmp_path / "conf.yaml"
        p.write_text("tau_e: 0.9\nseed: 11\n", encoding="utf-8")
        c = PipelineConfig.load(str(p))
        assert c.tau_e == 0.9 and c.seed == 11
        assert c.tau_d == 0.75

    def test_flag_overrides_file(self, tmp_path):
        p = tmp_path / "conf.yaml"
        p.write_text("tau_e: 0.9\nseed: 11\n", encoding="utf-8")
        c = PipelineConfig.load(str(p), tau_e=0.85)
        assert c.tau_e == 0.85 and c.seed == 11

    def test_none_flag_does_not_override(self, tmp_path):
        p = tmp_path / "conf.yaml"
        p.write_text("seed: 11\n", encoding="utf-8")
        assert PipelineConfig.load(str(p), seed=None).seed == 11

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "conf.yaml"
        p.write_text("tau_q: 0.5\n", encoding="utf-8")
        with pytest.raises(ConfigError) as exc:
            PipelineConfig.load(str(p))
        assert "tau_q" in str(exc.value)

    def test_threshold_bounds_validated(self):
        with pytest.raises(ConfigError):
            PipelineConfig(tau_d=1.5)
        with pytest.raises(ConfigError):
            PipelineConfig(clarify_rounds=0)

    def test_missing_store_fails_before_any_model_call(self, tmp_path):
        config = PipelineConfig(store_path=str(tmp_path / "nope.db"))
        with pytest.raises(ConfigError) as exc:
            Pipeline(config)
        assert "nope.db" in str(exc.value)


@pytest.fixture()
def pipeline(golden_config):
    return Pipeline(golden_config)


class TestRunQuery:
    def test_valid_query_produces_report(self, pipeline, golden_config):
        outcome = pipeline.run_query(VALID_QUERY)
        assert outcome.ok
        report = Path(outcome.report_path)
        assert report.exists()
        text = report.read_text(encoding="utf-8")
        for name in ("Objective", "Model Validation", "Supervision Trace"):
            assert f"## {name}" in text
        sidecar = json.loads(Path(outcome.sidecar_path).read_text(encoding="utf-8"))
        assert sidecar["run_id"] == outcome.run_id
        assert sidecar["passed"] is True

    def test_trace_records_every_gateway_call(self, pipeline):
        outcome = pipeline.run_query(VALID_QUERY, write=False)
        assert pipeline.raw_backend.call_count == outcome.record.gateway_calls
        assert outcome.record.gateway_calls > 0

    def test_trace_file_written(self, pipeline):
        outcome = pipeline.run_query(VALID_QUERY)
        trace = Path(outcome.report_path).parent / "trace.jsonl"
        lines = trace.read_text(encoding="utf-8").splitlines()
        assert len(lines) == len(outcome.record.events)
        stages = {json.loads(l)["stage"] for l in lines}
        assert {"iv", "sp", "dbi", "das", "ss"} <= stages

    def test_off_topic_query_gets_general_response(self, pipeline, golden_config):
        outcome = pipeline.run_query("What is the best pizza in Seattle?")
        assert not outcome.ok
        assert outcome.general_response
        assert outcome.report is None
        run_dir = Path(golden_config.out_dir) / f"run-{outcome.run_id}"
        assert not (run_dir / "report.md").exists()

    def test_deterministic_across_fresh_pipelines(self, golden_config):
        a = Pipeline(golden_config).run_query(VALID_QUERY, write=False)
        b = Pipeline(golden_config).run_query(VALID_QUERY, write=False)
        assert a.report.to_markdown() == b.report.to_markdown()

    def test_clarifier_loop_is_bounded(self, golden_config):
        pipeline = Pipeline(golden_config)
        asked = []

        def clarifier(question):
            asked.append(question)
            return "still not saying where or when"

        outcome = pipeline.run_query("Analyze congestion", clarifier=clarifier, write=False)
        assert not outcome.ok
        assert len(asked) == golden_config.clarify_rounds

    def test_clarifier_can_rescue_a_vague_query(self, golden_config):
        pipeline = Pipeline(golden_config)
        outcome = pipeline.run_query(
            "Detect sudden speed drops",
            clarifier=lambda q: "on SR-520 during Thursday evening",
            write=False,
        )
        assert outcome.ok


class TestScoreQuery:
    def test_six_criteria_returned(self, pipeline):
        spec = QuerySpec("MAP", "RT-TP", VALID_QUERY, ground_truth="forecast")
        scores = pipeline.score_query(spec)
        assert set(scores) == {"DI", "RC", "MV", "CR", "EQ", "VC"}
        for name in ("DI", "MV", "CR", "EQ", "VC"):
            assert 0.0 <= scores[name] <= 1.0

    def test_open_ended_leaves_rc_blank(self, pipeline):
        spec = QuerySpec(
            "OO",
            "CNA",
            "Optimize ramp metering on I-405 during evening peak hours, balancing volume and occupancy.",
            open_ended=True,
        )
        scores = pipeline.score_query(spec)
        assert scores["RC"] is None
        assert scores["DI"] is not None


class TestAblationWiring:
    def test_skip_iv_uses_raw_text(self, golden_config):
        pipeline = Pipeline(golden_config, skips=frozenset({"IV"}))
        outcome = pipeline.run_query("Forecast traffic speed tomorrow.", write=False)
        assert outcome.ok
        assert outcome.fq.time_scope == "unvalidated"

    def test_skip_ss_reports_without_trace_epochs(self, golden_config):
        pipeline = Pipeline(golden_config, skips=frozenset({"SS"}))
        outcome = pipeline.run_query(VALID_QUERY, write=False)
        assert outcome.ok
        assert outcome.report.supervision == []
        assert not outcome.report.below_threshold

    def test_invalid_skip_rejected(self, golden_config):
        with pytest.raises(Exception):
            Pipeline(golden_config, skips=frozenset({"DAS"}))

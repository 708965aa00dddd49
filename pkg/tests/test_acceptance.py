"""End-to-end acceptance gate.

Each test class pins one externally checkable property of the system:
published results-table arithmetic, exact probability-weighted scoring,
similarity math, the intent gate, loop bounds, SQL injection resistance,
reference-executor quality floors, golden-run determinism, and the
ablation table shape.
"""

import math
import random
import re
from datetime import timedelta
from importlib import resources
from pathlib import Path

import numpy as np
import pytest
import yaml

from idm import gateway as gw
from idm.agents.dbi import (
    AttemptsExhausted,
    DatabaseInteractor,
    PiiPolicy,
    SqlCandidate,
    validate_sql,
)
from idm.agents.iv import InputValidator, RoundsExhausted, UserQuery
from idm.agents.sp import PromptDraft, PromptOptimizer
from idm.agents.ss import Supervisor
from idm.harness import ResultsTable, compute_rc, load_query_battery, run_ablation
from idm.pipeline import Pipeline, PipelineConfig
from idm.registry import ModelRegistry, rmse
from idm.semantic import HashingEmbedder, ReferenceSet, cosine
from idm.store import TrafficStore, WriteAttemptError, parse_timestamp
from util import make_fq, scripted, sp_backend, ss_backend

EXEMPLAR = "Forecast real-time speed changes at SR-520 during road closure period on next weekend."

DATA_DIR = Path(__file__).parent / "data"


class TestResultsTableArithmetic:
    """Published per-criterion rows reproduce their printed Avg column."""

    ROWS = {
        "IV": ([0.5234, 0.4052, 0.8125, 0.6473, 0.8322, 0.6138], 0.6391),
        "SP": ([0.8985, 0.5326, 0.9275, 0.7740, 0.8092, 0.6240], 0.7610),
        "SS": ([0.9154, 0.4792, 0.8084, 0.7265, 0.6919, 0.5913], 0.7021),
        "None": ([0.9264, 0.5724, 0.9714, 0.7987, 0.9012, 0.7065], 0.8127),
    }

    @pytest.mark.parametrize("label", list(ROWS))
    def test_avg_recomputes_to_the_printed_value(self, label):
        values, printed_avg = self.ROWS[label]
        assert ResultsTable.recompute_avg(values) == pytest.approx(printed_avg, abs=5e-5)


class TestExpectedScoreExactness:
    """Probability-weighted scoring matches brute force and decimal cases exactly."""

    def test_decimal_mass_is_exact(self):
        dist = gw.ScoreDistribution.from_weights((1, 2, 3, 4, 5), {2: 0.1, 3: 0.2, 4: 0.4, 5: 0.3})
        assert gw.expected_score(dist) == 0.725

    def test_random_distributions_match_brute_force(self):
        rng = random.Random(42)
        scale = (1, 2, 3, 4, 5)
        for _ in range(100):
            weights = {s: rng.random() for s in scale if rng.random() < 0.8}
            if not weights or sum(weights.values()) == 0:
                weights = {3: 1.0}
            dist = gw.ScoreDistribution.from_weights(scale, weights)
            total = math.fsum(weights.values())
            raw = math.fsum(s * w / total for s, w in weights.items())
            reference = (raw - scale[0]) / (scale[-1] - scale[0])
            assert gw.expected_score(dist) == pytest.approx(reference, abs=1e-9)
            assert 0.0 <= gw.expected_score(dist) <= 1.0


class TestCosineCorrectness:
    """Similarity agrees with an independent formula on 1000 random pairs."""

    def test_against_reference_formula(self):
        rng = np.random.default_rng(99)
        for _ in range(1000):
            dim = int(rng.integers(2, 65))
            a = rng.normal(0, 1, size=dim)
            b = rng.normal(0, 1, size=dim)
            dot = math.fsum(x * y for x, y in zip(a, b))
            reference = dot / (
                math.sqrt(math.fsum(x * x for x in a)) * math.sqrt(math.fsum(y * y for y in b))
            )
            got = cosine(a, b)
            assert got == pytest.approx(reference, abs=1e-9)
            assert got == pytest.approx(cosine(b, a), abs=1e-12)
            assert cosine(3.7 * a, b) == pytest.approx(got, abs=1e-9)


@pytest.fixture(scope="module")
def validator() -> InputValidator:
    refdir = Path(str(resources.files("idm.data") / "refsets"))
    embedder = HashingEmbedder(dimension=256, seed=7)
    sets = {
        name: ReferenceSet.from_file(name, str(refdir / f"{name}.tsv"), embedder, 0.75)
        for name in ("topic", "objectives", "time_scopes", "location_scopes")
    }
    return InputValidator(
        embedder,
        sets["topic"],
        sets["objectives"],
        sets["time_scopes"],
        sets["location_scopes"],
    )


class TestIntentGateBattery:
    """The 20-query gate battery classifies with 100% accuracy."""

    def test_all_twenty_classified_correctly(self, validator):
        doc = yaml.safe_load((DATA_DIR / "iv_battery.yaml").read_text(encoding="utf-8"))
        specs = doc["queries"]
        assert len(specs) == 20
        assert sum(1 for s in specs if s["valid"]) == 10
        for spec in specs:
            outcome = validator.validate(UserQuery(spec["text"]))
            assert outcome.overall == spec["valid"], spec["text"]


class TestLoopBounds:
    """Every retry loop terminates at its configured cap under a backend
    that never produces an acceptable result."""

    def test_prompt_optimizer_stops_at_three_epochs(self):
        optimizer = PromptOptimizer(sp_backend([0.1], repeat=True), threshold=0.8, max_epochs=3)
        result = optimizer.optimize(PromptDraft(body="draft"))
        assert result.epochs_used == 3
        assert not result.accepted

    def test_supervisor_stops_at_three_epochs(self):
        from util import tiny_bundle

        supervisor = Supervisor(ss_backend([0.1], repeat=True), threshold=0.8, max_epochs=3)
        _, trace, passed = supervisor.supervise(tiny_bundle(), lambda prompt: tiny_bundle())
        assert len(trace) == 3
        assert not passed

    def test_retriever_stops_at_three_attempts(self, canonical_store):
        backend = scripted(
            {"dbi.sql": {"repeat": True, "replies": [{"text": "SELECT plate_number FROM observations;"}]}}
        )
        interactor = DatabaseInteractor(
            backend, canonical_store, examples=[], policy=PiiPolicy(denied_columns=("plate_number",))
        )
        with pytest.raises(AttemptsExhausted):
            interactor.retrieve(make_fq())
        assert backend.call_count == 3

    def test_clarification_stops_at_two_rounds(self, validator):
        query = UserQuery("Analyze congestion")
        for _ in range(2):
            outcome = validator.validate(query)
            query = validator.clarify(query, outcome, "still not saying where or when")
        assert query.clarification_round == 2
        with pytest.raises(RoundsExhausted):
            validator.clarify(query, validator.validate(query), "another vague answer")


class TestInjectionResistance:
    """Every hostile statement is rejected before execution, and the
    execution layer independently blocks anything that slips through."""

    @pytest.fixture(scope="module")
    @staticmethod
    def corpus():
        doc = yaml.safe_load((DATA_DIR / "injection_corpus.yaml").read_text(encoding="utf-8"))
        return doc["cases"]

    def test_validation_rejects_every_case(self, corpus):
        policy = PiiPolicy.from_file(str(resources.files("idm.data") / "pii_policy.yaml"))
        for case in corpus:
            result = validate_sql(SqlCandidate(sql=case["sql"]), policy)
            assert not result.ok, case["sql"]

    def test_execution_layer_blocks_writes_and_data_survives(self, corpus, canonical_store_path):
        store = TrafficStore(canonical_store_path)
        try:
            before = store.execute_sql("SELECT COUNT(*) AS n FROM observations").rows[0][0]
            blocked_before = store.blocked_statements
            for case in corpus:
                with pytest.raises(Exception):
                    store.execute_sql(case["sql"])
            assert store.blocked_statements - blocked_before >= 1
            after = store.execute_sql("SELECT COUNT(*) AS n FROM observations").rows[0][0]
            assert after == before
        finally:
            store.close()

    def test_write_attempts_raise_the_dedicated_error(self, canonical_store):
        with pytest.raises(WriteAttemptError):
            canonical_store.execute_sql("DROP TABLE observations")


class TestReferenceExecutorQuality:
    """The bundled executors clear quality floors on the seeded store."""

    def test_forecaster_beats_persistence_and_rc_floor(self, canonical_store):
        d = canonical_store.execute_sql(
            "SELECT timestamp, speed FROM observations "
            "WHERE detector_id LIKE '%-000' ORDER BY timestamp"
        )
        assert len(d.rows) == 20160  # one detector, 14 full days
        reg = ModelRegistry()
        r = reg.run(reg.get("LSTM"), "forecast speed", d, seed=7)
        rc = compute_rc(r.predictions, r.labels)
        assert rc >= 0.7
        values = [row[1] for row in d.rows]
        n = len(r.labels)
        persistence = values[-n - 1440 : -1440]  # same minute yesterday
        assert r.metrics["RMSE"] <= rmse(persistence, values[-n:]) + 1e-9

    def test_irregularity_recall_and_false_windows(self, canonical_store):
        d = canonical_store.execute_sql(
            "SELECT detector_id, timestamp, speed FROM observations "
            "WHERE timestamp >= '2023-01-12T00:00' ORDER BY detector_id, timestamp"
        )
        assert len(d.rows) == 86400  # 20 detectors x 3 days, under the row cap
        reg = ModelRegistry()
        r = reg.run(reg.get("HMM"), "detect incidents", d, seed=7)
        flagged = [
            (w["detector"], parse_timestamp(w["start"]), parse_timestamp(w["end"]))
            for w in r.scores
        ]
        events = [
            (det, start, end)
            for det, start, end, _ in canonical_store.synthetic_events()
            if start >= parse_timestamp("2023-01-12T00:00")
        ]
        assert len(events) == 3

        pad = timedelta(minutes=15)
        def overlaps(window, event):
            return window[0] == event[0] and window[1] <= event[2] + pad and window[2] >= event[1] - pad

        detected = sum(1 for e in events if any(overlaps(w, e) for w in flagged))
        false_windows = [w for w in flagged if not any(overlaps(w, e) for e in events)]
        assert detected / len(events) >= 0.9
        # Well under the one-false-window-per-detector-day budget.
        assert len(false_windows) == 0


class TestGoldenRunDeterminism:
    """Two fresh pipelines produce byte-identical artifacts for the
    exemplar query under the default seed."""

    def _run(self, store_path, out_dir):
        config = PipelineConfig(store_path=store_path, out_dir=str(out_dir))
        outcome = Pipeline(config).run_query(EXEMPLAR)
        assert outcome.ok
        return outcome

    def test_reports_and_sidecars_match_byte_for_byte(self, canonical_store_path, tmp_path):
        a = self._run(canonical_store_path, tmp_path / "runs-a")
        b = self._run(canonical_store_path, tmp_path / "runs-b")
        report_a = Path(a.report_path).read_bytes()
        report_b = Path(b.report_path).read_bytes()
        assert report_a == report_b
        assert Path(a.sidecar_path).read_bytes() == Path(b.sidecar_path).read_bytes()
        text = report_a.decode("utf-8")
        for name in (
            "Objective",
            "Data",
            "Methods",
            "Results",
            "Model Validation",
            "Insights",
            "Suggestions",
            "Figures and Tables",
        ):
            assert f"## {name}" in text
        validation = text.split("## Model Validation")[1].split("##")[0]
        for metric in ("MAE", "RMSE", "R2"):
            assert metric in validation


class TestPrivacySeparation:
    """With an identifier-hashing policy active, raw detector identifiers
    never reach the report."""

    def test_report_contains_no_raw_detector_ids(self, canonical_store_path, tmp_path):
        policy_path = tmp_path / "policy.yaml"
        policy_path.write_text(
            "denied_columns: [plate_number, vehicle_id, driver_id, owner_name]\n"
            "transformations:\n"
            "  - {column: detector_id, action: hash}\n",
            encoding="utf-8",
        )
        config = PipelineConfig(
            store_path=canonical_store_path,
            out_dir=str(tmp_path / "runs"),
            pii_policy_path=str(policy_path),
        )
        outcome = Pipeline(config).run_query(EXEMPLAR)
        assert outcome.ok
        report = Path(outcome.report_path).read_text(encoding="utf-8")
        assert not re.search(r"\b[A-Z0-9-]+-[NSEW]-\d{3}\b", report)
        assert "detector_id" not in {c.name for c in outcome.dataset.columns} or all(
            not re.match(r".*-[NSEW]-\d{3}$", str(v))
            for v in outcome.dataset.column_values("detector_id")
        )


class TestAblationTable:
    """The full ablation produces the four labeled rows and every row's
    Avg is the unweighted mean of its present criterion values."""

    def test_four_rows_with_consistent_averages(self, canonical_store_path, tmp_path):
        config = PipelineConfig(store_path=canonical_store_path, out_dir=str(tmp_path / "runs"))
        base = Pipeline(config)
        battery_path = str(resources.files("idm.data") / "battery.yaml")
        queries = load_query_battery(battery_path, base.store)
        assert len(queries) == 18

        def factory(skips):
            return Pipeline(config, store=base.store, skips=skips)

        table = run_ablation(queries, factory)
        assert [row.label for row in table.rows] == ["IV", "SP", "SS", "None"]
        for row in table.rows:
            present = [v for v in row.values.values() if v is not None]
            assert present, row.label
            assert row.avg == pytest.approx(
                ResultsTable.recompute_avg(present), abs=5e-5
            )
        # Rendering must not raise and must carry all four configurations.
        md = table.to_markdown()
        for label in ("IV", "SP", "SS", "None"):
            assert f"| {label} " in md

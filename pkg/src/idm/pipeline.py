"""Pipeline wiring and configuration.

Connects the five agents in order (validation, prompt optimization, data
retrieval, analysis, supervision), owns configuration precedence and the
run trace, and writes the report artifacts.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, fields
from datetime import datetime, timedelta
from importlib import resources
from pathlib import Path

import yaml

from . import gateway as gw
from .agents import ss as ss_mod
from .agents.das import AnalysisBundle, DataAnalyst
from .agents.dbi import DatabaseInteractor, PiiPolicy
from .agents.iv import FormattedQuestion, InputValidator, UserQuery, resolve_window
from .agents.sp import DEFAULT_CRITERIA, PromptDraft, PromptOptimizer
from .agents.ss import CriteriaSet, Supervisor, compose_report
from .errors import ConfigError, IdmError, StageError
from .harness import ConstantTruth, QuerySpec, check_skips, compute_di, compute_rc, geval_criterion
from .registry import ModelRegistry
from .semantic import HashingEmbedder, ReferenceSet
from .store import TrafficStore, describe

_DATA = resources.files("idm.data")


@dataclass(frozen=True)
class PipelineConfig:
    """All knobs in one place. Precedence: CLI flag > config file > default."""

    tau_d: float = 0.75
    tau_r: float = 0.75
    tau_e: float = 0.8
    e_threshold: float = 0.8
    sp_max_epochs: int = 3
    ss_max_epochs: int = 3
    dbi_max_attempts: int = 3
    clarify_rounds: int = 2
    n_samples: int = 8
    seed: int = 7
    embed_dim: int = 256
    backend: str = "scripted"  # scripted | http
    script_path: str | None = None
    endpoint: str = "https://api.openai.com/v1"
    model: str = "gpt-4o"
    api_key_env: str = "IDM_API_KEY"
    store_path: str = "idm.db"
    out_dir: str = "runs"
    refset_dir: str | None = None
    registry_path: str | None = None
    battery_path: str | None = None
    pii_policy_path: str | None = None
    now: str | None = None  # ISO instant anchoring relative time phrases

    def __post_init__(self) -> None:
        for name in ("tau_d", "tau_r", "tau_e", "e_threshold"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        for name in ("sp_max_epochs", "ss_max_epochs", "dbi_max_attempts", "clarify_rounds", "n_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @classmethod
    def load(cls, path: str | None = None, **overrides) -> "PipelineConfig":
        values: dict = {}
        if path:
            with open(path, "r", encoding="utf-8") as fh:
                doc = yaml.safe_load(fh) or {}
            known = {f.name for f in fields(cls)}
            unknown = set(doc) - known
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
            values.update(doc)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class RunRecord:
    run_id: str
    events: list[dict] = field(default_factory=list)
    outcome: str = "incomplete"

    def log(self, stage: str, kind: str, **detail) -> None:
        self.events.append(
            {"seq": len(self.events), "t": time.time(), "stage": stage, "kind": kind, **detail}
        )

    @property
    def gateway_calls(self) -> int:
        return sum(1 for e in self.events if e["kind"] == "gateway")

    def write(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for event in self.events:
                fh.write(json.dumps(event, default=str) + "\n")


class RecordingBackend(gw.Backend):
    """Wraps a backend and logs every call into the run record."""

    def __init__(self, inner: gw.Backend, record: RunRecord, stage_ref: list[str]) -> None:
        super().__init__()
        self.inner = inner
        self.record = record
        self._stage_ref = stage_ref
        self.backend_id = inner.backend_id

    def _complete(self, req: gw.ChatRequest) -> gw.ChatResponse:
        resp = self.inner.complete(req)
        self.record.log(self._stage_ref[0], "gateway", route=req.routing_key, chars=len(resp.text))
        return resp

    def scripted_distribution(self, req: gw.ChatRequest):
        dist = self.inner.scripted_distribution(req)
        if dist is not None:
            with self._lock:
                self._calls += 1
            self.record.log(self._stage_ref[0], "gateway", route=req.routing_key, kind2="distribution")
        return dist


@dataclass
class RunOutcome:
    run_id: str
    ok: bool
    general_response: str | None = None
    report: ss_mod.FinalReport | None = None
    report_path: str | None = None
    sidecar_path: str | None = None
    fq: FormattedQuestion | None = None
    dataset: object = None
    bundle: AnalysisBundle | None = None
    record: RunRecord | None = None


def _default_refset_dir() -> Path:
    return Path(str(_DATA / "refsets"))


def make_backend(config: PipelineConfig) -> gw.Backend:
    if config.backend == "scripted":
        script = config.script_path or str(_DATA / "golden_script.yaml")
        return gw.ScriptedBackend.from_file(script)
    if config.backend == "http":
        return gw.HttpBackend(config.endpoint, config.model, config.api_key_env)
    raise ConfigError(f"unknown backend {config.backend!r}")


class Pipeline:
    """One configured pipeline; run_query is a single sequential pass."""

    def __init__(
        self,
        config: PipelineConfig,
        store: TrafficStore | None = None,
        backend: gw.Backend | None = None,
        skips: frozenset[str] = frozenset(),
    ) -> None:
        check_skips(skips)
        self.config = config
        self.skips = skips
        if store is None:
            if config.store_path != ":memory:" and not Path(config.store_path).exists():
                raise ConfigError(f"store not found at {config.store_path!r}; run `idm synth` or `idm ingest` first")
            store = TrafficStore(config.store_path)
        self.store = store
        self.raw_backend = backend or make_backend(config)

        self.embedder = HashingEmbedder(dimension=config.embed_dim, seed=config.seed)
        refset_dir = Path(config.refset_dir) if config.refset_dir else _default_refset_dir()
        self.refsets = {
            "topic": ReferenceSet.from_file("topic", str(refset_dir / "topic.tsv"), self.embedder, config.tau_d),
            "objectives": ReferenceSet.from_file(
                "objectives", str(refset_dir / "objectives.tsv"), self.embedder, config.tau_r
            ),
            "time_scopes": ReferenceSet.from_file(
                "time_scopes", str(refset_dir / "time_scopes.tsv"), self.embedder, config.tau_r
            ),
            "location_scopes": ReferenceSet.from_file(
                "location_scopes", str(refset_dir / "location_scopes.tsv"), self.embedder, config.tau_r
            ),
        }
        self.registry = (
            ModelRegistry.from_file(config.registry_path) if config.registry_path else ModelRegistry()
        )
        self.policy = (
            PiiPolicy.from_file(config.pii_policy_path)
            if config.pii_policy_path
            else PiiPolicy.from_file(str(_DATA / "pii_policy.yaml"))
        )
        with open(str(_DATA / "sql_examples.yaml"), "r", encoding="utf-8") as fh:
            self.sql_examples = yaml.safe_load(fh)["examples"]

        if config.now:
            self.now = datetime.fromisoformat(config.now)
        else:
            self.now = self.store.last_timestamp() or datetime(2023, 1, 15)

    # -- helpers -----------------------------------------------------------

    def _fq_from_raw(self, text: str) -> FormattedQuestion:
        """Ablation path with validation skipped: raw text goes straight on."""
        start, end, clipped = resolve_window(text, self.now)
        return FormattedQuestion(
            objective=text,
            time_scope="unvalidated",
            location_scope="network-wide",
            original=text,
            window_start=start,
            window_end=end,
            window_clipped=clipped,
        )

    def _optimize(self, backend: gw.Backend, label: str, body: str) -> str | None:
        if "SP" in self.skips:
            return None
        optimizer = PromptOptimizer(
            backend,
            criteria=DEFAULT_CRITERIA,
            threshold=self.config.tau_e,
            max_epochs=self.config.sp_max_epochs,
            n_samples=self.config.n_samples,
        )
        result = optimizer.optimize(PromptDraft(body=body))
        return result.body

    # -- main entry --------------------------------------------------------

    def run_query(self, text: str, clarifier=None, write: bool = True) -> RunOutcome:
        run_id = hashlib.sha1(f"{text}|{self.config.seed}".encode("utf-8")).hexdigest()[:12]
        record = RunRecord(run_id=run_id)
        stage_ref = ["iv"]
        backend = RecordingBackend(self.raw_backend, record, stage_ref)

        run_dir = Path(self.config.out_dir) / f"run-{run_id}"
        if write:
            run_dir.mkdir(parents=True, exist_ok=True)

        try:
            outcome = self._run_stages(text, clarifier, backend, stage_ref, record, run_dir, write)
        except IdmError as exc:
            record.outcome = f"failed: {exc}"
            if write:
                record.write(run_dir / "trace.jsonl")
            if isinstance(exc, StageError):
                raise
            raise StageError(stage_ref[0], str(exc)) from exc
        if write and record.events:
            record.write(run_dir / "trace.jsonl")
        return outcome

    def _run_stages(self, text, clarifier, backend, stage_ref, record, run_dir, write) -> RunOutcome:
        config = self.config
        run_id = record.run_id

        # Stage 1: input validation and clarification.
        stage_ref[0] = "iv"
        validator = InputValidator(
            self.embedder,
            self.refsets["topic"],
            self.refsets["objectives"],
            self.refsets["time_scopes"],
            self.refsets["location_scopes"],
            backend=backend,
            max_rounds=config.clarify_rounds,
            now=self.now,
        )
        if "IV" in self.skips:
            fq = self._fq_from_raw(text)
            record.log("iv", "skipped")
        else:
            query = UserQuery(text)
            outcome = validator.validate(query)
            record.log("iv", "validated", overall=outcome.overall, missing=outcome.missing)
            while not outcome.overall and clarifier is not None and query.clarification_round < config.clarify_rounds:
                reply = clarifier(validator.clarification_question(outcome))
                if not (reply or "").strip():
                    break
                query = validator.clarify(query, outcome, reply)
                outcome = validator.validate(query)
                record.log("iv", "clarified", round=query.clarification_round, overall=outcome.overall)
            if not outcome.overall:
                response, _general = validator.fallback_general_response(query)
                record.outcome = "general-response"
                return RunOutcome(run_id=run_id, ok=False, general_response=response, record=record)
            fq = validator.format_question(query, outcome)
            record.log("iv", "formatted", objective=fq.objective, location=fq.location_scope)

        # Stage 2: prompt optimization for the two downstream prompts.
        stage_ref[0] = "sp"
        dbi_preamble = self._optimize(
            backend,
            "dbi",
            f"Retrieve the loop-detector data needed to {fq.objective} "
            f"for {fq.location_scope} during {fq.time_scope}.",
        )
        das_preamble = self._optimize(
            backend,
            "das",
            f"Analyze the retrieved traffic data to {fq.objective}, reporting validated metrics.",
        )
        record.log("sp", "skipped" if "SP" in self.skips else "optimized")

        # Stage 3: data retrieval.
        stage_ref[0] = "dbi"
        interactor = DatabaseInteractor(
            backend,
            self.store,
            self.sql_examples,
            policy=self.policy,
            max_attempts=config.dbi_max_attempts,
            prompt_preamble=dbi_preamble,
        )
        dataset, candidate, attempts = interactor.retrieve(fq)
        record.log("dbi", "retrieved", sql=candidate.sql, attempts=attempts, rows=len(dataset.rows))

        # Stage 4: analysis.
        stage_ref[0] = "das"
        description = describe(dataset)
        analyst = DataAnalyst(
            backend,
            self.registry,
            figure_dir=(run_dir / "figures") if write else None,
            seed=config.seed,
            instruction_preamble=das_preamble,
        )
        bundle = analyst.analyze(dataset, fq, description)
        record.log("das", "analyzed", steps=len(bundle.results))

        # Stage 5: supervision.
        stage_ref[0] = "ss"
        if "SS" in self.skips:
            trace: list[tuple[int, float]] = []
            passed = True
            record.log("ss", "skipped")
        else:
            supervisor = Supervisor(
                backend,
                criteria=CriteriaSet(),
                threshold=config.e_threshold,
                max_epochs=config.ss_max_epochs,
                n_samples=config.n_samples,
            )

            def reanalyze(rci_prompt: str) -> AnalysisBundle:
                analyst.instruction_preamble = rci_prompt
                return analyst.analyze(dataset, fq, description)

            bundle, trace, passed = supervisor.supervise(bundle, reanalyze)
            record.log("ss", "supervised", epochs=len(trace), passed=passed)

        bindings = {
            d.name: f"{d.executor_role} reference executor" for d in self.registry.list_descriptors()
        }
        report = compose_report(bundle, fq, trace, passed, description.render(), bindings, run_id)
        record.outcome = "report"

        report_path = sidecar_path = None
        if write:
            report_path = run_dir / "report.md"
            report_path.write_text(report.to_markdown(), encoding="utf-8")
            sidecar_path = run_dir / "report.sidecar.json"
            sidecar = {
                "run_id": run_id,
                "supervision": [{"epoch": e, "score": s} for e, s in trace],
                "passed": passed,
                "figures": sorted(
                    str(r.figure_spec) for r in bundle.results if r.figure_spec
                ),
                "figure_data": sorted(str(r.figure_data) for r in bundle.results if r.figure_data),
                "metrics": [
                    {"step": i + 1, "model": r.model_name, "metrics": r.result.metrics if r.result else None}
                    for i, r in enumerate(bundle.results)
                ],
            }
            sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return RunOutcome(
            run_id=run_id,
            ok=True,
            report=report,
            report_path=str(report_path) if report_path else None,
            sidecar_path=str(sidecar_path) if sidecar_path else None,
            fq=fq,
            dataset=dataset,
            bundle=bundle,
            record=record,
        )

    # -- battery scoring ---------------------------------------------------

    def score_query(self, spec: QuerySpec) -> dict[str, float | None]:
        """End-to-end run scored on the six criteria; blanks stay None."""
        outcome = self.run_query(spec.text, write=False)
        if not outcome.ok:
            raise StageError("iv", "query did not validate; no report to score")
        report_text = outcome.report.to_markdown()
        scores: dict[str, float | None] = {}
        scores["DI"] = compute_di(outcome.dataset, outcome.fq, self.store)
        scores["RC"] = None if spec.open_ended else self._rc_for(spec, outcome)
        backend = RecordingBackend(self.raw_backend, outcome.record, ["eval"])
        from .harness import REPORT_CRITERIA

        for name in ("MV", "CR", "EQ", "VC"):
            scores[name] = geval_criterion(backend, report_text, REPORT_CRITERIA[name], self.config.n_samples)
        return scores

    def _rc_for(self, spec: QuerySpec, outcome: RunOutcome) -> float | None:
        try:
            if spec.ground_truth == "forecast":
                for r in outcome.bundle.results:
                    if r.result is not None and r.result.role == "forecast" and r.result.labels:
                        return compute_rc(r.result.predictions, r.result.labels)
                return None
            if spec.ground_truth == "events":
                return self._rc_events(outcome)
        except ConstantTruth:
            return None
        return None

    def _rc_events(self, outcome: RunOutcome) -> float | None:
        """Minute-level binary comparison of flagged windows vs injected events."""
        from .store import parse_timestamp

        flagged: dict[str, list[tuple[datetime, datetime]]] = {}
        ran = False
        for r in outcome.bundle.results:
            if r.result is not None and r.result.role == "irregularity":
                ran = True
                for w in r.result.scores:
                    flagged.setdefault(w["detector"], []).append(
                        (parse_timestamp(w["start"]), parse_timestamp(w["end"]))
                    )
        if not ran:
            return None
        events: dict[str, list[tuple[datetime, datetime]]] = {}
        for det, start, end, _ in self.store.synthetic_events():
            events.setdefault(det, []).append((start, end))

        pred, truth = [], []
        pad = timedelta(minutes=60)
        for det in sorted(set(flagged) | set(events)):
            spans = flagged.get(det, []) + events.get(det, [])
            lo = min(s for s, _ in spans) - pad
            hi = max(e for _, e in spans) + pad
            t = lo
            while t <= hi:
                truth.append(1.0 if any(s <= t < e for s, e in events.get(det, [])) else 0.0)
                pred.append(1.0 if any(s <= t <= e for s, e in flagged.get(det, [])) else 0.0)
                t += timedelta(minutes=1)
        if not truth:
            return None
        return compute_rc(pred, truth)

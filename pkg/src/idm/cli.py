"""Command-line surface: thin wrappers over the pipeline modules."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .errors import IdmError
from .harness import load_query_battery, run_ablation, run_battery
from .pipeline import Pipeline, PipelineConfig, _DATA
from .store import SynthConfig, SynthEvent, TrafficStore


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


@click.group()
def main() -> None:
    """Traffic analytics pipeline over loop-detector data."""


@main.command()
@click.argument("csv_path", type=click.Path(exists=True))
@click.option("--store", "store_path", default="idm.db", show_default=True, help="SQLite store path.")
def ingest(csv_path: str, store_path: str) -> None:
    """Ingest a detector-observation CSV into the store."""
    try:
        store = TrafficStore(store_path)
        count = store.ingest_csv(csv_path)
    except IdmError as exc:
        _fail(str(exc))
    click.echo(f"ingested {count} rows into {store_path}")


@main.command()
@click.option("--store", "store_path", default="idm.db", show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--days", default=14, show_default=True)
@click.option("--detectors", default=20, show_default=True)
@click.option("--events", "n_events", default=3, show_default=True, help="Injected congestion events.")
def synth(store_path: str, seed: int, days: int, detectors: int, n_events: int) -> None:
    """Generate seeded synthetic data and persist it."""
    try:
        config = SynthConfig(
            n_detectors=detectors,
            days=days,
            seed=seed,
            events=default_events(seed, days, detectors, n_events),
        )
        store = TrafficStore(store_path)
        count = store.ingest_synthetic(config)
    except (IdmError, ValueError) as exc:
        _fail(str(exc))
    click.echo(f"stored {count} synthetic rows ({detectors} detectors x {days} days) into {store_path}")


def default_events(seed: int, days: int, detectors: int, n_events: int) -> tuple[SynthEvent, ...]:
    """Deterministic midday congestion events on the most recent days."""
    events = []
    for i in range(n_events):
        day = max(0, days - 1 - (i % max(1, days)))
        events.append(
            SynthEvent(
                detector_index=(seed + i * 7) % detectors,
                start_minute=day * 1440 + 11 * 60,
                duration_minutes=45,
                speed_drop=0.5,
            )
        )
    return tuple(events)


@main.command()
@click.argument("text")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--interactive", is_flag=True, help="Ask clarification questions on the terminal.")
@click.option("--trace", "trace_path", type=click.Path(), default=None, help="Also copy trace.jsonl here.")
@click.option("--store", "store_path", default=None, help="Override the store path.")
@click.option("--out", "out_dir", default=None, help="Override the run output directory.")
def query(text, config_path, interactive, trace_path, store_path, out_dir) -> None:
    """Run one query through the full pipeline and write the report."""
    try:
        config = PipelineConfig.load(config_path, store_path=store_path, out_dir=out_dir)
        pipeline = Pipeline(config)
        clarifier = None
        if interactive:
            clarifier = lambda q: click.prompt(q, default="", show_default=False)
        outcome = pipeline.run_query(text, clarifier=clarifier)
    except IdmError as exc:
        _fail(str(exc))
    if not outcome.ok:
        click.echo(outcome.general_response)
        sys.exit(0)
    if trace_path and outcome.report_path:
        src = Path(outcome.report_path).parent / "trace.jsonl"
        Path(trace_path).write_text(src.read_text(encoding="utf-8"), encoding="utf-8")
    click.echo(f"report written to {outcome.report_path}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--battery", "battery_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", type=click.Path(), default=None, help="Also write the table as CSV.")
def battery(config_path, battery_path, out_path) -> None:
    """Run the query battery and print the per-subcategory results table."""
    try:
        config = PipelineConfig.load(config_path, battery_path=battery_path)
        pipeline = Pipeline(config)
        path = config.battery_path or str(_DATA / "battery.yaml")
        queries = load_query_battery(path, pipeline.store)
        table = run_battery(queries, pipeline)
    except IdmError as exc:
        _fail(str(exc))
    click.echo(table.to_markdown())
    if out_path:
        Path(out_path).write_text(table.to_csv(), encoding="utf-8")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--battery", "battery_path", type=click.Path(exists=True), default=None)
@click.option(
    "--skip",
    "skip_labels",
    multiple=True,
    type=click.Choice(["IV", "SP", "SS", "None"]),
    help="Restrict to these configurations (default: all four).",
)
@click.option("--out", "out_path", type=click.Path(), default=None)
def ablation(config_path, battery_path, skip_labels, out_path) -> None:
    """Ablation table over the {IV, SP, SS, None} skip configurations."""
    try:
        config = PipelineConfig.load(config_path, battery_path=battery_path)
        base = Pipeline(config)
        path = config.battery_path or str(_DATA / "battery.yaml")
        queries = load_query_battery(path, base.store)

        def factory(skips):
            return Pipeline(config, store=base.store, skips=skips)

        table = run_ablation(queries, factory)
        if skip_labels:
            table.rows = [r for r in table.rows if r.label in skip_labels]
    except IdmError as exc:
        _fail(str(exc))
    click.echo(table.to_markdown())
    if out_path:
        Path(out_path).write_text(table.to_csv(), encoding="utf-8")


@main.group()
def trace() -> None:
    """Inspect run traces."""


@trace.command("show")
@click.argument("path", type=click.Path(exists=True))
def trace_show(path: str) -> None:
    """Pretty-print a trace.jsonl file."""
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            e = json.loads(line)
            extra = {k: v for k, v in e.items() if k not in ("seq", "t", "stage", "kind")}
            detail = " ".join(f"{k}={v}" for k, v in extra.items())
            click.echo(f"{e['seq']:>4}  {e['stage']:<4} {e['kind']:<12} {detail}")


if __name__ == "__main__":
    main()

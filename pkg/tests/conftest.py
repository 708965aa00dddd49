"""Session fixtures: the canonical seeded store and pipeline configs."""

from __future__ import annotations

import pytest

from idm.cli import default_events
from idm.pipeline import PipelineConfig
from idm.store import SynthConfig, TrafficStore


@pytest.fixture(scope="session")
def canonical_store_path(tmp_path_factory) -> str:
    """Seeded 20-detector x 14-day store with three injected events."""
    path = tmp_path_factory.mktemp("store") / "canonical.db"
    store = TrafficStore(str(path))
    store.ingest_synthetic(
        SynthConfig(n_detectors=20, days=14, seed=7, events=default_events(7, 14, 20, 3))
    )
    store.close()
    return str(path)


@pytest.fixture()
def canonical_store(canonical_store_path):
    store = TrafficStore(canonical_store_path)
    yield store
    store.close()


@pytest.fixture()
def golden_config(canonical_store_path, tmp_path) -> PipelineConfig:
    return PipelineConfig(store_path=canonical_store_path, out_dir=str(tmp_path / "runs"))

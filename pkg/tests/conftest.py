from __future__ import annotations

import pytest

from trialmatch.pipeline import load_config, run_pipeline

import fixtures


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Replay workspace with two patients; shared, do not mutate."""
    return fixtures.build_workspace(tmp_path_factory.mktemp("ws"))


@pytest.fixture(scope="session")
def completed_run(tmp_path_factory):
    """A full pipeline run over its own workspace; shared, do not mutate."""
    ws = fixtures.build_workspace(tmp_path_factory.mktemp("run"))
    config = load_config(ws.config_path)
    manifest, exit_code = run_pipeline(config)
    return ws, config, manifest, exit_code

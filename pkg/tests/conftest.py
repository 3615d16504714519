"""Shared fixtures: one fully trained desk-scale run for the acceptance suite."""

import time

import pytest

from visdecode.pipeline import ExperimentConfig, Run


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Full default-configuration pipeline run (all stages), with wall time.

    Built lazily, so unit-test-only sessions never pay for it; the
    end-to-end acceptance tests share this single trained run.
    """
    run = Run(tmp_path_factory.mktemp("desk") / "run", ExperimentConfig())
    t0 = time.monotonic()
    statuses = run.run_all()
    elapsed = time.monotonic() - t0
    assert all(s == "done" for s in statuses.values())
    return run, elapsed

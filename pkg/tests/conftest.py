"""Shared fixtures: one small end-to-end pipeline run reused across tests."""

import pytest

from parseconf.config import (
    CorpusSection,
    DecodeSection,
    EvalSection,
    InterpretSection,
    ModelSection,
    PerturbSection,
    RunConfig,
    TrainSection,
)
from parseconf.pipeline import Workspace, run_all

SMALL_CONFIG = RunConfig(
    corpus=CorpusSection(train_size=200, dev_size=50, test_size=50),
    model=ModelSection(hidden=16),
    train=TrainSection(epochs=2),
    perturb=PerturbSection(passes=4),
    decode=DecodeSection(beam=3, entropy_samples=4),
    eval=EvalSection(bootstrap_iters=50, proxy_passes=4),
    interpret=InterpretSection(examples=3),
)


@pytest.fixture(scope="session")
def small_cfg() -> RunConfig:
    return SMALL_CONFIG


@pytest.fixture(scope="session")
def small_ws(tmp_path_factory, small_cfg) -> Workspace:
    """A completed small pipeline run; tests must not mutate it in place."""
    ws = Workspace(tmp_path_factory.mktemp("pipeline_ws"))
    run_all(small_cfg, ws)
    return ws

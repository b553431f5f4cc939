import os
from pathlib import Path

import numpy as np
import pytest
import torch

from bodyforge.config import micro_config
from bodyforge.rundir import RunDir

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def micro_cfg():
    return micro_config()


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory, micro_cfg):
    """The micro pipeline trained once per session; most integration and
    acceptance tests read from it.

    Set BODYFORGE_TEST_RUNDIR to reuse a previously trained run directory
    (config hashes must match) when iterating on individual tests."""
    reuse = os.environ.get("BODYFORGE_TEST_RUNDIR")
    if reuse:
        run = RunDir(Path(reuse), micro_cfg)
        if run.cfg.config_hash != micro_cfg.config_hash:
            raise RuntimeError("BODYFORGE_TEST_RUNDIR config does not match micro_config")
        if not run.path("refine", "refiner.w").exists():
            run.run_all()
        return run
    root = tmp_path_factory.mktemp("pipeline")
    run = RunDir(root / "run", micro_cfg)
    run.run_all()
    return run


@pytest.fixture(scope="session")
def corpus_set(pipeline):
    return pipeline.corpus_set()


@pytest.fixture(scope="session")
def pgt_set(pipeline):
    return pipeline.pgt_set()


@pytest.fixture(scope="session")
def reconstructor(pipeline):
    return pipeline.load_reconstructor()


@pytest.fixture(scope="session")
def generator2d(pipeline):
    return pipeline.load_generator2d()


@pytest.fixture(scope="session")
def gen_state(pipeline):
    return pipeline.load_state(require_refiner=True)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)

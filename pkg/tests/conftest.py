import os
from pathlib import Path

import numpy as np
import pytest

from sleepgate.config import ModelConfig


def runs_root() -> Path:
    env = os.environ.get("SLEEPGATE_RUNS")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[1] / "runs"


def require_runs(*relpaths: str) -> Path:
    """Skip unless the trained-run artifacts exist.

    Produce them with `scripts/reproduce.sh` (about half an hour), or point
    SLEEPGATE_RUNS at a directory that already has them.
    """
    root = runs_root()
    missing = [p for p in relpaths if not (root / p).exists()]
    if missing:
        pytest.skip(f"needs trained runs under {root} (missing {missing}); "
                    "run scripts/reproduce.sh first")
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def cfg():
    return ModelConfig()


@pytest.fixture(scope="session")
def system_params(cfg):
    from sleepgate.system import init_system_params
    return init_system_params(cfg, 0)

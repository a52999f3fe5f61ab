import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from railfuse.tools.config import SCENARIO_DIR, ScenarioConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def scenario_dir():
    return SCENARIO_DIR


@pytest.fixture
def short_scenario(tmp_path):
    sc = ScenarioConfig.from_yaml(SCENARIO_DIR / "short.yaml")
    return sc.override("run", output_dir=str(tmp_path / "out"))


def random_rotation(rng):
    from railfuse.tools.geom import so3_exp
    return so3_exp(rng.normal(size=3) * 0.7)


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run full-scenario tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-scenario run, skipped unless --run-slow is given")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)

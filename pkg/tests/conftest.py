"""Shared fixtures.

Trained toy models come from :mod:`srqh.toyrun`, which caches them under
``$SRQH_CACHE`` (default ``~/.cache/srqh``).  A cold cache trains them once,
which takes roughly half an hour on one CPU.
"""

import logging

import numpy as np
import pytest

from srqh import basecodec as bc
from srqh import enhancement, synthetic, toyrun


@pytest.fixture(scope="session")
def toy_settings():
    return toyrun.ToySettings()


@pytest.fixture(scope="session")
def seq_models(toy_settings):
    logging.getLogger("srqh").setLevel(logging.WARNING)
    return toyrun.base_models(toy_settings, "sequential")


@pytest.fixture(scope="session")
def ind_models(toy_settings):
    return toyrun.base_models(toy_settings, "independent")


@pytest.fixture(scope="session")
def rq_models(toy_settings, seq_models):
    return toyrun.rqulpe_models(toy_settings, seq_models)


@pytest.fixture(scope="session")
def fresh_models():
    return bc.init_models(seed=11)


@pytest.fixture(scope="session")
def fresh_rq():
    return enhancement.init_rqulpe(seed=11)


@pytest.fixture(scope="session")
def small_cloud():
    return synthetic.make_shape("torus", 32, np.random.default_rng(4))


def pytest_terminal_summary(terminalreporter):
    """Print one line per acceptance criterion, in criterion order."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

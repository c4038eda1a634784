from __future__ import annotations

import pytest

from tsas.backends import DEFAULT_TEMPLATE
from tsas.core import TrainConfig
from tsas.data import SynthSpec, synth
from tsas.toymodel import pretrain

CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def small_corpus():
    return synth(SynthSpec(num_train=60, num_test=24, seed=5))


@pytest.fixture
def small_backend(small_corpus):
    train, test = small_corpus
    return pretrain(train, test, DEFAULT_TEMPLATE, train_cfg=TrainConfig(epochs=2, seed=5))


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)

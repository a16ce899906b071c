import numpy as np
import pytest

from pnr.config import TrainConfig
from pnr.model import heldout_examples, heldout_l1, new_train_state, train
from pnr.synth import gen_toy_dataset

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TrainedRun:
    def __init__(self, cfg):
        self.cfg = cfg
        self.data = gen_toy_dataset(cfg.identities, cfg.samples_per_id, cfg.seed)
        self.examples = heldout_examples(self.data, cfg)
        self.initial_state = new_train_state(cfg)
        self.initial_l1 = heldout_l1(self.initial_state.params, cfg, self.examples)
        self.state = train(cfg, self.data)
        self.final_l1 = heldout_l1(self.state.params, cfg, self.examples)


_RUNS = {}


@pytest.fixture(scope="session")
def trained():
    """Memoized training runs keyed by TrainConfig, shared across test modules."""

    def get(**kw):
        cfg = TrainConfig(**kw)
        if cfg not in _RUNS:
            _RUNS[cfg] = TrainedRun(cfg)
        return _RUNS[cfg]

    return get

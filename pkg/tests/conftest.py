import time

import numpy as np
import pytest
import torch

from irispad.backbone import BackboneConfig
from irispad.data import synth_dataset
from irispad.heads import PADNet
from irispad.training import TrainConfig, train

# filled by test_acceptance.py, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    def make(variant="apbs", resolution=32, seed=0, arch="densenet121"):
        torch.manual_seed(seed)
        return PADNet(variant, BackboneConfig(input_resolution=resolution, arch=arch)).eval()

    return make


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """8 + 8 images at 32x32."""
    return synth_dataset(3, 8, tmp_path_factory.mktemp("tiny"), size=32)


@pytest.fixture(scope="session")
def synth64(tmp_path_factory):
    """The 64-sample synthetic training set (seed 7) at 64x64."""
    return synth_dataset(7, 32, tmp_path_factory.mktemp("synth64"), size=64)


TRAINABILITY_BATCH = 16


class TimedCheckpoints(dict):
    elapsed: dict[str, float]


@pytest.fixture(scope="session")
def overfit_checkpoints(synth64):
    """One 20-epoch checkpoint per variant on ``synth64`` (shared by several modules)."""
    out = TimedCheckpoints()
    out.elapsed = {}
    for v in ("baseline", "pbs", "apbs"):
        t0 = time.perf_counter()
        out[v] = train(TrainConfig(variant=v, seed=7, input_resolution=64, batch_size=TRAINABILITY_BATCH), synth64)
        out.elapsed[v] = time.perf_counter() - t0
    return out

import numpy as np
import pytest
import torch

from melgap.dsp import SAMPLE_RATE, AudioClip
from melgap.losses import toy_extractor


def tone(freq, seconds=1.0, amp=0.5, sr=SAMPLE_RATE):
    t = np.arange(int(round(seconds * sr))) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def extractor():
    return toy_extractor(seed=0)


@pytest.fixture(scope="session")
def extractor64():
    return toy_extractor(seed=0, dtype=torch.float64)


# lines recorded by test_acceptance, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

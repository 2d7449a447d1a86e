import numpy as np
import pytest
import torch

from diffpad.data import SynthConfig, generate_synthetic

torch.set_num_threads(1)


class ConstantNet(torch.nn.Module):
    """Test double predicting the same noise value everywhere."""

    def __init__(self, value=0.0):
        super().__init__()
        self.value = value
        self.calls = 0

    def forward(self, x, t):
        self.calls += 1
        return torch.full_like(x, self.value)


@pytest.fixture(autouse=True)
def seeded_global_rng():
    """Tests that draw from the global torch RNG see the same values in any order."""
    torch.manual_seed(0)


@pytest.fixture
def zero_net():
    return ConstantNet(0.0)


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """Small 16x32 synthetic set: 100 bona fide, 10 attacks per PAI."""
    cfg = SynthConfig(n_bonafide=100, n_attack_per_pai=10, image_height=16, image_width=32,
                      images_per_subject=10, seed=3)
    out = tmp_path_factory.mktemp("tiny_synth")
    return cfg, generate_synthetic(cfg, out)


def rng(seed=0):
    return np.random.default_rng(seed)


# acceptance criteria report: one line per criterion, printed after the run
ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def acceptance_log():
    def record(criterion, ok, detail):
        ACCEPTANCE_LINES[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 9):
        terminalreporter.write_line(ACCEPTANCE_LINES.get(n, f"criterion {n}: FAIL  did not complete"))

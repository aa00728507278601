import hypothesis
import numpy as np
import pytest
import torch

from tvae.model import TVAEConfig
from tvae.phantom import PhantomConfig, generate_dataset

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    """Reduced model: 8x8 frames, z_dim 2, g_dim 8."""
    return TVAEConfig(z_dim=2, g_dim=8, rnn_hidden=8, base_channels=4, input_shape=(1, 8, 8))


@pytest.fixture
def small_cfg():
    return TVAEConfig(z_dim=4, g_dim=16, rnn_hidden=16, base_channels=4, input_shape=(1, 64, 64))


@pytest.fixture(scope="session")
def small_phantom():
    return PhantomConfig(n_slices=4, lesion_probability=0.5, rng_seed=7)


@pytest.fixture(scope="session")
def small_dataset(small_phantom):
    return generate_dataset(small_phantom, n_subjects=10, split_fraction=0.8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


class AcceptanceLog:
    def record(self, criterion: int, passed: bool, detail: str) -> None:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[criterion] = line
        print(line)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])

import numpy as np
import pytest
import torch

from flatmae.flatgeo import build_grid
from flatmae.synth import SynthSpec, make_mesh

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def synth_spec():
    return SynthSpec(n_vertices=400, n_frames=64, cut_frac=0.05, seed=3)


@pytest.fixture(scope="session")
def synth_mesh(synth_spec):
    return make_mesh(synth_spec)


@pytest.fixture(scope="session")
def synth_grid(synth_mesh):
    return build_grid(synth_mesh, 32, 48, 1.2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

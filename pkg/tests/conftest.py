import numpy as np
import pytest

from hsiwin import datacube
from hsiwin.datacube import SynthSpec
from hsiwin.tensor import Tensor


def leaf(arr):
    """float64 leaf tensor that takes part in backprop."""
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))


@pytest.fixture(scope="session")
def toy_raw():
    return datacube.synth_dataset(SynthSpec(), seed=7)


@pytest.fixture(scope="session")
def toy_scene(toy_raw):
    cube, labels = toy_raw
    return datacube.normalize(cube), labels


@pytest.fixture(scope="session")
def toy_files(tmp_path_factory, toy_raw):
    """The toy scene on disk plus an experiment config pointing at it."""
    root = tmp_path_factory.mktemp("toy")
    cube, labels = toy_raw
    datacube.save_cube(cube, root / "data" / "toy")
    datacube.save_labels(labels, root / "data" / "toy")
    return root


# acceptance criteria register a one-line verdict here; printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])

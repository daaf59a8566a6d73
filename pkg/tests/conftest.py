import numpy as np
import pytest

from stylebend.synth import DatasetManifest, build_benchmark
from stylebend.tensor import precision


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_manifest():
    return DatasetManifest(seed=3, image_size=32, n_train=48, episodes_per_style=6)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory, tiny_manifest):
    root = tmp_path_factory.mktemp("bench")
    build_benchmark(tiny_manifest, root)
    return root


_ACCEPTANCE = []


@pytest.fixture
def record():
    """Collect one summary line per acceptance criterion."""
    def add(criterion: str, ok: bool, detail: str):
        _ACCEPTANCE.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
        print(_ACCEPTANCE[-1])
        return ok
    return add


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)

import numpy as np
import pytest

from hsefss.episodes import DatasetSpec, DEFAULT_CLASSES, generate_dataset, load_dataset

CRITERIA: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 9-class, 32x32 dataset small enough for unit tests."""
    root = tmp_path_factory.mktemp("small_ds")
    spec = DatasetSpec(classes=list(DEFAULT_CLASSES), extent=32, train_per_class=8, test_per_class=6)
    generate_dataset(spec, 3, root)
    return load_dataset(root)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

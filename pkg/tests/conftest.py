import numpy as np
import pytest

from rewindlab import data as D
from rewindlab.train import TrainConfig, TrainData


@pytest.fixture(scope="session")
def tiny_data() -> TrainData:
    train, val = D.synthetic_cifar(256, 64, seed=3)
    return TrainData.prepare(train, val)


@pytest.fixture
def small_cfg() -> TrainConfig:
    return TrainConfig(batch_size=32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome line for an acceptance criterion, then assert it."""
    def report(cid: str, ok: bool, detail: str) -> None:
        CRITERIA[cid] = (bool(ok), detail)
        print(f"{cid} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"{cid}: {detail}"
    return report


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(CRITERIA, key=lambda c: int(c[1:])):
        ok, detail = CRITERIA[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}: {detail}")

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def nprng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_fed():
    """A 500-transaction federated setup: normalized features, labels, receivers and bank tables."""
    from fedanomaly.data import DatasetConfig, generate_synthetic
    from fedanomaly.pipeline import PipelineConfig, prepare

    txs, accounts = generate_synthetic(DatasetConfig(n_transactions=500, n_accounts=120,
                                                     anomaly_rate=0.05, seed=3))
    return prepare(txs, accounts, PipelineConfig(test_fraction=0.2, seed=3))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[-1])):
            terminalreporter.write_line(line)

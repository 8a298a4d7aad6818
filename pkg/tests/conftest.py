import numpy as np
import pytest

from odefma.estimators import PartitionedDesign

VERDICTS: list[str] = []


def record_verdict(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}"
    if detail:
        line += f" :: {detail}"
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


def random_design(rng, k=None, m=None, n=None, h=None, corr=0.4) -> PartitionedDesign:
    k = int(rng.integers(1, 3)) if k is None else k
    m = int(rng.integers(1, 4)) if m is None else m
    n = int(rng.integers(k + m + 8, 61)) if n is None else n
    h = float(rng.choice([1.0, 2.0, 4.0])) if h is None else h
    X = rng.normal(size=(n, k))
    Z = rng.normal(size=(n, m))
    if k:
        Z = Z + corr * X[:, [0]]
    dy = h / 6 * (X @ rng.normal(size=k) + Z @ rng.normal(scale=0.5, size=m)) + rng.normal(size=n)
    return PartitionedDesign(dy, X, Z, h)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

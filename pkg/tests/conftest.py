import numpy as np
import pytest
import torch

from ungraph.graph import FeaturedGraph


def path(n: int) -> FeaturedGraph:
    return FeaturedGraph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def cycle(n: int) -> FeaturedGraph:
    return FeaturedGraph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def complete(n: int) -> FeaturedGraph:
    return FeaturedGraph.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} ({title}): {'PASS' if passed else 'FAIL'}; {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])

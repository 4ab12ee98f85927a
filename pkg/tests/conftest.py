"""Shared builders for the test suite."""
import pytest

from hbmflow.network import parse_network
from hbmflow.randnet import random_chain, random_shared_setup  # noqa: F401

ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, title: str, ok: bool, detail: str = ""):
    """Remember one acceptance verdict; the lines are echoed in the terminal summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion:>2}: {title}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(set(ACCEPTANCE_LINES), key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


TOY_NET = """network toy
layer 0 kind=standard-conv kh=3 kw=3 ci=3 co=8 stride=1 in=4x4 out=4x4
layer 1 kind=pointwise-conv kh=1 kw=1 ci=8 co=16 stride=2 in=4x4 out=2x2
"""


@pytest.fixture
def toy_net():
    return parse_network(TOY_NET)

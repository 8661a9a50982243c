import numpy as np
import pytest
from _oracles import design_layout

from rebar import MatchAssignment


def match_from_sizes(sizes, z=None):
    """Match over units laid out set by set; treated first within each set
    unless ``z`` is given."""
    labels, _ = design_layout(sizes)
    if z is None:
        z = np.concatenate([[1] * a + [0] * b for a, b in sizes])
    return MatchAssignment.from_labels(labels, z), np.asarray(z)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance(request, capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.__dict__.setdefault("acceptance_lines", [])

    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

import numpy as np
import pytest

from unlearn_bench.model import Dataset, ModelSpec, init_params

# One line per acceptance criterion, printed at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: _order(s)):
            terminalreporter.write_line(line)


def _order(line: str):
    num = line.split("criterion ", 1)[1].split(":", 1)[0].split()[0]
    digits = "".join(ch for ch in num if ch.isdigit())
    return (int(digits) if digits else 99, line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_problem(rng, widths=(4, 5, 3), n=6, activation="relu", scale=1.0):
    spec = ModelSpec(tuple(widths), activation)
    params = init_params(spec, int(rng.integers(1 << 30))) * scale
    params += 0.1 * rng.standard_normal(spec.dim)
    X = rng.standard_normal((n, widths[0]))
    y = rng.integers(0, widths[-1], size=n)
    return spec, params, Dataset(X, y)

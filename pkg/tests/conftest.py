import numpy as np
import pytest

from gridsec.grid_model import build_matrices, bundled_case


@pytest.fixture(scope="session")
def toy():
    return bundled_case("toy3")


@pytest.fixture(scope="session")
def toy_bundle(toy):
    return build_matrices(toy)


@pytest.fixture(scope="session")
def case14():
    return bundled_case("ieee14")


@pytest.fixture(scope="session")
def bundle14(case14):
    return build_matrices(case14)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])

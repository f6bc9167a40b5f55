import pytest

from gast_uda import data


@pytest.fixture(scope="session")
def tiny_bench(tmp_path_factory):
    """3 classes x 20 clouds of 48 points per domain: enough for the harness to run in seconds."""
    root = tmp_path_factory.mktemp("bench")
    data.generate_benchmark(root, classes=3, per_class=20, points=48, seed=5)
    return root


# one pass/fail line per acceptance criterion, printed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])

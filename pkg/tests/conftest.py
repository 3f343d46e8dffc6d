import pytest

import synth


@pytest.fixture
def corpus50(tmp_path):
    (tmp_path / "data50").mkdir()
    return synth.write_fixture(tmp_path / "data50", n=50, partitions=synth.standard_partitions)


@pytest.fixture
def corpus10(tmp_path):
    (tmp_path / "data10").mkdir()
    return synth.write_fixture(tmp_path / "data10", n=10, seed=4)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

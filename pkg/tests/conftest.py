import pytest

from flowguard.models import train
from flowguard.pipeline import mitigation_config, segment_dataset
from flowguard.traffic import build_corpus


@pytest.fixture(scope="session")
def segment_model():
    """Decision tree trained on windowed corpus segments, the view the pipeline classifies."""
    return train("dtree", segment_dataset(build_corpus(1000, 1000, seed=11)))


@pytest.fixture(scope="session")
def scenario_packets():
    return mitigation_config().source.load()


_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line per criterion; printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> None:
        _CRITERIA[number] = (ok, detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

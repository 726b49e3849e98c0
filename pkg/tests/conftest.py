import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _clean_label_audit():
    from reidadapt import synthgen
    synthgen.LABEL_AUDIT.clear()
    yield


# acceptance summary --------------------------------------------------------
_ACCEPTANCE: dict = {}


@pytest.fixture
def acceptance(capsys):
    """``acceptance(n, passed, detail)`` records and prints one criterion line."""
    def record(n: int, passed: bool, detail: str) -> None:
        line = f"CRITERION {n}: {'PASS' if passed else 'FAIL'} - {detail}"
        _ACCEPTANCE[n] = line
        with capsys.disabled():
            print("\n" + line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])

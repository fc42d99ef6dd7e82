import pytest

from plapsing.params import ExponentConfig, tune_constants

REFERENCE = dict(n=2, p=4.0, lam=0.5, lam_prime=0.8, k=2.0, k_prime=1.0)


@pytest.fixture(scope="session")
def cfg():
    return ExponentConfig(**REFERENCE)


@pytest.fixture(scope="session")
def prm(cfg):
    return tune_constants(cfg)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in list(sys.modules.items())
                if name.endswith("test_acceptance") and hasattr(m, "RESULTS")), None)
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.line(k))

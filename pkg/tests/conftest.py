import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rangesim.sequences import SharedKey

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def key():
    return SharedKey(bytes(range(32)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_key(rng) -> SharedKey:
    return SharedKey(rng.bytes(32))


# criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_criterion(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[name] = (passed, detail)
    print(f"{name} {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if passed else 'FAIL'}: {detail}")

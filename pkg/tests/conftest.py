import warnings

import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance: desk-scale acceptance criteria (slow)")


@pytest.fixture(autouse=True)
def _quiet_skipped_patient_warning():
    with warnings.catch_warnings():
        warnings.filterwarnings(
            "ignore", message=r"\d+ patient\(s\) without a one-step target.*")
        yield

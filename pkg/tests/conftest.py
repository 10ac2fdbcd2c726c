import os
import sys

import pytest

from ssm_peft.num import RngStream

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")


@pytest.fixture
def rng():
    return RngStream(1234)


def pytest_report_header(config):
    from ssm_peft import BACKEND

    return f"ssm_peft kernel backend: {BACKEND} (python {sys.version.split()[0]})"

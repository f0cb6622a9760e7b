import re

import numpy as np
import pytest

from lsla.model import ModelConfig

_CRITERIA: dict[int, tuple[str, str, str]] = {}
_NAME = re.compile(r"test_criterion_(\d+)_(\w+)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    """Desk-scale backbone: dims 16..128, depths [1,1,2,1], 56px, 4 classes."""
    return ModelConfig(
        image_size=56,
        stem_mid_channels=8,
        stages=((1, 16, 1), (1, 32, 2), (2, 64, 4), (1, 128, 8)),
        num_classes=4,
    )


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("measured", "")
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _CRITERIA[int(m.group(1))] = (m.group(2).replace("_", " "), status, str(detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, status, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {status}  {name}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)

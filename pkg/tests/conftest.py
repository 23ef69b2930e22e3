from pathlib import Path

import numpy as np
import pytest

from yolo_offload.model import build_model, parse_cfg, synthetic_weights

FIXTURES = Path(__file__).parent / "fixtures"
TINY_VOC_CFG = FIXTURES / "yolov2-tiny-voc.cfg"
VOC_NAMES = FIXTURES / "voc.names"


@pytest.fixture(scope="session")
def tiny_voc_specs():
    return parse_cfg(TINY_VOC_CFG.read_text())


@pytest.fixture(scope="session")
def tiny_voc_weights(tiny_voc_specs):
    return synthetic_weights(tiny_voc_specs, seed=7)


@pytest.fixture(scope="session")
def tiny_voc_model(tiny_voc_specs, tiny_voc_weights):
    names = VOC_NAMES.read_text().split()
    return build_model(tiny_voc_specs, tiny_voc_weights, names)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])

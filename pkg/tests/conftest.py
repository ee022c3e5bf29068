from __future__ import annotations

import numpy as np
import pytest

from miattn.descriptors import DESCRIPTOR_NAMES, fit_scaler
from miattn.model import ModelConfig, MultiInputModel
from miattn.nn import kernels


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    with kernels.use_backend(request.param):
        yield request.param


@pytest.fixture
def small_model():
    """A full-size model with a scaler fitted on random descriptor rows."""
    rng = np.random.default_rng(3)
    scaler = fit_scaler(rng.standard_normal((20, len(DESCRIPTOR_NAMES))))
    return MultiInputModel(ModelConfig(dropout=0.5, seed=11), scaler)


def random_inputs(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    R = (rng.random((n, 150, 42)) < 0.05).astype(np.float32)
    D = rng.standard_normal((n, 24))
    return R, D


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion, printed after the run

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool | None, detail: str) -> None:
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        _CRITERIA[number] = f"criterion {number}: {status} - {detail}"
        print(_CRITERIA[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from modality_hmm import _kernels

BACKENDS = ["numpy"] + (["numba"] if _kernels.HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run a test once per kernel implementation."""
    fb, es, vit = _kernels.get_backend(request.param)
    monkeypatch.setattr(_kernels, "forward_backward", fb)
    monkeypatch.setattr(_kernels, "estep", es)
    monkeypatch.setattr(_kernels, "_viterbi", vit)
    return request.param


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

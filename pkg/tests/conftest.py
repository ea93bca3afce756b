import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from poolleak.engine import Conv2d, Dense, Flatten, MaxPool, ModelSpec, ReLU, Softmax
from poolleak.tensor import Tensor

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def tiny_model(seed=0, variant="naive", classes=3):
    """Conv(2) -> ReLU -> MaxPool -> Flatten -> Dense -> Softmax on 1x6x6."""
    rng = np.random.default_rng(seed)
    conv = Conv2d(Tensor.from_array(rng.standard_normal((2, 1, 3, 3)).astype(np.float32)),
                  Tensor.from_array(rng.standard_normal(2).astype(np.float32) * 0.1), 1, 1)
    dense = Dense(Tensor.from_array(rng.standard_normal((classes, 2 * 3 * 3)).astype(np.float32) * 0.3),
                  Tensor.from_array(np.zeros(classes, dtype=np.float32)))
    layers = (conv, ReLU(), MaxPool((2, 2), 2, 0, variant), Flatten(), dense, Softmax())
    return ModelSpec(layers, (1, 6, 6), classes)


@pytest.fixture
def tiny():
    return tiny_model()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])

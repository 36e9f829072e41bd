import logging

import numpy as np
import pytest
from hypothesis import settings

from oneshot_fl.data import Dataset
from oneshot_fl.models import QuadraticModel
from oneshot_fl.protocol import Federation

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR, logger="oneshot_fl")


def zero_shard(d: int, rows: int = 4) -> Dataset:
    return Dataset(np.zeros((rows, d)), np.zeros(rows), "quadratic")


def quad_fed(centers, curvatures=None, w0=None, rows: int = 4) -> Federation:
    """Quadratic clients with zero offsets, so any batch is a full-batch gradient."""
    centers = [np.asarray(c, dtype=float) for c in centers]
    d = centers[0].shape[0]
    if curvatures is None:
        curvatures = [np.ones(d)] * len(centers)
    models = [QuadraticModel(c, a) for c, a in zip(centers, curvatures)]
    w0 = np.zeros(d) if w0 is None else np.asarray(w0, dtype=float)
    return Federation(models, [zero_shard(d, rows) for _ in centers], w0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import numpy as np
import pytest

from mintnet import mint
from mintnet.masks import Orientation


def fd_jacobian(fn, x, eps=1e-6):
    """Dense central-difference Jacobian of ``fn`` at ``x`` (flattened, channel-major raster)."""
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    cols = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = eps
        hi = fn((x.reshape(-1) + e).reshape(x.shape)).reshape(-1)
        lo = fn((x.reshape(-1) - e).reshape(x.shape)).reshape(-1)
        cols.append((hi - lo) / (2 * eps))
    return np.stack(cols, axis=1)


def random_layer(rng, C=2, K=2, R=3, orientation="lower", scale=1.0, activation="elu"):
    return mint.init(C, K, R, Orientation(orientation), rng, "random", activation, scale)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number:>2} {status}  {self.title}"
        if self.detail:
            line += f"  ({self.detail})"
        if exc_type is not None and exc_type is not AssertionError:
            line += f"  [{exc_type.__name__}: {exc}]"
        ACCEPTANCE_LINES.append((self.number, line))
        print(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

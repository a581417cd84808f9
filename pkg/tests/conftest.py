import sys

import numpy as np
import pytest

from capspoe.capsule_core import squash
from capspoe.numerics import Rng


def digits_28(n, start=0):
    """scikit-learn's 8x8 digits upsampled onto a 28x28 canvas."""
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    digits = load_digits().images[start : start + n] / 16.0
    out = np.zeros((len(digits), 28, 28))
    for k, d in enumerate(digits):
        out[k, 2:26, 2:26] = np.clip(zoom(d, 3, order=1), 0.0, 1.0)
    return out


@pytest.fixture
def rng():
    return Rng(12345)


def random_instance(rng, n_in, n_out, d_in, d_out, w_std=1.0):
    x = squash(rng.normal((n_in, d_in)))
    w = rng.normal((n_in, n_out, d_out, d_in), 0.0, w_std)
    return x, w


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.TITLES):
        status = module.RESULTS.get(n, "NOT RUN")
        terminalreporter.write_line(f"criterion {n:2d}  {status:7s}  {module.TITLES[n]}")

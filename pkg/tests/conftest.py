import math

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("suite", deadline=None, max_examples=60)
settings.load_profile("suite")


def golden_prox(loss, a, b, tol=1e-13):
    """Independent prox oracle: golden-section search on V(u) + (u-a)^2/(2b)
    over the bracket [a - 1, a + b |V'(a)| + 1]."""

    def f(u):
        return float(loss.value(u)) + (u - a) ** 2 / (2.0 * b)

    lo = a - 1.0
    hi = a + b * abs(float(loss.deriv(a))) + 1.0
    gr = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - gr * (hi - lo)
    d = lo + gr * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - gr * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + gr * (hi - lo)
            fd = f(d)
    return 0.5 * (lo + hi)


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)

"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np


def central_difference(f, x, index, h=1e-5):
    """d f / d x[index] by central differences; ``x`` is restored afterwards."""
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)


def relative_error(analytic, numeric):
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)

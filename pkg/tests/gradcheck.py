"""Central finite-difference helpers shared by the gradient tests."""

import numpy as np

H = 1e-5


def numeric_grad(f, param):
    """d f / d param by central differences, perturbing ``param`` in place."""
    g = np.zeros_like(param)
    for idx in np.ndindex(*param.shape):
        old = param[idx]
        param[idx] = old + H
        up = f()
        param[idx] = old - H
        down = f()
        param[idx] = old
        g[idx] = (up - down) / (2 * H)
    return g


def assert_close(analytic, numeric, rtol=1e-4):
    err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    # entries where both are ~0 are dominated by the 1e-8 floor; compare absolutely there
    mask = (np.abs(numeric) > 1e-6) | (np.abs(analytic) > 1e-6)
    assert np.all(err[mask] < rtol), f"max rel err {err[mask].max() if mask.any() else 0:.2e}"
    assert np.all(np.abs(analytic - numeric)[~mask] < 1e-8)

import numpy as np
import pytest

from rcmcl.linalg import finite_diff_grad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def fd_check(scalar_fn, arr, analytic, h=1e-5, tol=1e-4):
    """Compare an analytic gradient for `arr` against central differences.

    scalar_fn takes a flat vector (same size as arr) and returns a float;
    analytic is the gradient produced by the backward pass under test.
    """
    num = finite_diff_grad(scalar_fn, np.asarray(arr, dtype=np.float64).ravel().copy(), h)
    err = rel_err(num, np.asarray(analytic).ravel())
    assert err < tol, f"gradient mismatch: rel err {err:.3g} >= {tol}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

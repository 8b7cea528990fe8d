import os
import subprocess
import sys

import numpy as np
import pytest

from drift_tune import _backend, _fallback
from drift_tune.linalg import svd

compiled = pytest.mark.skipif(not _backend.compiled_available(), reason="compiled kernels not built")


@compiled
@pytest.mark.parametrize("d", [2, 5, 16, 33])
def test_jacobi_agrees(d, rng):
    from drift_tune import _kernels

    a = rng.standard_normal((3 * d, d))
    h = a.T @ a
    outs = []
    for impl in (_kernels, _fallback):
        W, V = np.array(h.T, order="C"), np.eye(d)
        impl.jacobi_rotate(W, V, 1e-15, 80, 0.0)
        outs.append(np.sort(np.linalg.norm(W, axis=1)))
    np.testing.assert_allclose(outs[0], outs[1], rtol=1e-12)


@compiled
@pytest.mark.parametrize("same", [False, True])
def test_rbf_sum_agrees(same, rng):
    from drift_tune import _kernels

    x = rng.standard_normal((40, 6))
    y = x if same else rng.standard_normal((30, 6))
    a = _kernels.rbf_kernel_sum(x, y, 0.3, same)
    b = _fallback.rbf_kernel_sum(x, y, 0.3, same)
    assert a == pytest.approx(b, rel=1e-12)


def test_selected_backend_name():
    assert _backend.NAME in ("compiled", "python")
    if _backend.compiled_available() and os.environ.get("DRIFT_TUNE_PURE_PYTHON", "") in ("", "0"):
        assert _backend.NAME == "compiled"


def test_pure_python_env_forces_fallback():
    code = "import drift_tune; print(drift_tune.BACKEND)"
    env = dict(os.environ, DRIFT_TUNE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_svd_same_under_fallback(rng):
    a = rng.standard_normal((12, 5))
    code = ("import numpy as np, sys; from drift_tune.linalg import svd;"
            "a = np.frombuffer(sys.stdin.buffer.read()).reshape(12, 5);"
            "sys.stdout.buffer.write(svd(a)[1].tobytes())")
    env = dict(os.environ, DRIFT_TUNE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, input=a.tobytes(), capture_output=True, check=True)
    np.testing.assert_allclose(np.frombuffer(out.stdout), svd(a)[1], rtol=1e-12)

import os
import subprocess
import sys

import numpy as np
import pytest

from ssm_peft import kernels
from ssm_peft.num import RngStream

IMPLS = kernels.implementations()


def _args(seed):
    r = RngStream(seed)
    B, D, H, N = 2, 3, 4, 17
    abar = r.uniform((D, H), 0.1, 0.99)
    bc = r.normal((D, H))
    kern = r.normal((D, N))
    x = r.normal((B, D, N))
    a4 = r.uniform((B, N, D, H), 0.1, 0.99)
    u4 = r.normal((B, N, D, H))
    h0 = r.normal((B, D, H))
    hs = kernels.diag_scan(a4, u4, h0, impl=IMPLS["python"])
    return {
        "ssm_kernel": (abar, bc, N),
        "ssm_kernel_backward": (abar, bc, N, kern),
        "causal_conv": (kern, x),
        "causal_conv_backward": (kern, x, r.normal((B, D, N))),
        "diag_scan": (a4, u4, h0),
        "diag_scan_backward": (a4, hs, h0, r.normal((B, N, D, H))),
    }


def test_fallback_always_available():
    assert "python" in IMPLS
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.skipif("cython" not in IMPLS, reason="compiled extension not built")
@pytest.mark.parametrize("name", list(_args(0)))
def test_backends_agree(name):
    for seed in range(3):
        args = _args(seed)[name]
        f = getattr(kernels, name)
        py = f(*args, impl=IMPLS["python"])
        cy = f(*args, impl=IMPLS["cython"])
        py = py if isinstance(py, tuple) else (py,)
        cy = cy if isinstance(cy, tuple) else (cy,)
        for p, c in zip(py, cy):
            assert p.shape == c.shape
            assert np.allclose(p, c, rtol=1e-12, atol=1e-12)


def test_scan_matches_recurrence():
    a, u, h0 = _args(5)["diag_scan"]
    hs = kernels.diag_scan(a, u, h0)
    h = h0.copy()
    for t in range(a.shape[1]):
        h = a[:, t] * h + u[:, t]
        assert np.allclose(hs[:, t], h, atol=1e-13)


def test_pure_env_var_selects_fallback():
    env = dict(os.environ, SSM_PEFT_PURE="1")
    out = subprocess.run(
        [sys.executable, "-c", "import ssm_peft; print(ssm_peft.BACKEND)"],
        env=env,
        capture_output=True,
        text=True,
        check=True,
    )
    assert out.stdout.strip() == "python"

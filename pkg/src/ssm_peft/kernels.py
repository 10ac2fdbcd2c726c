"""Backend selection for the hot SSM kernels.

The compiled extension is preferred; set ``SSM_PEFT_PURE=1`` to force the
numpy fallback. ``BACKEND`` names the active one.
"""

import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("SSM_PEFT_PURE", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def ssm_kernel(abar, bc, n, impl=None):
    return (impl or _impl).ssm_kernel(_c(abar), _c(bc), int(n))


def ssm_kernel_backward(abar, bc, n, grad, impl=None):
    return (impl or _impl).ssm_kernel_backward(_c(abar), _c(bc), int(n), _c(grad))


def causal_conv(kernel, x, impl=None):
    return (impl or _impl).causal_conv(_c(kernel), _c(x))


def causal_conv_backward(kernel, x, grad, impl=None):
    return (impl or _impl).causal_conv_backward(_c(kernel), _c(x), _c(grad))


def diag_scan(a, u, h0, impl=None):
    return (impl or _impl).diag_scan(_c(a), _c(u), _c(h0))


def diag_scan_backward(a, hs, h0, grad, impl=None):
    return (impl or _impl).diag_scan_backward(_c(a), _c(hs), _c(h0), _c(grad))


def implementations():
    """Available kernel modules keyed by name (fallback always present)."""
    impls = {"python": _kernels_py}
    try:
        from . import _ckernels

        impls["cython"] = _ckernels
    except ImportError:
        pass
    return impls

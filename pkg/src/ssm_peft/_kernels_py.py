"""Pure-numpy versions of the hot SSM kernels.

Same signatures and semantics as the compiled ``_ckernels`` module; used when
the extension is not built or ``SSM_PEFT_PURE=1`` is set.
"""

import numpy as np


def _powers(abar, n):
    # powers[..., k] = abar ** k, with 0 ** 0 == 1
    return abar[..., None] ** np.arange(n, dtype=np.float64)


def ssm_kernel(abar, bc, n):
    """K[d, k] = sum_h bc[d, h] * abar[d, h] ** k for k in [0, n)."""
    return np.einsum("dh,dhk->dk", bc, _powers(abar, n))


def ssm_kernel_backward(abar, bc, n, grad):
    pw = _powers(abar, n)
    g_bc = np.einsum("dk,dhk->dh", grad, pw)
    dpw = np.zeros_like(pw)
    dpw[..., 1:] = np.arange(1, n, dtype=np.float64) * pw[..., :-1]
    g_abar = bc * np.einsum("dk,dhk->dh", grad, dpw)
    return g_abar, g_bc


def causal_conv(kernel, x):
    """y[b, d, t] = sum_{j <= t} kernel[d, j] * x[b, d, t - j]."""
    nb, nd, n = x.shape
    y = np.empty_like(x)
    for b in range(nb):
        for d in range(nd):
            y[b, d] = np.convolve(x[b, d], kernel[d])[:n]
    return y


def causal_conv_backward(kernel, x, grad):
    nb, nd, n = x.shape
    g_x = np.empty_like(x)
    g_k = np.zeros_like(kernel)
    for b in range(nb):
        for d in range(nd):
            rev = grad[b, d, ::-1]
            g_x[b, d] = np.convolve(rev, kernel[d])[:n][::-1]
            g_k[d] += np.convolve(rev, x[b, d])[:n][::-1]
    return g_k, g_x


def diag_scan(a, u, h0):
    """h[:, t] = a[:, t] * h[:, t - 1] + u[:, t], starting from h0.

    a, u: (B, N, D, H); h0: (B, D, H). Returns all states (B, N, D, H).
    """
    hs = np.empty_like(u)
    h = h0
    for t in range(u.shape[1]):
        h = a[:, t] * h + u[:, t]
        hs[:, t] = h
    return hs


def diag_scan_backward(a, hs, h0, grad):
    n = hs.shape[1]
    g_a = np.empty_like(a)
    g_u = np.empty_like(a)
    carry = np.zeros_like(h0)
    for t in range(n - 1, -1, -1):
        carry = carry + grad[:, t]
        g_u[:, t] = carry
        prev = hs[:, t - 1] if t > 0 else h0
        g_a[:, t] = carry * prev
        carry = carry * a[:, t]
    return g_a, g_u, carry

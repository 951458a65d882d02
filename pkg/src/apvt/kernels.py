"""Hot numeric kernels: numba-jitted inner loops with a pure-numpy fallback.

The two kernel families that dominate runtime outside of BLAS matmuls are the
3x3 depthwise convolution (forward and both gradients) and the elementwise
exact-erf GELU. Each exists in two implementations:

  * "numba"  - @njit loops, compiled lazily per dtype, cached on disk
  * "numpy"  - vectorised numpy / scipy, used when numba is unavailable

Selection happens once at import time from the APVT_BACKEND environment
variable: "numba", "numpy", or unset/"auto" (numba when it imports cleanly).
Both backends are deterministic and agree to float rounding; the benchmark
script under benchmarks/ times one against the other.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf as _scipy_erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _select_backend() -> str:
    choice = os.environ.get("APVT_BACKEND", "auto").strip().lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(f"APVT_BACKEND must be 'numba', 'numpy' or 'auto', got {choice!r}")
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"
    return "numba"


BACKEND = _select_backend()


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def _gelu_forward_numpy(x):
    return 0.5 * x * (1.0 + _scipy_erf(x * _INV_SQRT2))


def _gelu_backward_numpy(x, grad):
    d = 0.5 * (1.0 + _scipy_erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return grad * d


def _pad_hw(x):
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    out[:, :, 1:-1, 1:-1] = x
    return out


def _dwconv2d_forward_numpy(x, kernel):
    # x: [B, C, H, W], kernel: [C, 3, 3]; stride 1, zero padding 1
    b, c, h, w = x.shape
    xp = _pad_hw(x)
    out = np.zeros_like(x)
    for u in range(3):
        for v in range(3):
            out += kernel[:, u, v][None, :, None, None] * xp[:, :, u:u + h, v:v + w]
    return out


def _dwconv2d_input_grad_numpy(grad, kernel):
    b, c, h, w = grad.shape
    gp = _pad_hw(grad)
    kf = kernel[:, ::-1, ::-1]
    dx = np.zeros_like(grad)
    for u in range(3):
        for v in range(3):
            dx += kf[:, u, v][None, :, None, None] * gp[:, :, u:u + h, v:v + w]
    return dx


def _dwconv2d_kernel_grad_numpy(grad, x):
    b, c, h, w = x.shape
    xp = _pad_hw(x)
    dk = np.zeros((c, 3, 3), dtype=x.dtype)
    for u in range(3):
        for v in range(3):
            dk[:, u, v] = (grad * xp[:, :, u:u + h, v:v + w]).sum(axis=(0, 2, 3))
    return dk


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if BACKEND == "numba":
    from numba import njit

    @njit(cache=True)
    def _gelu_forward_numba(x):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            v = flat_x[i]
            flat_o[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
        return out

    @njit(cache=True)
    def _gelu_backward_numba(x, grad):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_g = grad.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            v = flat_x[i]
            d = 0.5 * (1.0 + math.erf(v * _INV_SQRT2)) + v * math.exp(-0.5 * v * v) * _INV_SQRT2PI
            flat_o[i] = flat_g[i] * d
        return out

    @njit(cache=True)
    def _dwconv2d_forward_numba(x, kernel):
        b, c, h, w = x.shape
        out = np.zeros_like(x)
        for n in range(b):
            for ch in range(c):
                for i in range(h):
                    for j in range(w):
                        acc = 0.0
                        for u in range(3):
                            ii = i + u - 1
                            if ii < 0 or ii >= h:
                                continue
                            for v in range(3):
                                jj = j + v - 1
                                if jj < 0 or jj >= w:
                                    continue
                                acc += kernel[ch, u, v] * x[n, ch, ii, jj]
                        out[n, ch, i, j] = acc
        return out

    @njit(cache=True)
    def _dwconv2d_input_grad_numba(grad, kernel):
        b, c, h, w = grad.shape
        dx = np.zeros_like(grad)
        for n in range(b):
            for ch in range(c):
                for i in range(h):
                    for j in range(w):
                        acc = 0.0
                        for u in range(3):
                            ii = i - u + 1
                            if ii < 0 or ii >= h:
                                continue
                            for v in range(3):
                                jj = j - v + 1
                                if jj < 0 or jj >= w:
                                    continue
                                acc += kernel[ch, u, v] * grad[n, ch, ii, jj]
                        dx[n, ch, i, j] = acc
        return dx

    @njit(cache=True)
    def _dwconv2d_kernel_grad_numba(grad, x):
        b, c, h, w = x.shape
        dk = np.zeros((c, 3, 3), dtype=x.dtype)
        for n in range(b):
            for ch in range(c):
                for i in range(h):
                    for j in range(w):
                        g = grad[n, ch, i, j]
                        for u in range(3):
                            ii = i + u - 1
                            if ii < 0 or ii >= h:
                                continue
                            for v in range(3):
                                jj = j + v - 1
                                if jj < 0 or jj >= w:
                                    continue
                                dk[ch, u, v] += g * x[n, ch, ii, jj]
        return dk


_IMPLS = {
    "numpy": {
        "gelu_forward": _gelu_forward_numpy,
        "gelu_backward": _gelu_backward_numpy,
        "dwconv2d_forward": _dwconv2d_forward_numpy,
        "dwconv2d_input_grad": _dwconv2d_input_grad_numpy,
        "dwconv2d_kernel_grad": _dwconv2d_kernel_grad_numpy,
    }
}
if BACKEND == "numba":
    _IMPLS["numba"] = {
        "gelu_forward": _gelu_forward_numba,
        "gelu_backward": _gelu_backward_numba,
        "dwconv2d_forward": _dwconv2d_forward_numba,
        "dwconv2d_input_grad": _dwconv2d_input_grad_numba,
        "dwconv2d_kernel_grad": _dwconv2d_kernel_grad_numba,
    }


def implementations(backend: str) -> dict:
    """Kernel table for an explicit backend (used by the kernel benchmark)."""
    if backend not in _IMPLS:
        raise KeyError(f"backend {backend!r} not available (have {sorted(_IMPLS)})")
    return _IMPLS[backend]


_active = _IMPLS[BACKEND]

gelu_forward = _active["gelu_forward"]
gelu_backward = _active["gelu_backward"]
dwconv2d_forward = _active["dwconv2d_forward"]
dwconv2d_input_grad = _active["dwconv2d_input_grad"]
dwconv2d_kernel_grad = _active["dwconv2d_kernel_grad"]

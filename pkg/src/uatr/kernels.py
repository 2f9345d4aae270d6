"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

The two inner loops that dominate runtime outside of BLAS calls live here:
the polyphase resampler dot products and the fused elementwise optimizer
update.  Both carry a numba ``@njit`` build and a pure-numpy fallback that
accumulates in the same order, so the two backends produce bit-identical
results (no reassociation, no fastmath).

Backend selection happens once at import: set ``UATR_NUMBA=0`` to force the
numpy fallback.  ``backend()`` reports which one is active.
``benchmarks/bench_kernels.py`` times the two implementations side by side.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("UATR_NUMBA", "1").strip().lower()
_WANT_NUMBA = _FLAG not in ("0", "false", "off", "no")

if _WANT_NUMBA:
    try:
        from numba import njit
    except ImportError:
        _WANT_NUMBA = False


def _resample_loop(xpad, taps, up, down, two_h, out):
    # out[j] = sum_i taps[phase_j, i] * xpad[k0_j + 2H - i]
    # with k0_j = (j*down)//up, phase_j = (j*down) % up.
    n_taps = taps.shape[1]
    for j in range(out.shape[0]):
        a = j * down
        k0 = a // up
        p = a - k0 * up
        base = k0 + two_h
        acc = 0.0
        for i in range(n_taps):
            acc += taps[p, i] * xpad[base - i]
        out[j] = acc
    return out


def _resample_numpy(xpad, taps, up, down, two_h, out):
    a = np.arange(out.shape[0], dtype=np.int64) * down
    k0 = a // up
    p = a - k0 * up
    base = k0 + two_h
    out[:] = 0.0
    # accumulate tap by tap in the same order as the scalar loop
    for i in range(taps.shape[1]):
        out += taps[p, i] * xpad[base - i]
    return out


def _adamw_loop(param, grad, m, v, b1, b2, one_minus_b1, one_minus_b2,
                inv_bc1, inv_bc2, lr, eps, wd):
    for i in range(param.shape[0]):
        g = grad[i]
        m[i] = b1 * m[i] + one_minus_b1 * g
        v[i] = b2 * v[i] + one_minus_b2 * g * g
        mhat = m[i] * inv_bc1
        vhat = v[i] * inv_bc2
        param[i] -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * param[i])


def _adamw_numpy(param, grad, m, v, b1, b2, one_minus_b1, one_minus_b2,
                 inv_bc1, inv_bc2, lr, eps, wd):
    m *= b1
    m += one_minus_b1 * grad
    v *= b2
    v += one_minus_b2 * grad * grad
    param -= lr * ((m * inv_bc1) / (np.sqrt(v * inv_bc2) + eps) + wd * param)


if _WANT_NUMBA:
    _resample_numba = njit(cache=True)(_resample_loop)
    _adamw_numba = njit(cache=True)(_adamw_loop)
    resample_core = _resample_numba
    adamw_core = _adamw_numba
else:
    _resample_numba = None
    _adamw_numba = None
    resample_core = _resample_numpy
    adamw_core = _adamw_numpy


def backend() -> str:
    """Name of the active kernel backend, 'numba' or 'numpy'."""
    return "numba" if _WANT_NUMBA else "numpy"


def adamw_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray,
                 v: np.ndarray, lr: float, beta1: float, beta2: float,
                 eps: float, weight_decay: float, t: int) -> None:
    """Apply one decoupled-weight-decay Adam update in place.

    ``t`` is the already-incremented step count used for bias correction.
    All scalars are cast to the parameter dtype up front so both backends
    run identical arithmetic.
    """
    dt = param.dtype.type
    b1, b2 = dt(beta1), dt(beta2)
    adamw_core(
        param.reshape(-1), grad.reshape(-1).astype(param.dtype, copy=False),
        m.reshape(-1), v.reshape(-1),
        b1, b2, dt(1) - b1, dt(1) - b2,
        dt(1.0 / (1.0 - beta1 ** t)), dt(1.0 / (1.0 - beta2 ** t)),
        dt(lr), dt(eps), dt(weight_decay),
    )

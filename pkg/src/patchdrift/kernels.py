"""im2col/col2im kernels behind the toy detector's convolutions.

Convolutions are evaluated as a BLAS matmul over an unrolled patch
matrix; the unroll (gather) and its transpose (scatter-add) are the hot
inner loops.  They are compiled with numba by default, with a pure-numpy
fallback (fancy indexing / bincount) selected via the environment
variable

    PATCHDRIFT_BACKEND=numpy | numba

read once at import time.  Both paths produce identical gathers and use
the same matmul; only the scatter accumulation order differs (agreement
to ~1e-15 relative).  ``benchmarks/bench_kernels.py`` times both.

All arrays are float64, channel-first.  ``cols`` has one row per
(channel, tap) and one column per output pixel.
"""

from __future__ import annotations

import os

import numpy as np

_requested = os.environ.get("PATCHDRIFT_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ValueError(
        f"PATCHDRIFT_BACKEND must be 'numba' or 'numpy', got {_requested!r}"
    )

if _requested in ("", "numba"):
    try:
        from numba import njit

        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        BACKEND = "numpy"
else:
    BACKEND = "numpy"


def out_len(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    """Output length along one spatial axis."""
    span = dilation * (k - 1) + 1
    return (n + 2 * pad - span) // stride + 1


def _padded(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    cin, H, W = x.shape
    xp = np.zeros((cin, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
    xp[:, pad:pad + H, pad:pad + W] = x
    return xp


# ---------------------------------------------------------------------------
# numba kernels: tight serial loops over a pre-padded plane
# ---------------------------------------------------------------------------

if BACKEND == "numba":

    @njit(cache=True, fastmath=True)
    def _nb_im2col(xp, kh, kw, stride, dilation, OH, OW, cols):
        cin = xp.shape[0]
        k = 0
        for ci in range(cin):
            for ky in range(kh):
                for kx in range(kw):
                    xoff = kx * dilation
                    r = 0
                    for oy in range(OH):
                        row = xp[ci, ky * dilation + oy * stride]
                        for ox in range(OW):
                            cols[k, r] = row[ox * stride + xoff]
                            r += 1
                    k += 1

    @njit(cache=True, fastmath=True)
    def _nb_col2im(colg, kh, kw, stride, dilation, OH, OW, dxp):
        cin = dxp.shape[0]
        k = 0
        for ci in range(cin):
            for ky in range(kh):
                for kx in range(kw):
                    xoff = kx * dilation
                    r = 0
                    for oy in range(OH):
                        row = dxp[ci, ky * dilation + oy * stride]
                        for ox in range(OW):
                            row[ox * stride + xoff] += colg[k, r]
                            r += 1
                    k += 1


# ---------------------------------------------------------------------------
# numpy fallback: cached flat indices, gather / bincount scatter
# ---------------------------------------------------------------------------

_idx_cache: dict[tuple, np.ndarray] = {}


def _gather_indices(cin, Hp, Wp, kh, kw, stride, dilation, OH, OW):
    key = (cin, Hp, Wp, kh, kw, stride, dilation)
    hit = _idx_cache.get(key)
    if hit is not None:
        return hit
    ci = np.arange(cin).reshape(cin, 1, 1, 1, 1)
    ky = np.arange(kh).reshape(1, kh, 1, 1, 1) * dilation
    kx = np.arange(kw).reshape(1, 1, kw, 1, 1) * dilation
    oy = np.arange(OH).reshape(1, 1, 1, OH, 1) * stride
    ox = np.arange(OW).reshape(1, 1, 1, 1, OW) * stride
    flat = ci * (Hp * Wp) + (oy + ky) * Wp + (ox + kx)
    flat = np.ascontiguousarray(flat.reshape(cin * kh * kw, OH * OW))
    _idx_cache[key] = flat
    return flat


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def im2col(x, kh, kw, stride=1, pad=0, dilation=1):
    """Unroll [Cin,H,W] into a [Cin*kh*kw, OH*OW] patch matrix."""
    cin, H, W = x.shape
    OH = out_len(H, kh, stride, pad, dilation)
    OW = out_len(W, kw, stride, pad, dilation)
    xp = _padded(x, pad)
    if BACKEND == "numba":
        cols = np.empty((cin * kh * kw, OH * OW), dtype=np.float64)
        _nb_im2col(xp, kh, kw, stride, dilation, OH, OW, cols)
    else:
        flat = _gather_indices(cin, xp.shape[1], xp.shape[2], kh, kw,
                               stride, dilation, OH, OW)
        cols = xp.reshape(-1)[flat]
    return cols, (OH, OW)


def col2im(colg, in_hw, cin, kh, kw, stride=1, pad=0, dilation=1):
    """Scatter-add a patch-matrix gradient back to input shape [Cin,H,W]."""
    H, W = in_hw
    Hp, Wp = H + 2 * pad, W + 2 * pad
    OH = out_len(H, kh, stride, pad, dilation)
    OW = out_len(W, kw, stride, pad, dilation)
    if BACKEND == "numba":
        dxp = np.zeros((cin, Hp, Wp), dtype=np.float64)
        _nb_col2im(colg, kh, kw, stride, dilation, OH, OW, dxp)
    else:
        flat = _gather_indices(cin, Hp, Wp, kh, kw, stride, dilation, OH, OW)
        dxp = np.bincount(
            flat.reshape(-1), weights=colg.reshape(-1), minlength=cin * Hp * Wp
        ).reshape(cin, Hp, Wp)
    return dxp[:, pad:pad + H, pad:pad + W] if pad else dxp


def conv_forward(x, w, b, stride=1, pad=0, dilation=1):
    """Cross-correlation [Cin,H,W] -> [Cout,OH,OW]; returns (y, cols).

    ``cols`` is the unrolled patch matrix, reused by conv_grad_weights.
    """
    cout, cin, kh, kw = w.shape
    cols, (OH, OW) = im2col(x, kh, kw, stride, pad, dilation)
    y = w.reshape(cout, -1) @ cols + b[:, None]
    return y.reshape(cout, OH, OW), cols


def conv_grad_input(dy, w, in_hw, stride=1, pad=0, dilation=1):
    """Gradient of conv_forward w.r.t. its input."""
    cout, cin, kh, kw = w.shape
    colg = w.reshape(cout, -1).T @ dy.reshape(cout, -1)
    return col2im(colg, in_hw, cin, kh, kw, stride, pad, dilation)


def conv_grad_weights(dy, cols, w_shape):
    """Gradient of conv_forward w.r.t. weights, from the cached cols."""
    cout = w_shape[0]
    dw = dy.reshape(cout, -1) @ cols.T
    return dw.reshape(w_shape)

"""Max-pool scan kernels: a numba-compiled path and a pure-numpy fallback.

Both kernels take an already zero-padded ``C x Hp x Wp`` float32 array and
return ``(out, argmax, updates)`` where ``argmax`` holds flat indices into the
padded channel plane and ``updates`` is the number of executed max-update
assignments.

The compiled path is used unless ``POOLLEAK_DISABLE_NUMBA`` is set to a
non-empty value other than ``0`` (or numba cannot be imported). Tests and the
benchmark call the ``*_numba`` / ``*_numpy`` functions directly so both paths
stay covered regardless of the flag.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _numba_requested() -> bool:
    flag = os.environ.get("POOLLEAK_DISABLE_NUMBA", "")
    return flag in ("", "0")


try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _numba_requested()


def _out_dims(hp: int, wp: int, kh: int, kw: int, stride: int) -> tuple[int, int]:
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


# ---------------------------------------------------------------- pure python
# These two are the reference scans. numba compiles them unchanged; the numpy
# backend below is a separate vectorized formulation.


def _naive_scan(xp, kh, kw, stride):
    c_dim, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.empty((c_dim, oh, ow), dtype=xp.dtype)
    idx = np.empty((c_dim, oh, ow), dtype=np.int64)
    updates = 0
    for c in range(c_dim):
        for i in range(oh):
            for j in range(ow):
                r0 = i * stride
                c0 = j * stride
                maxval = -np.inf
                maxindex = r0 * wp + c0
                for r in range(r0, r0 + kh):
                    for q in range(c0, c0 + kw):
                        val = xp[c, r, q]
                        if (val > maxval) or np.isnan(val):
                            maxval = val
                            maxindex = r * wp + q
                            updates += 1
                out[c, i, j] = maxval
                idx[c, i, j] = maxindex
    return out, idx, updates


def _ct_scan(xp, kh, kw, stride):
    c_dim, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.empty((c_dim, oh, ow), dtype=xp.dtype)
    idx = np.empty((c_dim, oh, ow), dtype=np.int64)
    tmp_val = np.empty(2, dtype=xp.dtype)
    tmp_idx = np.empty(2, dtype=np.int64)
    tmp_val[0] = -np.inf
    neg_inf = tmp_val[0]
    updates = 0
    for c in range(c_dim):
        for i in range(oh):
            for j in range(ow):
                r0 = i * stride
                c0 = j * stride
                maxval = neg_inf
                maxindex = r0 * wp + c0
                for r in range(r0, r0 + kh):
                    for q in range(c0, c0 + kw):
                        val = xp[c, r, q]
                        index = r * wp + q
                        # one selector for both selects; keep on ties so the
                        # lowest index wins, as in the branchy scan
                        keep = np.int64(val <= maxval)
                        tmp_val[0] = val
                        tmp_val[1] = maxval
                        maxval = tmp_val[keep]
                        tmp_idx[0] = index
                        tmp_idx[1] = maxindex
                        maxindex = tmp_idx[keep]
                        updates += 1
                out[c, i, j] = maxval
                idx[c, i, j] = maxindex
    return out, idx, updates


if HAVE_NUMBA:
    _naive_scan_jit = numba.njit(cache=True, nogil=True)(_naive_scan)
    _ct_scan_jit = numba.njit(cache=True, nogil=True)(_ct_scan)


def maxpool_naive_numba(xp: np.ndarray, kh: int, kw: int, stride: int):
    if not HAVE_NUMBA:  # pragma: no cover
        raise RuntimeError("numba is not available")
    out, idx, n = _naive_scan_jit(np.ascontiguousarray(xp), kh, kw, stride)
    return out, idx, int(n)


def maxpool_ct_numba(xp: np.ndarray, kh: int, kw: int, stride: int):
    if not HAVE_NUMBA:  # pragma: no cover
        raise RuntimeError("numba is not available")
    out, idx, n = _ct_scan_jit(np.ascontiguousarray(xp), kh, kw, stride)
    return out, idx, int(n)


# ---------------------------------------------------------------- numpy path


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int):
    """Return (values, flat_index) arrays of shape (C, oh, ow, kh*kw)."""
    c_dim, hp, wp = xp.shape
    oh, ow = _out_dims(hp, wp, kh, kw, stride)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    vals = win.reshape(c_dim, oh, ow, kh * kw)
    rows = (np.arange(oh) * stride)[:, None, None] + (np.arange(kh * kw) // kw)[None, None, :]
    cols = (np.arange(ow) * stride)[None, :, None] + (np.arange(kh * kw) % kw)[None, None, :]
    return vals, rows * wp + cols


def maxpool_naive_numpy(xp: np.ndarray, kh: int, kw: int, stride: int):
    vals, flat = _windows(xp, kh, kw, stride)
    k = vals.shape[-1]
    # running max seen *before* each element; maximum.accumulate propagates NaN,
    # which reproduces "NaN wins, later finite values never beat it"
    prior = np.empty_like(vals)
    prior[..., 0] = -np.inf
    if k > 1:
        prior[..., 1:] = np.maximum.accumulate(vals, axis=-1)[..., :-1]
    with np.errstate(invalid="ignore"):
        upd = (vals > prior) | np.isnan(vals)
    last = k - 1 - np.argmax(upd[..., ::-1], axis=-1)
    # windows with no update (all -inf) keep the initial first-cell index
    last = np.where(upd.any(axis=-1), last, 0)
    out = np.take_along_axis(vals, last[..., None], axis=-1)[..., 0]
    out = np.where(upd.any(axis=-1), out, -np.inf).astype(xp.dtype)
    idx = np.take_along_axis(np.broadcast_to(flat, vals.shape), last[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int64), int(upd.sum())


def maxpool_ct_numpy(xp: np.ndarray, kh: int, kw: int, stride: int):
    vals, flat = _windows(xp, kh, kw, stride)
    shape = vals.shape[:-1]
    maxval = np.full(shape, -np.inf, dtype=xp.dtype)
    maxindex = np.broadcast_to(flat[..., 0], shape).astype(np.int64)
    for pos in range(vals.shape[-1]):
        val = vals[..., pos]
        with np.errstate(invalid="ignore"):
            keep = (val <= maxval).astype(np.intp)
        maxval = np.choose(keep, (val, maxval))
        maxindex = np.choose(keep, (np.broadcast_to(flat[..., pos], shape), maxindex))
    return maxval, maxindex, int(vals.size)


if USE_NUMBA:
    maxpool_naive = maxpool_naive_numba
    maxpool_ct = maxpool_ct_numba
    BACKEND = "numba"
else:
    maxpool_naive = maxpool_naive_numpy
    maxpool_ct = maxpool_ct_numpy
    BACKEND = "numpy"

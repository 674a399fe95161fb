"""Compiled inner loops for the dense kernel.

Every output element of ``matmul`` is accumulated as
``((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...``, strictly left to right over
the shared dimension. Blocking happens over rows and columns only, never over
the reduction axis, so results are bit-identical to a scalar triple loop and do
not depend on the thread count.
"""

from __future__ import annotations

import numba
import numpy as np

_COL_BLOCK = 512
_ROW_BLOCK = 4


@numba.njit(cache=True)
def _matmul_rows(a, b, out, r0, r1):
    k = a.shape[1]
    n = b.shape[1]
    for j0 in range(0, n, _COL_BLOCK):
        j1 = min(n, j0 + _COL_BLOCK)
        w = j1 - j0
        i = r0
        while i + _ROW_BLOCK <= r1:
            o0 = out[i, j0:j1]
            o1 = out[i + 1, j0:j1]
            o2 = out[i + 2, j0:j1]
            o3 = out[i + 3, j0:j1]
            for p in range(k):
                a0 = a[i, p]
                a1 = a[i + 1, p]
                a2 = a[i + 2, p]
                a3 = a[i + 3, p]
                brow = b[p, j0:j1]
                for j in range(w):
                    bj = brow[j]
                    o0[j] += a0 * bj
                    o1[j] += a1 * bj
                    o2[j] += a2 * bj
                    o3[j] += a3 * bj
            i += _ROW_BLOCK
        while i < r1:
            orow = out[i, j0:j1]
            for p in range(k):
                aip = a[i, p]
                brow = b[p, j0:j1]
                for j in range(w):
                    orow[j] += aip * brow[j]
            i += 1


@numba.njit(cache=True)
def _matmul_serial(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    _matmul_rows(a, b, out, 0, a.shape[0])
    return out


@numba.njit(cache=True, parallel=True)
def _matmul_parallel(a, b):
    m = a.shape[0]
    out = np.zeros((m, b.shape[1]))
    chunk = 64
    n_chunks = (m + chunk - 1) // chunk
    for c in numba.prange(n_chunks):
        _matmul_rows(a, b, out, c * chunk, min(m, (c + 1) * chunk))
    return out


_threads = 1


def set_num_threads(n: int) -> None:
    """Select the thread count used by :func:`matmul`; 1 means serial."""
    global _threads
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _threads = n
    if n > 1:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def get_num_threads() -> int:
    return _threads


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Fixed-order f64 product of two C-contiguous 2-D arrays."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if _threads > 1 and a.shape[0] >= 128:
        return _matmul_parallel(a, b)
    return _matmul_serial(a, b)

"""Compiled movement kernels for the locality-aware access orders.

The input-stationary gather and output-stationary scatter are per-row fanout
and fold loops; numpy has no primitive that runs them at memory speed, so
they are JIT-compiled with numba when it is available.  The numpy fallbacks
in :mod:`sparseconv.execution` compute bit-identical results, only slower.
Kernels are float32-only; other storage dtypes take the fallback path.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True)
def _gather_fanout(features, in_rows, in_indptr, out):  # pragma: no cover - jitted
    n_in, c = features.shape
    for j in range(n_in):
        for p in range(in_indptr[j], in_indptr[j + 1]):
            row = in_rows[p]
            for ch in range(c):
                out[row, ch] = features[j, ch]


@njit(cache=True)
def _scatter_fold(buffer, out_rows, out_indptr, out):  # pragma: no cover - jitted
    n_out, c = out.shape
    acc = np.zeros(c, dtype=np.float64)
    for k in range(n_out):
        for ch in range(c):
            acc[ch] = 0.0
        for p in range(out_indptr[k], out_indptr[k + 1]):
            row = out_rows[p]
            for ch in range(c):
                acc[ch] += buffer[row, ch]
        for ch in range(c):
            out[k, ch] = np.float32(acc[ch])


def gather_input_stationary(features: np.ndarray, in_rows: np.ndarray,
                            in_indptr: np.ndarray, total: int) -> np.ndarray | None:
    """Read each feature row once and fan it out to its buffer rows.

    Returns None when no compiled kernel applies; the caller falls back.
    """
    if not HAVE_NUMBA or features.dtype != np.float32:
        return None
    out = np.empty((total, features.shape[1]), dtype=np.float32)
    _gather_fanout(features, in_rows, in_indptr, out)
    return out


def scatter_output_stationary(buffer: np.ndarray, out_rows: np.ndarray,
                              out_indptr: np.ndarray, n_out: int) -> np.ndarray | None:
    """Fold each output's sources in ascending buffer-row order (float64
    registers) and write the row once.  Returns None when not applicable."""
    if not HAVE_NUMBA or buffer.dtype != np.float32:
        return None
    out = np.empty((n_out, buffer.shape[1]), dtype=np.float32)
    _scatter_fold(buffer, out_rows, out_indptr, out)
    return out

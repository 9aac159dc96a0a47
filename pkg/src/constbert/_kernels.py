"""Hot scoring loops, compiled with numba when available.

Two interchangeable backends are defined here: ``numba`` (``@njit`` loops)
and ``numpy`` (vectorised array code).  The active one is chosen once at
import time.  Set ``CONSTBERT_DISABLE_NUMBA=1`` to force the numpy path;
it is also used automatically when numba cannot be imported.

Every kernel takes float32 inputs and accumulates dot products and sums of
maxima in float64.  Query tokens are summed in order ``i = 0..N-1`` so a
given backend is bit-reproducible across runs.  Ties in the max resolve to
the lowest document row.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

_TRUTHY = {"1", "true", "yes", "on"}


def _numba_disabled() -> bool:
    return os.environ.get("CONSTBERT_DISABLE_NUMBA", "").strip().lower() in _TRUTHY


# --------------------------------------------------------------------------
# numpy backend
# --------------------------------------------------------------------------


def _np_sims(q: np.ndarray, d: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) @ np.asarray(d, dtype=np.float64).T


def np_maxsim(q, d):
    best = _np_sims(q, d).max(axis=1)
    total = 0.0
    for v in best:
        total += v
    return total


def np_argmax(q, d):
    return _np_sims(q, d).argmax(axis=1).astype(np.int64)


def _sum_rows_in_order(best: np.ndarray) -> np.ndarray:
    # best: (n_docs, N); sequential over query tokens to match the loop kernels
    out = np.zeros(best.shape[0], dtype=np.float64)
    for i in range(best.shape[1]):
        out += best[:, i]
    return out


def np_scan_fixed(q, docs, parallel=False):
    n, c, k = docs.shape
    if n == 0:
        return np.zeros(0, dtype=np.float64)
    sims = np.asarray(docs, dtype=np.float64).reshape(n * c, k) @ np.asarray(
        q, dtype=np.float64
    ).T
    best = sims.reshape(n, c, -1).max(axis=1)
    return _sum_rows_in_order(best)


def np_scan_ragged(q, tokens, offsets, parallel=False):
    n = offsets.shape[0] - 1
    if n == 0:
        return np.zeros(0, dtype=np.float64)
    sims = np.asarray(tokens, dtype=np.float64) @ np.asarray(q, dtype=np.float64).T
    best = np.maximum.reduceat(sims, offsets[:-1], axis=0)
    return _sum_rows_in_order(best)


numpy_backend = SimpleNamespace(
    name="numpy",
    maxsim=np_maxsim,
    argmax=np_argmax,
    scan_fixed=np_scan_fixed,
    scan_ragged=np_scan_ragged,
)


# --------------------------------------------------------------------------
# numba backend
# --------------------------------------------------------------------------


def _build_numba_backend():
    import numba
    from numba import njit, prange

    @njit(cache=True, nogil=True)
    def _dot(a, b):
        acc = 0.0
        for t in range(a.shape[0]):
            acc += np.float64(a[t]) * np.float64(b[t])
        return acc

    @njit(cache=True, nogil=True)
    def _maxsim(q, d):
        total = 0.0
        for i in range(q.shape[0]):
            best = _dot(q[i], d[0])
            for j in range(1, d.shape[0]):
                s = _dot(q[i], d[j])
                if s > best:
                    best = s
            total += best
        return total

    @njit(cache=True, nogil=True)
    def _argmax(q, d):
        out = np.empty(q.shape[0], dtype=np.int64)
        for i in range(q.shape[0]):
            best = _dot(q[i], d[0])
            arg = 0
            for j in range(1, d.shape[0]):
                s = _dot(q[i], d[j])
                if s > best:
                    best = s
                    arg = j
            out[i] = arg
        return out

    @njit(cache=True, nogil=True)
    def _maxsim_q64(q64, d):
        # q64 is pre-cast; each doc row is cast once and scored against every query row
        nq, k = q64.shape
        best = np.full(nq, -np.inf)
        row = np.empty(k)
        for j in range(d.shape[0]):
            for t in range(k):
                row[t] = d[j, t]
            for i in range(nq):
                acc = 0.0
                for t in range(k):
                    acc += q64[i, t] * row[t]
                if acc > best[i]:
                    best[i] = acc
        total = 0.0
        for i in range(nq):
            total += best[i]
        return total

    @njit(cache=True, nogil=True)
    def _scan_fixed_serial(q64, docs):
        n = docs.shape[0]
        out = np.empty(n, dtype=np.float64)
        for r in range(n):
            out[r] = _maxsim_q64(q64, docs[r])
        return out

    @njit(cache=True, nogil=True, parallel=True)
    def _scan_fixed_parallel(q64, docs):
        n = docs.shape[0]
        out = np.empty(n, dtype=np.float64)
        for r in prange(n):
            out[r] = _maxsim_q64(q64, docs[r])
        return out

    @njit(cache=True, nogil=True)
    def _scan_ragged_serial(q64, tokens, offsets):
        n = offsets.shape[0] - 1
        out = np.empty(n, dtype=np.float64)
        for r in range(n):
            out[r] = _maxsim_q64(q64, tokens[offsets[r] : offsets[r + 1]])
        return out

    @njit(cache=True, nogil=True, parallel=True)
    def _scan_ragged_parallel(q64, tokens, offsets):
        n = offsets.shape[0] - 1
        out = np.empty(n, dtype=np.float64)
        for r in prange(n):
            out[r] = _maxsim_q64(q64, tokens[offsets[r] : offsets[r + 1]])
        return out

    def scan_fixed(q, docs, parallel=False):
        if docs.shape[0] == 0:
            return np.zeros(0, dtype=np.float64)
        kern = _scan_fixed_parallel if parallel else _scan_fixed_serial
        return kern(np.ascontiguousarray(q, dtype=np.float64), np.ascontiguousarray(docs))

    def scan_ragged(q, tokens, offsets, parallel=False):
        if offsets.shape[0] <= 1:
            return np.zeros(0, dtype=np.float64)
        kern = _scan_ragged_parallel if parallel else _scan_ragged_serial
        return kern(
            np.ascontiguousarray(q, dtype=np.float64),
            np.ascontiguousarray(tokens),
            np.ascontiguousarray(offsets, dtype=np.int64),
        )

    return SimpleNamespace(
        name="numba",
        maxsim=lambda q, d: float(_maxsim(np.ascontiguousarray(q), np.ascontiguousarray(d))),
        argmax=lambda q, d: _argmax(np.ascontiguousarray(q), np.ascontiguousarray(d)),
        scan_fixed=scan_fixed,
        scan_ragged=scan_ragged,
        set_num_threads=numba.set_num_threads,
        get_num_threads=numba.get_num_threads,
    )


try:
    numba_backend = _build_numba_backend()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_backend = None

backend = numpy_backend if (_numba_disabled() or numba_backend is None) else numba_backend


def available_backends() -> dict:
    out = {"numpy": numpy_backend}
    if numba_backend is not None:
        out["numba"] = numba_backend
    return out


def set_threads(n: int) -> int:
    """Cap the numba thread pool; returns the effective count (1 for numpy)."""
    if backend is numba_backend and numba_backend is not None:
        import numba

        n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
        numba_backend.set_num_threads(n)
        return n
    return 1

"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``RISKMETA_DISABLE_NUMBA=1`` before import to force the numpy path.
Both paths return identical results up to floating point summation order;
within one path everything is deterministic.
"""

import os

import numpy as np

_DISABLED = os.environ.get("RISKMETA_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by RISKMETA_DISABLE_NUMBA")
    from numba import njit
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


# --------------------------------------------------------------------------- numpy

def _np_logsumexp_rows(x):
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def _np_cross_entropy_rows(logits, labels):
    lse = _np_logsumexp_rows(logits)
    return lse - logits[np.arange(logits.shape[0]), labels]


def _np_argsort_desc(v):
    # stable: equal values keep ascending original index
    return np.argsort(-v, kind="stable")


def _np_max_ranks(v):
    # rank_i = #{j : v_j <= v_i}; ties share the maximal rank
    return np.searchsorted(np.sort(v), v, side="right").astype(np.int64)


def _np_argmax_rows(x):
    return np.argmax(x, axis=1)


# --------------------------------------------------------------------------- numba

if HAS_NUMBA:

    @njit(cache=True)
    def _nb_logsumexp_rows(x):
        n, c = x.shape
        out = np.empty(n)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, c):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(c):
                s += np.exp(x[i, j] - m)
            out[i] = m + np.log(s)
        return out

    @njit(cache=True)
    def _nb_cross_entropy_rows(logits, labels):
        lse = _nb_logsumexp_rows(logits)
        out = np.empty(logits.shape[0])
        for i in range(logits.shape[0]):
            out[i] = lse[i] - logits[i, labels[i]]
        return out

    @njit(cache=True)
    def _nb_argsort_desc(v):
        # insertion sort on indices; batches are small and this keeps ties stable
        n = v.shape[0]
        idx = np.arange(n)
        for i in range(1, n):
            k = idx[i]
            j = i - 1
            while j >= 0 and v[idx[j]] < v[k]:
                idx[j + 1] = idx[j]
                j -= 1
            idx[j + 1] = k
        return idx

    @njit(cache=True)
    def _nb_max_ranks(v):
        s = np.sort(v)
        return np.searchsorted(s, v, side="right").astype(np.int64)

    @njit(cache=True)
    def _nb_argmax_rows(x):
        n, c = x.shape
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            best = 0
            for j in range(1, c):
                if x[i, j] > x[i, best]:
                    best = j
            out[i] = best
        return out


# --------------------------------------------------------------------------- public

def logsumexp_rows(x):
    """Row-wise max-stabilized log-sum-exp of a 2-d float64 array."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if HAS_NUMBA:
        return _nb_logsumexp_rows(x)
    return _np_logsumexp_rows(x)


def cross_entropy_rows(logits, labels):
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if HAS_NUMBA:
        return _nb_cross_entropy_rows(logits, labels)
    return _np_cross_entropy_rows(logits, labels)


def argsort_desc(v):
    """Indices ordering ``v`` from largest to smallest, ties by lower index first."""
    v = np.ascontiguousarray(v, dtype=np.float64)
    # insertion sort is quadratic; large vectors go through numpy's mergesort
    if HAS_NUMBA and v.shape[0] <= 256:
        return _nb_argsort_desc(v)
    return _np_argsort_desc(v)


def max_ranks(v):
    v = np.ascontiguousarray(v, dtype=np.float64)
    if HAS_NUMBA:
        return _nb_max_ranks(v)
    return _np_max_ranks(v)


def argmax_rows(x):
    """Row argmax with ties going to the lowest column index."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if HAS_NUMBA:
        return _nb_argmax_rows(x)
    return _np_argmax_rows(x)


def backend():
    return "numba" if HAS_NUMBA else "numpy"

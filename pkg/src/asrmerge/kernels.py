"""Hot inner loops: word-level edit distance.

Two interchangeable implementations of unit-cost Levenshtein distance over
integer-coded token sequences:

- ``levenshtein_numba``: the textbook two-row DP compiled with numba.
- ``levenshtein_numpy``: a row-vectorised DP.  Substitution and deletion are
  elementwise over the previous row; the insertion chain inside a row is
  resolved with a running minimum, using
  ``cur[j] = min_k (tmp[k] + j - k) = j + cummin(tmp - arange)[j]``.

``levenshtein`` points at the numba version unless numba is missing or
disabled through ``ASRMERGE_DISABLE_NUMBA``.
"""

import numpy as np

from asrmerge._accel import USE_NUMBA, njit


@njit(cache=True)
def levenshtein_numba(a, b):
    n = a.shape[0]
    m = b.shape[0]
    if n == 0:
        return m
    if m == 0:
        return n
    prev = np.empty(m + 1, dtype=np.int64)
    cur = np.empty(m + 1, dtype=np.int64)
    for j in range(m + 1):
        prev[j] = j
    for i in range(1, n + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, m + 1):
            cost = prev[j - 1] + (0 if ai == b[j - 1] else 1)
            dele = prev[j] + 1
            ins = cur[j - 1] + 1
            if dele < cost:
                cost = dele
            if ins < cost:
                cost = ins
            cur[j] = cost
        prev, cur = cur, prev
    return prev[m]


def levenshtein_numpy(a, b):
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    n, m = a.shape[0], b.shape[0]
    if n == 0:
        return m
    if m == 0:
        return n
    cols = np.arange(m + 1, dtype=np.int64)
    prev = cols.copy()
    tmp = np.empty(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        tmp[0] = i
        np.minimum(prev[:-1] + (b != a[i - 1]), prev[1:] + 1, out=tmp[1:])
        prev = cols + np.minimum.accumulate(tmp - cols)
    return int(prev[m])


def levenshtein(a, b):
    """Unit-cost edit distance between two int64 token-id arrays."""
    if USE_NUMBA:
        return int(levenshtein_numba(a, b))
    return levenshtein_numpy(a, b)


def encode_pair(ref, hyp):
    """Map two token lists onto a shared int64 id space."""
    vocab = {}
    ra = np.fromiter((vocab.setdefault(t, len(vocab)) for t in ref), dtype=np.int64, count=len(ref))
    hb = np.fromiter((vocab.setdefault(t, len(vocab)) for t in hyp), dtype=np.int64, count=len(hyp))
    return ra, hb

"""Exact order statistics and selection kernels for large activation tensors.

The ARM hook needs several order statistics of one tensor per call
(median, MAD, an upper percentile, the k-th smallest magnitude). Sorting or
partitioning the whole tensor for each of them costs more than the MLP
matmuls it sits between, so large inputs go through a sample-bracketing
scheme instead:

1. a strided sample predicts a value bracket around each target rank;
2. one fused pass counts elements below each bracket and compacts the
   elements inside it;
3. the target is picked exactly from the compacted buffer.

If a bracket misses its rank (adversarial layouts) the caller falls back to
a full partition, so results are always exact.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

from .tensor import GOLDEN, MIX1, MIX2

SAMPLE_STRIDE = 32
# rank half-width of a bracket, in sample standard deviations
BRACKET_SIGMAS = 4.0

VALUE, ABS_DEV = 0, 1


# Compaction is branchless (always store, conditionally advance): the
# in-bracket test is unpredictable near the median and a branch costs more
# than the store. Buffers must hold a.size + 1 entries.

@nb.njit(cache=True, nogil=True)
def _bracket2_values(a, lo0, hi0, lo1, hi1, buf0, buf1):
    below0 = below1 = n0 = n1 = 0
    for i in range(a.size):
        t = np.float64(a[i])
        below0 += t < lo0
        buf0[n0] = t
        n0 += (t >= lo0) & (t <= hi0)
        below1 += t < lo1
        buf1[n1] = t
        n1 += (t >= lo1) & (t <= hi1)
    return below0, n0, below1, n1


@nb.njit(cache=True, nogil=True)
def _bracket_absdev(a, center, lo, hi, buf):
    below = n = 0
    for i in range(a.size):
        t = abs(np.float64(a[i]) - center)
        below += t < lo
        buf[n] = t
        n += (t >= lo) & (t <= hi)
    return below, n


@nb.njit(cache=True, nogil=True)
def count_abs_le(a, eps):
    n = 0
    for i in range(a.size):
        n += abs(np.float64(a[i])) <= eps
    return n


@nb.njit(cache=True, nogil=True)
def count_abs_lt(a, thr):
    n = 0
    for i in range(a.size):
        n += abs(np.float64(a[i])) < thr
    return n


@nb.njit(cache=True, nogil=True)
def select_band(a, eps, idx):
    """Indices with ``|a| <= eps``."""
    n = 0
    for i in range(a.size):
        idx[n] = i
        n += abs(np.float64(a[i])) <= eps
    return n


@nb.njit(cache=True, nogil=True)
def select_indices(a, thr, ties, idx):
    """Indices with ``|a| < thr`` plus the first ``ties`` with ``|a| == thr``."""
    n = 0
    left = ties
    for i in range(a.size):
        t = abs(np.float64(a[i]))
        eq = (t == thr) & (left > 0)
        left -= eq
        idx[n] = i
        n += (t < thr) | eq
    return n


@nb.njit(cache=True, nogil=True)
def perturb_selected(a, out, idx, k, key, counter0, pos_hi, neg_lo):
    """Add a uniform draw from ``[0, pos_hi)`` or ``[neg_lo, 0)`` by sign.

    Draw ``j`` uses counter ``counter0 + j`` of the stream whose hashed seed
    is ``key``; the arithmetic mirrors ``RngStream.uniform_array``.
    """
    g = np.uint64(GOLDEN)
    m1 = np.uint64(MIX1)
    m2 = np.uint64(MIX2)
    s30 = np.uint64(30)
    s27 = np.uint64(27)
    s31 = np.uint64(31)
    s11 = np.uint64(11)
    scale = 1.0 / 9007199254740992.0
    for j in range(k):
        i = idx[j]
        v = np.float64(a[i])
        z = key + (counter0 + np.uint64(j + 1)) * g
        z = (z ^ (z >> s30)) * m1
        z = (z ^ (z >> s27)) * m2
        z = z ^ (z >> s31)
        u = np.float64(z >> s11) * scale
        if v >= 0.0:
            lo = 0.0
            hi = pos_hi
        else:
            lo = neg_lo
            hi = 0.0
        d = lo + (hi - lo) * u
        if d >= hi and hi > lo:
            d = np.nextafter(hi, lo)
        out[i] = v + d


def _brackets(sample_sorted_at, s: int, n: int, ranks):
    """Per-rank (lo, hi) value bracket predicted from the sample."""
    idx = []
    for r in ranks:
        q = r / (n - 1) if n > 1 else 0.5
        pos = q * (s - 1)
        w = BRACKET_SIGMAS * math.sqrt(s * q * (1 - q)) + 4
        idx.append((int(math.floor(pos - w)), int(math.ceil(pos + w))))
    need = sorted({i for pair in idx for i in pair if 0 <= i < s})
    vals = sample_sorted_at(need)
    out = []
    for lo_i, hi_i in idx:
        lo = vals[lo_i] if lo_i >= 0 else -np.inf
        hi = vals[hi_i] if hi_i < s else np.inf
        out.append((lo, hi))
    return out


def order_stats(a: np.ndarray, mode: int, center: float, groups):
    """Exact order statistics of ``t(a)`` for groups of ranks.

    ``t`` is the identity (``VALUE``, up to two groups) or ``|a - center|``
    (``ABS_DEV``, one group), evaluated in float64. Each group gets one
    bracket. Returns a dict rank -> value, or ``None`` when a bracket missed
    and the caller must fall back to a full partition.
    """
    n = a.size
    sample = a[::SAMPLE_STRIDE].astype(np.float64)
    if mode == ABS_DEV:
        sample = np.abs(sample - center)
    s = sample.size

    def at(ks):
        part = np.partition(sample, ks)
        return {k: float(part[k]) for k in ks}

    bounds = []
    for ranks in groups:
        br = _brackets(at, s, n, ranks)
        bounds.append((min(b[0] for b in br), max(b[1] for b in br)))
    cap = n + 1
    if mode == VALUE:
        if len(groups) == 1:
            groups = [groups[0], groups[0]]
            bounds = [bounds[0], bounds[0]]
        buf0 = np.empty(cap, np.float64)
        buf1 = np.empty(cap, np.float64)
        (lo0, hi0), (lo1, hi1) = bounds
        below0, n0, below1, n1 = _bracket2_values(a, lo0, hi0, lo1, hi1, buf0, buf1)
        found = ((below0, n0, buf0), (below1, n1, buf1))
    else:
        if len(groups) != 1:
            raise ValueError("ABS_DEV takes a single rank group")
        buf0 = np.empty(cap, np.float64)
        (lo0, hi0), = bounds
        below0, n0 = _bracket_absdev(a, center, lo0, hi0, buf0)
        found = ((below0, n0, buf0),)
    result = {}
    for ranks, (below, tot, buf) in zip(groups, found):
        local = [r - below for r in ranks]
        if min(local) < 0 or max(local) >= tot:
            return None
        part = np.partition(buf[:tot], local)
        for r, k in zip(ranks, local):
            result[r] = float(part[k])
    return result

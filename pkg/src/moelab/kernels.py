"""Hot routing kernels with a numba fast path and a pure-numpy fallback.

Three loops dominate simulator runtime at realistic token counts: per-row
top-k selection, capacity-order drop marking, and device-pair assignment
counting. Each exists twice, as an @njit kernel and as a vectorized numpy
equivalent, and the two are required to return bitwise-identical results
(the parity tests enforce this, so the env switch can never change any
simulated number).

Set ``MOELAB_NO_NUMBA=1`` to force the numpy path; the fallback also
engages automatically when numba is not importable. ``benchmarks/
bench_kernels.py`` times both paths side by side.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("MOELAB_NO_NUMBA", "").strip()
_DISABLED = _FLAG not in ("", "0")

try:
    if _DISABLED:
        raise ImportError("numba disabled via MOELAB_NO_NUMBA")
    from numba import njit
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn

USE_NUMBA = HAS_NUMBA


def topk_desc_np(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, in descending order.

    Ties resolve to the lower column index: the stable sort on negated
    scores keeps equal keys in their original column order.
    """
    return np.argsort(-scores, axis=1, kind="stable")[:, :k].astype(np.int64)


@njit(cache=True)
def topk_desc_nb(scores, k):
    n, e = scores.shape
    out = np.empty((n, k), dtype=np.int64)
    taken = np.zeros(e, dtype=np.bool_)
    for t in range(n):
        for m in range(e):
            taken[m] = False
        for j in range(k):
            best = 0
            best_v = -np.inf
            for m in range(e):
                # strict > keeps the lowest index on ties, matching the
                # stable-argsort path exactly
                if not taken[m] and scores[t, m] > best_v:
                    best_v = scores[t, m]
                    best = m
            out[t, j] = best
            taken[best] = True
    return out


def topk_desc(scores: np.ndarray, k: int) -> np.ndarray:
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if USE_NUMBA:
        return topk_desc_nb(scores, k)
    return topk_desc_np(scores, k)


def capacity_drop_mask_np(expert_flat: np.ndarray, e: int,
                          capacity: int) -> np.ndarray:
    """Drop mask over assignments in their given (token-major) order.

    The first ``capacity`` assignments of each expert survive; the stable
    sort preserves arrival order inside each expert group.
    """
    n = expert_flat.size
    order = np.argsort(expert_flat, kind="stable")
    sorted_e = expert_flat[order]
    starts = np.searchsorted(sorted_e, np.arange(e), side="left")
    ranks = np.arange(n, dtype=np.int64) - starts[sorted_e]
    dropped = np.empty(n, dtype=bool)
    dropped[order] = ranks >= capacity
    return dropped


@njit(cache=True)
def capacity_drop_mask_nb(expert_flat, e, capacity):
    counts = np.zeros(e, dtype=np.int64)
    out = np.empty(expert_flat.size, dtype=np.bool_)
    for i in range(expert_flat.size):
        ex = expert_flat[i]
        counts[ex] += 1
        out[i] = counts[ex] > capacity
    return out


def capacity_drop_mask(expert_flat: np.ndarray, e: int,
                       capacity: int) -> np.ndarray:
    expert_flat = np.ascontiguousarray(expert_flat, dtype=np.int64)
    if USE_NUMBA:
        return np.asarray(capacity_drop_mask_nb(expert_flat, e, capacity),
                          dtype=bool)
    return capacity_drop_mask_np(expert_flat, e, capacity)


def pair_counts_np(src: np.ndarray, dst: np.ndarray, keep: np.ndarray,
                   ep: int) -> np.ndarray:
    """Count kept assignments per (source device, destination device)."""
    keys = src[keep] * np.int64(ep) + dst[keep]
    return np.bincount(keys, minlength=ep * ep).reshape(ep, ep).astype(np.int64)


@njit(cache=True)
def pair_counts_nb(src, dst, keep, ep):
    out = np.zeros((ep, ep), dtype=np.int64)
    for i in range(src.size):
        if keep[i]:
            out[src[i], dst[i]] += 1
    return out


def pair_counts(src: np.ndarray, dst: np.ndarray, keep: np.ndarray,
                ep: int) -> np.ndarray:
    src = np.ascontiguousarray(src, dtype=np.int64)
    dst = np.ascontiguousarray(dst, dtype=np.int64)
    keep = np.ascontiguousarray(keep, dtype=bool)
    if USE_NUMBA:
        return pair_counts_nb(src, dst, keep, ep)
    return pair_counts_np(src, dst, keep, ep)

"""Hot numeric loops.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy
version. The public name is bound to one of them at import time. Set
``ESTARGAN_DISABLE_NUMBA=1`` (or run without numba installed) to force the
numpy path. Both variants are importable directly as ``<name>_numba`` and
``<name>_numpy`` so tests and the benchmark can compare them.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba ships with the sandbox
    numba = None
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("ESTARGAN_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def _njit(fn):
    if _HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# pairwise euclidean distances
# ---------------------------------------------------------------------------


@_njit
def pairwise_euclidean_numba(a, b):
    m, d = a.shape
    n = b.shape[0]
    out = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(d):
                diff = a[i, k] - b[j, k]
                acc += diff * diff
            out[i, j] = np.sqrt(acc)
    return out


def pairwise_euclidean_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


# ---------------------------------------------------------------------------
# DTW accumulated cost, steps {(1,0), (0,1), (1,1)}
# ---------------------------------------------------------------------------


@_njit
def dtw_accumulate_numba(cost):
    m, n = cost.shape
    acc = np.full((m, n), np.inf)
    acc[0, 0] = cost[0, 0]
    for i in range(m):
        for j in range(n):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0 and j > 0 and acc[i - 1, j - 1] < best:
                best = acc[i - 1, j - 1]
            if i > 0 and acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if j > 0 and acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = cost[i, j] + best
    return acc


def dtw_accumulate_numpy(cost: np.ndarray) -> np.ndarray:
    # Anti-diagonal wavefront: cells with i + j = k depend only on k-1, k-2.
    m, n = cost.shape
    acc = np.full((m + 1, n + 1), np.inf)
    acc[0, 0] = 0.0
    for k in range(m + n - 1):
        i = np.arange(max(0, k - n + 1), min(k, m - 1) + 1)
        j = k - i
        prev = np.minimum(np.minimum(acc[i, j], acc[i, j + 1]), acc[i + 1, j])
        acc[i + 1, j + 1] = cost[i, j] + prev
    return acc[1:, 1:].copy()


# ---------------------------------------------------------------------------
# DTW backtrack; ties prefer the diagonal, then (1,0), then (0,1)
# ---------------------------------------------------------------------------


@_njit
def dtw_backtrack_numba(acc):
    m, n = acc.shape
    path = np.empty((m + n, 2), dtype=np.int64)
    i = m - 1
    j = n - 1
    k = 0
    path[k, 0] = i
    path[k, 1] = j
    k += 1
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            d = acc[i - 1, j - 1]
            u = acc[i - 1, j]
            left = acc[i, j - 1]
            if d <= u and d <= left:
                i -= 1
                j -= 1
            elif u <= left:
                i -= 1
            else:
                j -= 1
        path[k, 0] = i
        path[k, 1] = j
        k += 1
    return path[:k][::-1].copy()


def dtw_backtrack_numpy(acc: np.ndarray) -> np.ndarray:
    m, n = acc.shape
    i, j = m - 1, n - 1
    path = [(i, j)]
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            step = int(np.argmin([acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]]))
            if step == 0:
                i, j = i - 1, j - 1
            elif step == 1:
                i -= 1
            else:
                j -= 1
        path.append((i, j))
    return np.asarray(path[::-1], dtype=np.int64)


# ---------------------------------------------------------------------------
# weighted overlap-add for the inverse STFT
# ---------------------------------------------------------------------------


@_njit
def overlap_add_numba(frames, window, hop):
    n_frames, frame_len = frames.shape
    length = frame_len + hop * (n_frames - 1)
    out = np.zeros(length)
    norm = np.zeros(length)
    for t in range(n_frames):
        start = t * hop
        for k in range(frame_len):
            out[start + k] += frames[t, k] * window[k]
            norm[start + k] += window[k] * window[k]
    for s in range(length):
        if norm[s] > 1e-11:
            out[s] /= norm[s]
    return out


def overlap_add_numpy(frames: np.ndarray, window: np.ndarray, hop: int) -> np.ndarray:
    n_frames, frame_len = frames.shape
    length = frame_len + hop * (n_frames - 1)
    idx = (np.arange(n_frames)[:, None] * hop + np.arange(frame_len)[None, :]).ravel()
    out = np.bincount(idx, weights=(frames * window).ravel(), minlength=length)
    norm = np.bincount(idx, weights=np.tile(window * window, n_frames), minlength=length)
    mask = norm > 1e-11
    out[mask] /= norm[mask]
    return out


# ---------------------------------------------------------------------------
# additive harmonic synthesis (toy corpus voices)
# ---------------------------------------------------------------------------


@_njit
def harmonic_synth_numba(phase, amps):
    # phase: (N,) fundamental phase in radians; amps: (H, N) per-harmonic gains
    n_harm, n = amps.shape
    out = np.zeros(n)
    for h in range(n_harm):
        mult = h + 1.0
        for s in range(n):
            a = amps[h, s]
            if a != 0.0:
                out[s] += a * np.sin(mult * phase[s])
    return out


def harmonic_synth_numpy(phase: np.ndarray, amps: np.ndarray) -> np.ndarray:
    mult = np.arange(1, amps.shape[0] + 1, dtype=np.float64)[:, None]
    return np.sum(amps * np.sin(mult * phase[None, :]), axis=0)


if USE_NUMBA:
    pairwise_euclidean = pairwise_euclidean_numba
    dtw_accumulate = dtw_accumulate_numba
    dtw_backtrack = dtw_backtrack_numba
    overlap_add = overlap_add_numba
    harmonic_synth = harmonic_synth_numba
else:
    pairwise_euclidean = pairwise_euclidean_numpy
    dtw_accumulate = dtw_accumulate_numpy
    dtw_backtrack = dtw_backtrack_numpy
    overlap_add = overlap_add_numpy
    harmonic_synth = harmonic_synth_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"

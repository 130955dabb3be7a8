"""Compiled inner loops for the unicity engine.

Randomness is counter based: SplitMix64 (Steele, Lea & Flood 2014) applied to
keys derived from (seed, epsilon, actor index).  Every target therefore owns
an independent stream and results do not depend on how targets are split
across worker threads.
"""

from __future__ import annotations

import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(x: int) -> int:
    """SplitMix64 finalizer on Python ints (reference form of ``_mix``)."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_key(*parts: int) -> int:
    """Fold integers into one 64-bit stream key."""
    h = 0
    for p in parts:
        h = mix64(h ^ (int(p) & _MASK))
    return h


def mix64_array(x: np.ndarray) -> np.ndarray:
    z = x.astype(np.uint64) + GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True, inline="always")
def _mix(x):
    z = x + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True, inline="always")
def _below(state, j, bound):
    """j-th draw of the stream ``state``, uniform on [0, bound)."""
    r = _mix(state + np.uint64(j + 1) * np.uint64(0x9E3779B97F4A7C15))
    u = np.float64(r >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    v = np.int64(u * bound)
    return v if v < bound else bound - 1


@njit(cache=True, nogil=True)
def _contains(arr, lo, hi, v):
    while lo < hi:
        mid = (lo + hi) >> 1
        x = arr[mid]
        if x < v:
            lo = mid + 1
        elif x > v:
            hi = mid
        else:
            return True
    return False


@njit(cache=True, nogil=True)
def _is_unique(target, obs, n_obs, post_ptr, post_actors, act_ptr, act_tuples):
    """True iff ``target`` is the only actor whose set contains all of ``obs``.

    Scans the shortest posting list for a second actor holding every
    observation and stops at the first such witness.
    """
    best = 0
    best_len = post_ptr[obs[0] + 1] - post_ptr[obs[0]]
    for j in range(1, n_obs):
        ln = post_ptr[obs[j] + 1] - post_ptr[obs[j]]
        if ln < best_len:
            best = j
            best_len = ln
    s = obs[best]
    for p in range(post_ptr[s], post_ptr[s + 1]):
        c = post_actors[p]
        if c == target:
            continue
        lo = act_ptr[c]
        hi = act_ptr[c + 1]
        ok = True
        for j in range(n_obs):
            if j != best and not _contains(act_tuples, lo, hi, obs[j]):
                ok = False
                break
        if ok:
            return False
    return True


@njit(cache=True, nogil=True)
def mc_chunk(targets, eps, key, clamp, post_ptr, post_actors, act_ptr, act_tuples, out):
    """Uniqueness indicator per target: 1 unique, 0 not unique, -1 excluded.

    Observations are ``eps`` distinct tuples of the target drawn uniformly
    without replacement (Floyd's algorithm over tuple positions).
    """
    obs = np.empty(max(eps, 1), dtype=np.int32)
    pos = np.empty(max(eps, 1), dtype=np.int64)
    for i in range(targets.shape[0]):
        a = targets[i]
        lo = act_ptr[a]
        k = act_ptr[a + 1] - lo
        if k < eps:
            if not clamp:
                out[i] = -1
                continue
            for j in range(k):
                obs[j] = act_tuples[lo + j]
            n_obs = k
        else:
            state = _mix(key ^ _mix(np.uint64(a)))
            n_obs = 0
            draw = 0
            for jj in range(k - eps, k):
                t = _below(state, draw, jj + 1)
                draw += 1
                seen = False
                for q in range(n_obs):
                    if pos[q] == t:
                        seen = True
                        break
                pos[n_obs] = jj if seen else t
                n_obs += 1
            for j in range(n_obs):
                obs[j] = act_tuples[lo + pos[j]]
        out[i] = 1 if _is_unique(a, obs, n_obs, post_ptr, post_actors, act_ptr, act_tuples) else 0


@njit(cache=True, nogil=True)
def exact_chunk(actors, eps, post_ptr, post_actors, act_ptr, act_tuples, uniq, total):
    """Enumerate every eps-subset of each actor's set; count unique subsets."""
    idx = np.empty(max(eps, 1), dtype=np.int64)
    obs = np.empty(max(eps, 1), dtype=np.int32)
    for i in range(actors.shape[0]):
        a = actors[i]
        lo = act_ptr[a]
        k = act_ptr[a + 1] - lo
        if k < eps:
            uniq[i] = 0
            total[i] = 0
            continue
        for j in range(eps):
            idx[j] = j
        u = 0
        n = 0
        while True:
            for j in range(eps):
                obs[j] = act_tuples[lo + idx[j]]
            if _is_unique(a, obs, eps, post_ptr, post_actors, act_ptr, act_tuples):
                u += 1
            n += 1
            # next combination in lexicographic order
            j = eps - 1
            while j >= 0 and idx[j] == k - eps + j:
                j -= 1
            if j < 0:
                break
            idx[j] += 1
            for q in range(j + 1, eps):
                idx[q] = idx[q - 1] + 1
        uniq[i] = u
        total[i] = n
